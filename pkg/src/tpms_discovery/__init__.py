"""Closed-loop discovery of energy-dissipating TPMS lattices.

Design space generation and meshing, compression-curve processing, a deep
ensemble surrogate, and batch UCB acquisition, wired into a campaign driver
that can run against a synthetic virtual lab.
"""
from .tpms_field import (
    N_PRIMITIVES,
    PRIMITIVE_NAMES,
    TpmsField,
    check_weights,
    eval_field,
    eval_gradient,
    eval_primitive,
    is_solid,
)

__version__ = "0.1.0"

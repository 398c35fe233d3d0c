"""Deep-ensemble surrogate mapping (design weights, strain) to stress."""
from .ensemble import (
    EnsembleModel,
    TrainingSet,
    predict_dissipation,
    predict_stress,
    train_ensemble,
    train_member,
)
from .mlp import MlpSpec, TrainConfig, TrainingDivergenceError, backprop_gradient_check

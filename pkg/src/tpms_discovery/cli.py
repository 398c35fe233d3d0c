"""Command line front end for discovery campaigns.

The campaign directory comes from ``--state`` or the ``TPMS_CAMPAIGN_DIR``
environment variable (default ``./campaign``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from .campaign import (
    CampaignConfig,
    CampaignError,
    CampaignState,
    export_batch_meshes,
    format_table,
    ingest_results,
    init_campaign,
    propose_next_batch,
    run_virtual_campaign,
    write_report,
)
from .lattice_geometry import LatticeSpec

ENV_STATE_DIR = "TPMS_CAMPAIGN_DIR"

log = logging.getLogger("tpms_discovery")


def default_state_dir() -> Path:
    return Path(os.environ.get(ENV_STATE_DIR, "campaign"))


def _config(args) -> CampaignConfig:
    cfg = CampaignConfig.fast() if args.fast else CampaignConfig()
    changes = {}
    if args.pool_size is not None:
        changes["pool_size"] = args.pool_size
    if args.batch_size is not None:
        changes["proposal_size"] = args.batch_size
    if getattr(args, "initial_size", None) is not None:
        changes["initial_batch_size"] = args.initial_size
    return cfg.with_(**changes) if changes else cfg


def cmd_init(args):
    if (args.state / "state.json").exists() and not args.force:
        raise CampaignError(f"{args.state} already holds a campaign (use --force to overwrite)")
    state = init_campaign(_config(args), args.seed if args.seed is not None else 0)
    state.save(args.state)
    print(f"initialized {args.state}: batch 1 with {len(state.batch(1).designs)} designs")
    for d in state.batch(1).designs:
        print(d.design_id, " ".join(f"{x:.4f}" for x in d.weights))


def cmd_propose(args):
    state = CampaignState.load(args.state)
    state, path = propose_next_batch(state, args.state, seed=args.seed, kappa_override=args.kappa_override,
                                     pool_size=args.pool_size, batch_size=args.batch_size)
    state.save(args.state)
    b = state.batches[-1]
    print(f"batch {b.index} (kappa={b.kappa:g}): {len(b.designs)} designs -> {path}")


def cmd_ingest(args):
    state = CampaignState.load(args.state)
    before = state.version
    ingest_results(state, args.files)
    state.save(args.state)
    print(f"ingested {len(args.files)} files; state version {before} -> {state.version}")


def cmd_report(args):
    state = CampaignState.load(args.state)
    out = args.out or args.state / "report"
    report = write_report(state, out)
    print(format_table(report))
    print(f"report files in {out}")


def cmd_export(args):
    state = CampaignState.load(args.state)
    out = args.out or args.state / "meshes" / f"b{args.batch:02d}"
    spec = LatticeSpec(resolution=args.resolution)
    written, skipped = export_batch_meshes(state, args.batch, out, spec)
    for did, reason in skipped:
        print(f"skipped {did}: {reason}")
    print(f"wrote {len(written)} STL files to {out}")


def cmd_virtual(args):
    cfg = _config(args)
    seed = args.seed if args.seed is not None else 0
    t0 = time.perf_counter()

    def progress(state, index):
        values = state.batch_dissipations(index)
        print(f"batch {index:2d}: n={len(values)} mean={values.mean():.2f} ({time.perf_counter() - t0:.0f} s)",
              flush=True)

    state, report = run_virtual_campaign(cfg, seed, args.state, progress=progress)
    write_report(state, args.state / "report")
    print(format_table(report))
    first, last = report.row(1).mean, report.row(cfg.n_batches).mean
    print(f"final/initial mean dissipation: {last / first:.2f}x in {time.perf_counter() - t0:.0f} s")


def build_parser():
    parser = argparse.ArgumentParser(prog="tpms-campaign", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--state", type=Path, default=None,
                        help=f"campaign directory (default ${ENV_STATE_DIR} or ./campaign)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--pool-size", type=int, default=None)
    common.add_argument("--batch-size", type=int, default=None, help="designs per proposal")
    common.add_argument("--kappa-override", type=float, default=None)
    common.add_argument("--fast", action="store_true", help="reduced pool and ensemble for quick runs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="create a campaign with a uniform first batch")
    p.add_argument("--initial-size", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init)
    p = sub.add_parser("propose", parents=[common], help="retrain and propose the next batch")
    p.set_defaults(func=cmd_propose)
    p = sub.add_parser("ingest", parents=[common], help="ingest <design>_rep<k>.csv measurement files")
    p.add_argument("files", nargs="+", type=Path)
    p.set_defaults(func=cmd_ingest)
    p = sub.add_parser("report", parents=[common], help="per-batch table, PCA and curve data")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("export-meshes", parents=[common], help="STL files for one batch")
    p.add_argument("batch", type=int)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--resolution", type=int, default=64, help="voxels per unit cell")
    p.set_defaults(func=cmd_export)
    p = sub.add_parser("virtual-run", parents=[common], help="closed-loop campaign against the virtual lab")
    p.set_defaults(func=cmd_virtual)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.state is None:
        args.state = default_state_dir()
    try:
        args.func(args)
    except (CampaignError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

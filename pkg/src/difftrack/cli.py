"""Command-line entry point.

Subcommands: simulate, train, filter, benchmark, mismatch, nclt-prepare,
nclt-eval, report. Each takes --config <yaml path>, --seed <int>, --out <dir>.
Exit code 0 on success; on failure a machine-readable JSON error line goes to
stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench as bn
from . import datasets as ds
from . import denoiser as dn
from .diffusion import GuidanceConfig, build_schedule
from .filters import FilterConfig
from .ssm import (
    load_trajectories,
    sample_attractor_state,
    save_trajectories,
    simulate_trajectory,
    ssm_from_dict,
)


def _load_config(path) -> dict:
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def cmd_simulate(args):
    cfg = _load_config(args.config)["simulate"]
    ssm = ssm_from_dict(cfg["ssm"])
    rng = np.random.default_rng(_seed(args))
    trajs = []
    for _ in range(int(cfg.get("n_trajectories", 1))):
        x0_spec = cfg.get("x0", "attractor")
        if x0_spec == "attractor":
            x0 = sample_attractor_state(rng)
        elif x0_spec == "ones":
            x0 = np.ones(ssm.n_x)
        else:
            x0 = np.asarray(x0_spec, dtype=np.float64)
        trajs.append(simulate_trajectory(ssm, x0, int(cfg["horizon"]), rng))
    out = _out_dir(args)
    save_trajectories(trajs, out / "trajectories.csv")
    print(f"wrote {len(trajs)} trajectories to {out / 'trajectories.csv'}")


def cmd_train(args):
    cfg = _load_config(args.config)["train"]
    dataset_dir = cfg["dataset_dir"]
    manifest = ds.load_manifest(dataset_dir)
    windows = ds.load_windows(dataset_dir, "train")
    net_cfg = dn.NetConfig(
        horizon=manifest.horizon,
        width=windows.tau0.shape[2],
        cond_length=manifest.cond_length,
        **cfg.get("net", {}),
    )
    train_cfg = dn.TrainConfig(**cfg.get("train", {}))
    diff = cfg.get("diffusion", {})
    K = int(diff.get("K", 50))
    kind = diff.get("kind", "cosine")
    sched = build_schedule(K, kind)
    norm = manifest.normalization()
    transition = None
    if cfg.get("dynamics_from_dataset", True) and manifest.ssm is not None:
        transition = ssm_from_dict(manifest.ssm).transition
    rng = np.random.default_rng(_seed(args))
    out = _out_dir(args)
    meta = {
        "norm_mean": manifest.norm_mean,
        "norm_std": manifest.norm_std,
        "schedule_K": K,
        "schedule_kind": kind,
        "dataset_dir": str(dataset_dir),
        "dataset_seed": manifest.seed,
        "train_seed": _seed(args),
        "train_config": {
            "learning_rate": train_cfg.learning_rate,
            "epochs": train_cfg.epochs,
            "batch_size": train_cfg.batch_size,
            "cond_dropout_p": train_cfg.cond_dropout_p,
            "dynamic_loss_weight": train_cfg.dynamic_loss_weight,
            "grad_clip": train_cfg.grad_clip,
        },
    }
    dn.train(windows, net_cfg, train_cfg, sched, rng, transition=transition,
             norm=norm, out_dir=out, checkpoint_meta=meta,
             log_fn=lambda m: print(m, flush=True))
    print(f"checkpoint at {out / 'checkpoint.bin'}")


def _guidance_from(cfg: dict) -> GuidanceConfig:
    return GuidanceConfig(**cfg.get("guidance", {}))


def cmd_filter(args):
    cfg = _load_config(args.config)["filter"]
    ssm = ssm_from_dict(cfg["ssm"])
    kind = cfg["kind"]
    trajs = load_trajectories(cfg["trajectories"])
    rng = np.random.default_rng(_seed(args))
    ests = []
    if kind == "trackdiffuser":
        model = bn.load_model(cfg["checkpoint"])
        guid = _guidance_from(cfg)
        meas = np.stack([t.measurements for t in trajs])
        x0 = np.stack([t.states[0] for t in trajs])
        out_batch = bn.track_trajectories(
            model.params, model.net_cfg, meas, x0, model.schedule(), guid,
            ssm.transition, model.norm, rng,
        )
        ests = list(out_batch)
    else:
        fc = FilterConfig(**cfg.get("filter_cfg", {}))
        from .filters import filter_trajectory
        for t in trajs:
            ests.append(filter_trajectory(kind, ssm, t.measurements,
                                          t.states[0], fc, rng))
    out = _out_dir(args)
    bn.save_estimates(trajs, ests, out / "estimates.csv")
    print(f"wrote estimates for {len(trajs)} trajectories")


def _model_from(cfg: dict):
    path = cfg.get("checkpoint")
    return bn.load_model(path) if path else None


def cmd_benchmark(args):
    raw = _load_config(args.config)
    if args.seed is not None:
        raw["scenario"]["seed"] = args.seed
    scenario = bn.scenario_from_dict(raw["scenario"])
    model = _model_from(raw)
    report = bn.run_benchmark(scenario, model,
                              log_fn=lambda m: print(m, flush=True))
    paths = bn.emit_report(report, _out_dir(args))
    print("wrote " + ", ".join(str(p) for p in paths))


def cmd_mismatch(args):
    raw = _load_config(args.config)["mismatch"]
    scenario = bn.scenario_from_dict(raw["scenario"])
    model = _model_from(raw)
    report = bn.run_mismatch_suite(raw["kind"], scenario, model,
                                   log_fn=lambda m: print(m, flush=True))
    paths = bn.emit_report(report, _out_dir(args),
                           basename=f"mismatch_{raw['kind']}")
    print("wrote " + ", ".join(str(p) for p in paths))


def cmd_nclt_prepare(args):
    cfg = _load_config(args.config).get("nclt_prepare", {})
    out = _out_dir(args)
    gt, odo = cfg.get("ground_truth"), cfg.get("odometry")
    if not gt or not odo:
        syn = cfg.get("synthetic", {})
        rng = np.random.default_rng(_seed(args))
        gt, odo = ds.synthetic_nclt_session(out / "raw", rng, **syn)
        print(f"no raw session given: wrote synthetic stand-in under {out/'raw'}")
    manifest = ds.nclt_ingest(gt, odo, out, seed=_seed(args))
    print(f"ingested: {manifest.trajectory_counts} trajectories "
          f"({manifest.unused_trajectories} unused)")


def cmd_nclt_eval(args):
    cfg = _load_config(args.config)["nclt_eval"]
    model = _model_from(cfg)
    report = bn.run_nclt(
        cfg["dataset_dir"], model,
        filters=tuple(cfg.get("filters", ("baseline", "ekf", "trackdiffuser"))),
        guidance=_guidance_from(cfg), seed=_seed(args),
        log_fn=lambda m: print(m, flush=True),
    )
    paths = bn.emit_report(report, _out_dir(args), basename="nclt_report")
    print("wrote " + ", ".join(str(p) for p in paths))


def cmd_report(args):
    cfg = _load_config(args.config)["report"]
    report = bn.report_from_csv(Path(cfg["csv"]).read_text())
    formats = tuple(cfg.get("formats", ("csv", "svg")))
    paths = bn.emit_report(report, _out_dir(args), formats=formats)
    print("wrote " + ", ".join(str(p) for p in paths))


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "filter": cmd_filter,
    "benchmark": cmd_benchmark,
    "mismatch": cmd_mismatch,
    "nclt-prepare": cmd_nclt_prepare,
    "nclt-eval": cmd_nclt_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="difftrack",
        description="State-estimation toolkit: simulators, classical filters, "
                    "a diffusion filter, and benchmark reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML config path")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (overrides config where relevant)")
        p.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

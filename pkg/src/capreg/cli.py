"""Command-line interface.

Commands: pretrain, probe, sweep, gradcheck, dataset-gen, report.
Exit codes partition failures: 2 configuration/usage, 3 numeric abort,
4 checkpoint/artifact compatibility, 1 failed checks.
"""

import argparse
import concurrent.futures
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import manifest as manifest_mod
from . import probe as probe_mod
from . import train as train_mod
from .autodiff.tensor import NumericError, ShapeError
from .config import ConfigError
from .models import CheckpointError, EncoderConfig, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_COMPAT = 4


def _checkpoint_meta(cfg):
    from .atlas import AtlasConfig
    from .train import build_model  # noqa: F401  (documented pairing)

    return {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "precision": cfg.precision,
        "config_hash": config_mod.config_hash(cfg),
        "config_text": config_mod.canonical_text(cfg),
        "feature_mode": train_mod.feature_mode_for(cfg.mode),
        "encoder": {
            "input_height": cfg.encoder.input_height,
            "input_width": cfg.encoder.input_width,
            "plan": [asdict(s) for s in cfg.encoder.plan],
            "local_tap_index": cfg.encoder.local_tap_index,
        },
        "atlas": {
            "n_heads": cfg.train.n_heads,
            "units_per_head": cfg.train.units_per_head,
            "hidden_units": cfg.train.hidden_units,
            "head_kind": cfg.train.head_kind,
            "membership_enabled": cfg.train.uses_membership,
            "membership_temperature": cfg.train.membership_temperature,
            "membership_init": cfg.train.membership_init,
        },
        "world": asdict(cfg.world),
        "probe": {
            "lr": cfg.probe.lr,
            "steps": cfg.probe.steps,
            "batch_size": cfg.probe.batch_size,
            "eval_every": cfg.probe.eval_every,
            "patience": cfg.probe.patience,
        },
    }


def _encoder_from_meta(meta):
    from .models import ConvSpec

    enc = meta["encoder"]
    return EncoderConfig(
        input_height=enc["input_height"],
        input_width=enc["input_width"],
        plan=[ConvSpec(**s) for s in enc["plan"]],
        local_tap_index=enc["local_tap_index"],
    )


def _atlas_from_meta(meta):
    from .atlas import AtlasConfig

    return AtlasConfig(**meta["atlas"])


def prepare_dataset(cfg, out_dir, dataset=None):
    """Use an existing dataset manifest or generate one under out_dir."""
    if dataset:
        return os.path.abspath(dataset)
    ds_dir = os.path.join(out_dir, "dataset")
    return data_mod.generate_dataset(
        ds_dir, cfg.world, cfg.data.n_episodes, cfg.data.episode_length, cfg.data.dataset_seed
    )


def run_pretrain(cfg, out_dir, dataset=None):
    """Execute one pretraining run; returns paths of the three artifacts."""
    os.makedirs(out_dir, exist_ok=True)
    started = time.monotonic()
    manifest_path = prepare_dataset(cfg, out_dir, dataset)
    episodes, _ = data_mod.load_dataset(manifest_path)
    result = train_mod.pretrain(cfg.train, cfg.encoder, episodes)
    trace_path = os.path.join(out_dir, "loss_trace.csv")
    train_mod.write_trace(trace_path, result.trace)
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(ckpt_path, result.params, result.bn_states, _checkpoint_meta(cfg))
    run_manifest = os.path.join(out_dir, "run_manifest.json")
    manifest_mod.write_run_manifest(
        run_manifest,
        command="pretrain",
        seed=cfg.seed,
        config_hash=config_mod.config_hash(cfg),
        config_text=config_mod.canonical_text(cfg),
        artifacts={
            "checkpoint": ckpt_path,
            "loss_trace": trace_path,
            "dataset_manifest": manifest_path,
        },
        wall_clock=time.monotonic() - started,
    )
    return {
        "checkpoint": ckpt_path,
        "loss_trace": trace_path,
        "dataset_manifest": manifest_path,
        "run_manifest": run_manifest,
    }


def run_probe(checkpoint_path, dataset_path, out_dir, seed=None):
    """Probe a checkpoint against a dataset; returns (report, json path)."""
    params, bn_states, meta = load_checkpoint(checkpoint_path)
    episodes, _ = data_mod.load_dataset(dataset_path)
    enc_cfg = _encoder_from_meta(meta)
    atlas_cfg = _atlas_from_meta(meta)
    probe_seed = meta["seed"] if seed is None else int(seed)
    probe_cfg = probe_mod.ProbeConfig(seed=probe_seed, **meta.get("probe", {}))
    report = probe_mod.probe_checkpoint(
        params,
        bn_states,
        enc_cfg,
        atlas_cfg,
        episodes,
        meta["feature_mode"],
        probe_cfg,
        seed=probe_seed,
        config_hash=meta["config_hash"],
    )
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "probe_report.json")
    probe_mod.write_report(report_path, report)
    return report, report_path


def cmd_pretrain(args):
    cfg = config_mod.parse_config(args.config)
    cfg = config_mod.with_overrides(cfg, seed=args.seed, precision=args.precision)
    paths = run_pretrain(cfg, args.out_dir, dataset=args.dataset)
    print(f"checkpoint={paths['checkpoint']}")
    return EXIT_OK


def cmd_probe(args):
    report, report_path = run_probe(
        args.checkpoint, args.dataset, args.out_dir, seed=args.seed
    )
    print(f"mean_f1={report.mean_f1!r} mean_acc={report.mean_accuracy!r}")
    return EXIT_OK


def cmd_dataset_gen(args):
    cfg = config_mod.parse_config(args.config)
    seed = cfg.data.dataset_seed if args.seed is None else int(args.seed)
    path = data_mod.generate_dataset(
        args.out_dir, cfg.world, cfg.data.n_episodes, cfg.data.episode_length, seed
    )
    print(f"dataset_manifest={path}")
    return EXIT_OK


def _sweep_task(task):
    """One sweep sub-run (module-level for process pools)."""
    try:
        cfg = config_mod.parse_config_text(task["config_text"])
        cfg = config_mod.with_overrides(cfg, seed=task["seed"])
        paths = run_pretrain(cfg, task["out_dir"], dataset=task["dataset"])
        report, _ = run_probe(
            paths["checkpoint"], task["dataset"], task["out_dir"], seed=task["seed"]
        )
        return {
            "value": task["value"],
            "seed": task["seed"],
            "mean_f1": report.mean_f1,
            "mean_accuracy": report.mean_accuracy,
            "status": "ok",
            "error": "",
        }
    except Exception as exc:  # failures are recorded per-row, sweep continues
        return {
            "value": task["value"],
            "seed": task["seed"],
            "mean_f1": "",
            "mean_accuracy": "",
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
        }


def apply_sweep_value(cfg, axis, value):
    """Derive the per-point config; heads hold total units fixed."""
    if axis == "epsilon":
        return config_mod.with_overrides(cfg, epsilon=float(value))
    if axis == "units":
        return config_mod.with_overrides(cfg, units_per_head=int(value))
    if axis == "heads":
        heads = int(value)
        total = cfg.train.n_heads * cfg.train.units_per_head
        if total % heads != 0:
            raise ConfigError(
                f"heads axis: total units {total} not divisible by head count {heads}"
            )
        return config_mod.with_overrides(
            cfg, n_heads=heads, units_per_head=total // heads
        )
    raise ConfigError(f"unknown sweep axis {axis!r}")


def cmd_sweep(args):
    base = config_mod.parse_config(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep: empty values list")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    configs = {v: apply_sweep_value(base, args.axis, v) for v in values}

    os.makedirs(args.out_dir, exist_ok=True)
    dataset = prepare_dataset(base, args.out_dir, args.dataset)
    tasks = []
    for value in values:
        for seed in seeds:
            run_dir = os.path.join(args.out_dir, "runs", f"{args.axis}_{value}_s{seed}")
            tasks.append(
                {
                    "value": value,
                    "seed": seed,
                    "config_text": config_mod.canonical_text(configs[value]),
                    "out_dir": run_dir,
                    "dataset": dataset,
                }
            )
    workers = args.workers or os.cpu_count() or 1
    if workers > 1 and len(tasks) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_task, tasks))
    else:
        rows = [_sweep_task(t) for t in tasks]

    csv_path = os.path.join(args.out_dir, "sweep.csv")
    with open(csv_path, "w") as fh:
        fh.write("axis,value,seed,mean_f1,mean_accuracy,status,error\n")
        for row in rows:
            fh.write(
                f"{args.axis},{row['value']},{row['seed']},{row['mean_f1']!r},"
                f"{row['mean_accuracy']!r},{row['status']},{row['error']}\n"
            )
        for value in values:
            ok = [r for r in rows if r["value"] == value and r["status"] == "ok"]
            if ok:
                mf = float(np.mean([r["mean_f1"] for r in ok]))
                ma = float(np.mean([r["mean_accuracy"] for r in ok]))
                fh.write(f"{args.axis},{value},mean,{mf!r},{ma!r},ok,\n")
            else:
                fh.write(f"{args.axis},{value},mean,'','',failed,no successful runs\n")
    print(f"sweep_csv={csv_path}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .autodiff import gradcheck as gc

    checks = gc.all_checks()
    if args.scope == "all":
        names = sorted(checks)
    elif args.scope in checks:
        names = [args.scope]
    else:
        print(f"unknown op {args.scope!r}; known: {', '.join(sorted(checks))}", file=sys.stderr)
        return EXIT_CONFIG

    def run():
        return gc.run_named_checks(names, points=args.points, seed=args.seed)

    if args.corrupt:
        if args.corrupt not in set(__import__("capreg.autodiff.ops", fromlist=["_OPS"])._OPS):
            print(f"unknown op {args.corrupt!r} for corruption hook", file=sys.stderr)
            return EXIT_CONFIG
        with gc.corrupt_op_gradient(args.corrupt):
            rows = run()
    else:
        rows = run()

    width = max(len(n) for n in names)
    failed = 0
    for name, err, passed in rows:
        status = "PASS" if passed else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
        failed += 0 if passed else 1
    print(f"{len(rows) - failed}/{len(rows)} checks passed (tolerance {gc.DEFAULT_TOL:g})")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_report(args):
    manifest, problems = manifest_mod.verify_run_manifest(args.manifest)
    print(f"command: {manifest['command']}")
    print(f"seed: {manifest['seed']}")
    print(f"config_hash: {manifest['config_hash']}")
    print(f"backend: {manifest['backend']}")
    print(f"wall_clock_seconds: {manifest['wall_clock_seconds']:.2f}")
    for name, entry in manifest["artifacts"].items():
        print(f"artifact {name}: {entry['path']} ({entry['bytes']} bytes)")
    if problems:
        for p in problems:
            print(f"INTEGRITY: {p}", file=sys.stderr)
        return EXIT_COMPAT
    print("all artifact hashes verified")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="capreg",
        description="capacity-regularized self-supervised training engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a model per a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", choices=["float32", "float64"], default=None)
    p.add_argument("--dataset", default=None, help="existing dataset manifest to reuse")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset manifest JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("dataset-gen", help="generate a labeled synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_dataset_gen)

    p = sub.add_parser("sweep", help="pretrain+probe over a hyper-parameter axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=["epsilon", "units", "heads"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--dataset", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference checks of the op registry")
    p.add_argument("--scope", default="all")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # test hook
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="verify and summarize a run manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"compatibility error: {exc}", file=sys.stderr)
        code = EXIT_COMPAT
    except ShapeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        code = EXIT_FAIL
    sys.exit(code)


if __name__ == "__main__":
    main()

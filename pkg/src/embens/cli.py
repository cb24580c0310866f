"""Command-line entry point: ``embens <command> [--config cfg.json] [flags]``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import experiments as ex
from .blob import save_params
from .datasets import DatasetError, DatasetSpec, gen_dataset
from .kernels import export_blob, export_csv, run_recursion
from .net import DivergenceError
from .numerics import NotPSDError, QuadratureError

log = logging.getLogger("embens")

DEFAULT_CONFIG = {
    "arch": {"input_dim": 2, "layers": [128, 128], "output_dim": 3, "activation": "relu",
             "parametrization": "ntk", "n_models": 4},
    "train": {"eta_w": 0.5, "gamma_mode": "m", "batch_size": 32, "epochs": 20,
              "loss_kind": "cross_entropy"},
    "dataset": {"kind": "blobs", "n_train": 256, "n_test": 256, "n_classes": 3, "dim": 2,
                "separation": 2.0},
    "n_seeds": 3,
}


class NumericalFailure(RuntimeError):
    pass


def load_config(args) -> ex.ExperimentConfig:
    d = json.loads(json.dumps(DEFAULT_CONFIG))
    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ex.ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(user, dict):
            raise ex.ConfigError("config root must be a JSON object")
        d.update(user)
    for flag, key in (("seed", "seed"), ("out", "out"), ("threads", "threads"),
                      ("quad_nodes", "quad_nodes")):
        val = getattr(args, flag)
        if val is not None:
            d[key] = val
    return ex.ExperimentConfig.from_dict(d)


def _write_reports(reports, out: Path, name: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    dg.reports_to_csv(reports, out / f"{name}.csv")
    dg.reports_to_json(reports, out / f"{name}.json")


def cmd_kernel(cfg, args) -> int:
    data = gen_dataset(replace(cfg.dataset, dim=cfg.arch.input_dim))
    X = data.X_train[:args.points]
    ks = run_recursion(cfg.arch, X, cfg.quad, v_coupling=args.v_coupling)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    export_csv(ks, out / "kernels.csv")
    export_blob(ks, out / "kernels.bin", {"arch": cfg.arch.to_dict(), "n_points": len(X)})
    print(f"wrote {len(ks)} layers of kernels for {len(X)} points to {out}")
    return 0


def cmd_train(cfg, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for s in range(cfg.n_seeds):
        rec, params, arch = ex.train_cell(cfg, {"M": cfg.arch.n_models}, cfg.arch, cfg.train, s)
        if rec.diverged:
            log.error("seed %d diverged", s)
        save_params(out / f"params_seed{s}.bin", params, arch, s)
        records.append(rec)
    ex.emit_report(records, out, name="train")
    if all(r.diverged for r in records):
        raise NumericalFailure("all training runs diverged")
    print(f"trained {len(records)} seeds; reports in {out}")
    return 0


def cmd_verify(cfg, args) -> int:
    reports = ex.run_verify(cfg, args.points)
    _write_reports(reports, Path(cfg.out), "verify")
    for r in reports:
        print(f"{r.name}: {r.value:.4g} pass={r.keys['pass']}")
    return 0


def _sweep(cfg, fn, name, metrics) -> int:
    records = fn(cfg)
    ex.emit_report(records, cfg.out, name=name, summary_metrics=metrics)
    n_div = sum(r.diverged for r in records)
    print(f"{len(records)} runs ({n_div} diverged); reports in {cfg.out}")
    return 0


def cmd_sweep_regime(cfg, args) -> int:
    by = ("p", "M")
    metrics = [(m, by) for m in ("ens_test_acc", "mean_train_acc", "mean_test_acc", "correlation")]
    return _sweep(cfg, ex.run_regime_sweep, "regime", metrics)


def cmd_sweep_width(cfg, args) -> int:
    by = ("width_factor", "M")
    metrics = [(m, by) for m in ("ens_test_acc", "mean_test_acc", "interaction_offdiag")]
    return _sweep(cfg, ex.run_width_sweep, "width", metrics)


def cmd_dynamics(cfg, args) -> int:
    reports = ex.run_dynamics_compare(cfg)
    _write_reports(reports, Path(cfg.out), "dynamics")
    for r in reports:
        print(f"{r.name}: {r.value:.4g}")
    return 0


def cmd_dataset(cfg, args) -> int:
    data = gen_dataset(cfg.dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, (X, y) in (("train", data.train), ("test", data.test)):
        with open(out / f"{split}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(X.shape[1])] + ["label"])
            for xi, yi in zip(X, np.asarray(y).reshape(len(X), -1)):
                w.writerow([repr(float(v)) for v in xi] +
                           [int(yi[0]) if data.n_classes else repr(float(yi[0]))])
    print(f"wrote {len(data.X_train)} train / {len(data.X_test)} test rows to {out}")
    return 0


COMMANDS = {
    "kernel": cmd_kernel, "train": cmd_train, "verify": cmd_verify,
    "sweep-regime": cmd_sweep_regime, "sweep-width": cmd_sweep_width,
    "dynamics": cmd_dynamics, "dataset": cmd_dataset,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--threads", type=int, help="worker processes for sweeps")
    common.add_argument("--quad-nodes", dest="quad_nodes", type=int,
                        help="quadrature nodes per dimension")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="embens", parents=[common],
                                description="Embedded ensembles: finite nets and kernel theory")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("kernel", "verify"):
            sp.add_argument("--points", type=int, default=4, help="number of input points")
        if name == "kernel":
            sp.add_argument("--v-coupling", choices=("factored", "joint"), default="factored")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        os.environ.setdefault("OMP_NUM_THREADS", "1")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (NotPSDError, QuadratureError, FloatingPointError, DivergenceError,
            NumericalFailure, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (ex.ConfigError, DatasetError, ValueError, KeyError, TypeError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Experiment configuration, sweep drivers and report emission.

Every sweep cell and seed is an independent task ``(config, cell, seed)``; tasks
run in a process pool when ``threads > 1`` and are merged in submission order,
so reports do not depend on scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .datasets import DatasetSpec, gen_dataset
from .dynamics import BlockKernel, mse_closed_form
from .kernels import assemble_ntk, run_recursion
from .net import forward_batch, init_params, loss_and_grads, sgd_step, train
from .numerics import QuadratureSpec, Seed, split_rng
from .specs import ArchSpec, LayerSpec, ModulationSpec, TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


SWEEP_AXES = ("p", "width_factor", "M", "gamma_mode", "lr")


@dataclass
class ExperimentConfig:
    arch: ArchSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    sweep: dict = field(default_factory=dict)
    n_seeds: int = 3
    out: str = "out"
    seed: int = 0
    threads: int = 1
    quad_nodes: int = 64
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = set(self.sweep) - set(SWEEP_AXES)
        if bad:
            raise ConfigError(f"unknown sweep axes {sorted(bad)}")
        for k, v in self.sweep.items():
            if not isinstance(v, (list, tuple)) or len(v) == 0:
                raise ConfigError(f"sweep axis {k!r} must be a nonempty list")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")

    def axis(self, name, default):
        return list(self.sweep.get(name, default))

    @property
    def quad(self) -> QuadratureSpec:
        return QuadratureSpec(nodes_per_dim=self.quad_nodes)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(), "train": self.train.to_dict(),
            "dataset": self.dataset.to_dict(), "sweep": {k: list(v) for k, v in self.sweep.items()},
            "n_seeds": self.n_seeds, "out": self.out, "seed": self.seed,
            "threads": self.threads, "quad_nodes": self.quad_nodes, "options": self.options,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"arch", "train", "dataset", "sweep", "n_seeds", "out", "seed", "threads",
                 "quad_nodes", "options"}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config fields {sorted(bad)}")
        if "arch" not in d:
            raise ConfigError("config needs an 'arch' section")
        try:
            return cls(
                arch=ArchSpec.from_dict(d["arch"]),
                train=TrainConfig.from_dict(d.get("train", {})),
                dataset=DatasetSpec.from_dict(d.get("dataset", {})),
                sweep=d.get("sweep", {}),
                n_seeds=d.get("n_seeds", 3), out=d.get("out", "out"), seed=d.get("seed", 0),
                threads=d.get("threads", 1), quad_nodes=d.get("quad_nodes", 64),
                options=d.get("options", {}),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"invalid config: {e}") from e

    def hash(self) -> str:
        d = self.to_dict()
        for k in ("out", "threads"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    keys: dict
    final: dict
    epochs: list = field(default_factory=list)
    diverged: bool = False
    wall_time: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


# ----------------------------------------------------------------------------
# helpers


def modulated_arch(arch: ArchSpec, p: float | None = None, m: int | None = None,
                   width_factor: float | None = None) -> ArchSpec:
    """Apply a shifted ``N(p, 1 - p^2)`` trainable pre/post modulation everywhere."""
    out = arch
    if width_factor is not None:
        out = out.scaled(width_factor)
    if p is not None:
        spec = ModulationSpec.shifted(p)
        out = replace(out, layers=tuple(LayerSpec(l.width, spec, spec) for l in out.layers))
    if m is not None:
        out = out.with_models(m)
    return out


def _pool_map(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks))


def _train_cell(task):
    return train_cell(*task)[0]


def train_cell(cfg, keys, arch, tcfg, seed):
    """Train one (cell, seed); returns ``(RunRecord, final params, arch)``."""
    t0 = time.perf_counter()
    data = gen_dataset(cfg.dataset)
    root = split_rng(Seed(cfg.seed), seed)
    arch = replace(arch, input_dim=data.X_train.shape[1])
    if data.n_classes is not None and arch.output_dim != data.n_classes:
        arch = replace(arch, output_dim=data.n_classes)
    params = init_params(arch, split_rng(root, 0))
    res = train(params, arch, data.train, tcfg, split_rng(root, 1), eval_data=data.test)
    epochs = [{k: _jsonable(v) for k, v in h.items()} for h in res.history]
    final = {}
    if not res.diverged:
        last = res.history[-1]
        final["mean_train_loss"] = float(np.mean(last["loss"]))
        final["mean_test_loss"] = float(np.mean(last["test_loss"]))
        if tcfg.loss_kind == "cross_entropy":
            final["mean_train_acc"] = float(np.mean(last["acc"]))
            final["mean_test_acc"] = float(np.mean(last["test_acc"]))
            final["ens_train_acc"] = last["ens_acc"]
            final["ens_test_acc"] = last["test_ens_acc"]
            if arch.n_models > 1:
                out = forward_batch(res.params, arch, data.X_test)
                bc = dg.binarized_correlation(out, data.y_test)
                final["correlation"] = bc["mean"]
                final["corr_skipped"] = bc["n_skipped"]
    rec = RunRecord(cfg.hash(), seed, keys, _jsonable(final), epochs, res.diverged,
                    time.perf_counter() - t0)
    return rec, res.params, arch


def _cell_tasks(cfg: ExperimentConfig, cells):
    tasks = []
    for keys, arch, tcfg in cells:
        for s in range(cfg.n_seeds):
            tasks.append((cfg, keys, arch, tcfg, s))
    return tasks


def _gamma_lr_cells(cfg: ExperimentConfig):
    for g in cfg.axis("gamma_mode", [cfg.train.gamma_mode]):
        for lr in cfg.axis("lr", [cfg.train.eta_w]):
            yield g, lr, replace(cfg.train, gamma_mode=g, eta_w=lr)


def run_regime_sweep(cfg: ExperimentConfig) -> list[RunRecord]:
    """Train over the ``p x M`` grid with shifted modulations on every hidden layer."""
    cells = []
    for p in cfg.axis("p", [0.0, 0.3, 0.6, 0.9]):
        for m in cfg.axis("M", [1, 2, 4, 8, 16]):
            for g, lr, tcfg in _gamma_lr_cells(cfg):
                keys = {"p": p, "M": m, "gamma_mode": g, "lr": lr}
                cells.append((keys, modulated_arch(cfg.arch, p=p, m=m), tcfg))
    return _pool_map(_train_cell, _cell_tasks(cfg, cells), cfg.threads)


def _init_interaction(task):
    cfg, keys, arch, seed = task
    data = gen_dataset(cfg.dataset)
    arch = replace(arch, input_dim=data.X_train.shape[1])
    n = int(cfg.options.get("metric_points", 8))
    X = data.X_train[:n]
    p = init_params(arch, split_rng(split_rng(Seed(cfg.seed), seed), 0))
    k = dg.empirical_ntk(p, arch, X, "m").values
    return dg.interaction_metrics(k, 1, Seed(seed))["offdiag_ratio"]


def run_width_sweep(cfg: ExperimentConfig) -> list[RunRecord]:
    """Train over ``width_factor x M``; M > 1 cells also record interaction metric (i) at init."""
    cells = []
    for wf in cfg.axis("width_factor", [0.5, 1, 2, 4]):
        for m in cfg.axis("M", [1, 2, 4, 8]):
            for g, lr, tcfg in _gamma_lr_cells(cfg):
                arch = modulated_arch(cfg.arch, m=m, width_factor=wf)
                if "p" in cfg.sweep:
                    arch = modulated_arch(arch, p=cfg.sweep["p"][0])
                cells.append(({"width_factor": wf, "M": m, "gamma_mode": g, "lr": lr}, arch, tcfg))
    records = _pool_map(_train_cell, _cell_tasks(cfg, cells), cfg.threads)
    itasks = [(cfg, r.keys, cells[i // cfg.n_seeds][1], r.seed) for i, r in enumerate(records)
              if r.keys["M"] > 1]
    vals = iter(_pool_map(_init_interaction, itasks, cfg.threads))
    for r in records:
        if r.keys["M"] > 1:
            r.final["interaction_offdiag"] = float(next(vals))
    return records


def summarize(records: list[RunRecord], metric: str, by: tuple[str, ...]) -> list[dg.MetricReport]:
    """Seed-averaged metric with standard error per key combination; diverged runs excluded."""
    groups: dict = {}
    for r in records:
        if r.diverged or r.final.get(metric) is None:
            continue
        groups.setdefault(tuple(r.keys[k] for k in by), []).append(r.final[metric])
    return [dg.averaged(metric, v, **dict(zip(by, k))) for k, v in groups.items()]


# ----------------------------------------------------------------------------
# theory vs empirics


def run_verify(cfg: ExperimentConfig, n_points: int | None = None) -> list[dg.MetricReport]:
    """Compare recursion kernels with finite-width Monte-Carlo estimates on the same inputs."""
    arch = cfg.arch
    n = n_points or int(cfg.options.get("verify_points", 4))
    data = gen_dataset(replace(cfg.dataset, dim=arch.input_dim))
    X = data.X_train[:n]
    ks = run_recursion(arch, X, cfg.quad)[-1]
    reports = []
    n_seeds = int(cfg.options.get("verify_seeds", 100))
    cov = dg.empirical_covariance(arch, X, n_seeds, Seed(cfg.seed))
    nt = [dg.empirical_ntk(init_params(arch, split_rng(Seed(cfg.seed + 1), s)), arch, X, "one")
          for s in range(n_seeds)]
    com = np.array([k.com for k in nt])
    ind = np.array([k.ind for k in nt])
    m = arch.n_models
    th_same_emp = com[:, 0, 0] + ind[:, 0, 0]
    entries = [("sigma", "same", cov["same"], cov["same_se"], ks.sigma_same)]
    mean, se = dg._mean_se(th_same_emp)
    entries.append(("theta", "same", mean, se, ks.theta_com_same + ks.theta_ind_same))
    if m > 1:
        entries.append(("sigma", "diff", cov["diff"], cov["diff_se"], ks.sigma_diff))
        mean, se = dg._mean_se(com[:, 0, 1])
        entries.append(("theta", "diff", mean, se, ks.theta_com_diff))
    for kind, channel, emp, se, th in entries:
        scale = np.abs(th).max()
        zero = scale <= 1e-10
        if zero:
            z = np.abs(emp) / np.where(se > 0, se, np.inf)
            ok = bool(np.all(np.abs(emp) < 3 * se + 1e-12))
            reports.append(dg.MetricReport(f"{kind}_{channel}_max_z", float(z.max()), None,
                                           {"pass": ok, "theory_zero": True}))
        else:
            rel = float(np.abs(emp - th).max() / scale)
            z = np.abs(emp - th) / np.where(se > 0, se, np.inf)
            ok = bool(rel <= float(cfg.options.get("verify_rtol", 0.1)) or np.all(z < 3))
            reports.append(dg.MetricReport(f"{kind}_{channel}_max_rel_err", rel, None,
                                           {"pass": ok, "theory_zero": False}))
    return reports


def dynamics_compare(arch: ArchSpec, X, y, lr: float, steps: int, seed: Seed,
                     gamma_mode="m", q: QuadratureSpec = QuadratureSpec(),
                     stop_at_half: bool = True) -> dict:
    """Full-batch GD on a finite net vs the kernel prediction from the same initial outputs.

    Time matches as ``t = step * lr``. Returns per-step relative deviation
    ``|f_net - f_ker| / |f_ker|`` on the train points and the train MSE.
    """
    m = arch.n_models
    tcfg = TrainConfig(eta_w=lr, gamma_mode=gamma_mode, batch_size=len(X), loss_kind="mse")
    params = init_params(arch, seed)
    f0 = forward_batch(params, arch, X)
    k = run_recursion(arch, X, q)[-1]
    K = BlockKernel(assemble_ntk(k, m, gamma_mode), n_models=m)
    dev, mse, ts = [], [], []
    yv = np.asarray(y, dtype=float).reshape(len(X), -1)
    mse0 = None
    for s in range(steps + 1):
        f = forward_batch(params, arch, X)
        cur = float(np.mean(0.5 * np.sum((f - yv[None]) ** 2, axis=-1)))
        mse0 = cur if mse0 is None else mse0
        fk = mse_closed_form(K, f0, yv, s * lr)
        dev.append(float(np.linalg.norm(f - fk) / np.linalg.norm(fk)))
        mse.append(cur)
        ts.append(s * lr)
        if stop_at_half and cur <= 0.5 * mse0:
            break
        if s < steps:
            _, g = loss_and_grads(params, arch, (X, yv), "mse")
            params = sgd_step(params, g, tcfg)
    return {"t": np.array(ts), "deviation": np.array(dev), "mse": np.array(mse),
            "halved": mse[-1] <= 0.5 * mse0}


def kernel_m_invariance(arch: ArchSpec, X, y, ms=(1, 4, 16), t: float = 1.0,
                        seed: Seed = Seed(0), q: QuadratureSpec = QuadratureSpec()) -> dict:
    """Per-model kernel trajectories under ``gamma_mode='m'`` for several ensemble sizes.

    All ensembles use the same per-model initial outputs (model ``a`` of the
    size-``M`` ensemble starts from draw ``a``). Returns the max deviation of
    each model's trajectory from the ``M=1`` one.
    """
    k = run_recursion(arch, X, q)[-1]
    n = len(X)
    g0 = seed.rng().standard_normal((max(ms), n, 1))
    yv = np.asarray(y, dtype=float).reshape(n, 1)
    single = BlockKernel(assemble_ntk(k, 1, "m"))
    worst = 0.0
    for m in ms:
        K = BlockKernel(assemble_ntk(k, m, "m"), n_models=m)
        ft = mse_closed_form(K, g0[:m], yv, t)
        for a in range(m):
            ref = mse_closed_form(single, g0[a:a + 1], yv, t)
            worst = max(worst, float(np.abs(ft[a] - ref[0]).max()))
    return {"max_abs_dev": worst, "ms": list(ms)}


def run_dynamics_compare(cfg: ExperimentConfig) -> list[dg.MetricReport]:
    arch = cfg.arch
    opts = cfg.options
    n = int(opts.get("n_points", 16))
    teacher = {**(cfg.dataset.teacher or {}), "output_dim": arch.output_dim}
    data = gen_dataset(replace(cfg.dataset, kind="teacher", dim=arch.input_dim, n_train=n,
                               teacher=teacher))
    X, y = data.X_train, np.asarray(data.y_train).reshape(n, -1)
    out = dynamics_compare(arch, X, y, cfg.train.eta_w, int(opts.get("steps", 2000)),
                           Seed(cfg.seed), cfg.train.gamma_mode, cfg.quad)
    reports = [dg.MetricReport("max_deviation_until_half", float(out["deviation"].max()), None,
                               {"halved": bool(out["halved"]), "steps": len(out["t"]) - 1})]
    last = arch.layers[-1]
    if last.post.kind == "gaussian" and last.post.mean == 0.0:
        inv = kernel_m_invariance(arch, X, y, seed=Seed(cfg.seed))
        reports.append(dg.MetricReport("kernel_m_invariance_max_dev", inv["max_abs_dev"], None,
                                       {"ms": "1,4,16"}))
    return reports


# ----------------------------------------------------------------------------
# reports


BASE_COLUMNS = ["config_hash", "seed", "diverged"]


def _columns(records: list[RunRecord]) -> list[str]:
    keys = sorted({k for r in records for k in r.keys})
    finals = sorted({k for r in records for k in r.final})
    return BASE_COLUMNS + keys + finals + ["wall_time"]


def emit_report(records: list[RunRecord], out_dir, formats=("csv", "json"),
                name: str = "runs", summary_metrics=()) -> list[Path]:
    """Write run records as CSV/JSON with a stable column order.

    ``summary_metrics`` is a list of ``(metric, by_keys)`` pairs; each produces a
    seed-averaged CSV suitable for plotting metric against the last key.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if "csv" in formats:
        cols = _columns(records)
        path = out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in records:
                row = {"config_hash": r.config_hash, "seed": r.seed, "diverged": r.diverged,
                       "wall_time": r.wall_time, **r.keys, **r.final}
                w.writerow(["" if row.get(c) is None else row.get(c) for c in cols])
        paths.append(path)
    if "json" in formats:
        path = out / f"{name}.json"
        with open(path, "w") as fh:
            json.dump([_jsonable(asdict(r)) for r in records], fh, indent=1, sort_keys=True)
        paths.append(path)
    for metric, by in summary_metrics:
        reps = summarize(records, metric, tuple(by))
        path = out / f"{name}_{metric}_by_{'_'.join(by)}.csv"
        dg.reports_to_csv(reps, path)
        paths.append(path)
    return paths


def load_records(path) -> list[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_dict(d) for d in json.load(fh)]

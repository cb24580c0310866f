"""Finite-width measurements: empirical kernels, gradient statistics, correlations,
reduced NTKs, interaction metrics, per-model update contributions and NTK drift.

Empirical NTKs are built from per-sample backprop factors rather than explicit
parameter gradients: for a dense layer ``df/dW = h^T g``, so

    <df_a(x)/dW, df_b(x')/dW> = (h_a(x) . h_b(x')) * (g_a(x) . g_b(x')).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .net import (EnsembleParams, _targets, backward_per_sample, forward_batch, forward_cache,
                  init_params, loss_and_grads, pointwise_loss)
from .numerics import Seed, split_rng
from .specs import ArchSpec, TrainConfig, gamma_value


@dataclass
class EmpiricalKernel:
    """``values[alpha, beta, i, j]``; ``com``/``ind`` hold the unweighted parts."""

    values: np.ndarray
    com: np.ndarray
    ind: np.ndarray
    gamma_mode: object = "m"
    meta: dict = field(default_factory=dict)

    def flat(self) -> np.ndarray:
        """``(M n, M n)`` matrix, model-major."""
        m, _, n, _ = self.values.shape
        return self.values.transpose(0, 2, 1, 3).reshape(m * n, m * n)


def _trainable_slots(arch: ArchSpec) -> list[tuple[str, int | None]]:
    slots = []
    for k, layer in enumerate(arch.layers):
        if layer.post.trainable:
            slots.append(("gu", k))
        if layer.pre.trainable:
            slots.append(("gv", k))
    if arch.input_mod is not None and arch.input_mod.trainable:
        slots.append(("gu_in", None))
    if arch.output_mod is not None and arch.output_mod.trainable:
        slots.append(("gv_out", None))
    return slots


def _output_factors(params, arch, X, channel: int):
    cache = forward_cache(params, arch, X)
    g = np.zeros_like(cache["out"])
    g[..., channel] = 1.0
    return cache, backward_per_sample(params, arch, cache, g)


def _gram(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(M, n, N) x (M, n', N) -> (M, M, n, n')`` inner products."""
    return np.einsum("aik,bjk->abij", a, b)


def _ntk_parts(cache_a, back_a, cache_b, back_b, arch):
    com = 0.0
    for l in range(arch.depth + 1):
        com = com + _gram(cache_a["h"][l], cache_b["h"][l]) * _gram(back_a["gz"][l], back_b["gz"][l])
    m = back_a["gz"][0].shape[0]
    ind = np.zeros_like(com)
    for name, k in _trainable_slots(arch):
        ga = back_a[name] if k is None else back_a[name][k]
        gb = back_b[name] if k is None else back_b[name][k]
        same = np.einsum("aik,ajk->aij", ga, gb)
        ind[np.arange(m), np.arange(m)] += same
    return com, ind


def empirical_ntk(params: EnsembleParams, arch: ArchSpec, X, gamma_mode="m",
                  channel: int = 0) -> EmpiricalKernel:
    """``(gamma/M) <df_a/dw, df_b/dw> + delta_ab <df_a/du_a, df_a/du_a>`` on one output channel."""
    cache, back = _output_factors(params, arch, X, channel)
    com, ind = _ntk_parts(cache, back, cache, back, arch)
    m = params.n_models
    vals = gamma_value(gamma_mode, m) / m * com + ind
    return EmpiricalKernel(vals, com, ind, gamma_mode, {"channel": channel})


def class_ntk(params: EnsembleParams, arch: ArchSpec, X, gamma_mode="m") -> np.ndarray:
    """Class-indexed NTK ``(M, M, C, C, n, n)``; intended for small ``M``, ``C``, ``n``."""
    C = arch.output_dim
    facs = [_output_factors(params, arch, X, c) for c in range(C)]
    m = params.n_models
    n = len(np.atleast_2d(X))
    out = np.zeros((m, m, C, C, n, n))
    coef = gamma_value(gamma_mode, m) / m
    for i in range(C):
        for j in range(C):
            com, ind = _ntk_parts(*facs[i], *facs[j], arch)
            out[:, :, i, j] = coef * com + ind
    return out


def _mean_se(samples: np.ndarray):
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full_like(mean, np.nan)
    return mean, se


def empirical_covariance(arch: ArchSpec, X, n_seeds: int, seed: Seed = Seed(0),
                         channel: int = 0) -> dict:
    """Monte-Carlo ``E[f_a(x) f_b(x')]`` over fresh inits, averaged within same/diff pairs.

    Returns ``same``/``diff`` means and standard errors (``n x n``); ``diff``
    is ``None`` for a single model.
    """
    if n_seeds < 2:
        raise ValueError("n_seeds must be >= 2")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m = arch.n_models
    same, diff = [], []
    for s in range(n_seeds):
        p = init_params(arch, split_rng(seed, s))
        f = forward_batch(p, arch, X)[..., channel]
        prod = np.einsum("ai,bj->abij", f, f)
        same.append(np.einsum("aaij->ij", prod) / m)
        if m > 1:
            diff.append((prod.sum(axis=(0, 1)) - m * same[-1]) / (m * (m - 1)))
    s_mean, s_se = _mean_se(np.array(same))
    out = {"same": s_mean, "same_se": s_se, "diff": None, "diff_se": None, "n_seeds": n_seeds}
    if m > 1:
        out["diff"], out["diff_se"] = _mean_se(np.array(diff))
    return out


def grad_cosine(params: EnsembleParams, arch: ArchSpec, batch, loss_kind: str = "cross_entropy",
                grads_override: np.ndarray | None = None) -> dict:
    """Mean/std of ``|<g_a, g_b>| / (|g_a| |g_b|)`` over pairs ``a < b`` of shared-weight gradients.

    Pairs with a zero-norm gradient are skipped and counted.
    """
    if grads_override is not None:
        G = np.asarray(grads_override, dtype=float)
    else:
        _, g = loss_and_grads(params, arch, batch, loss_kind)
        G = np.concatenate([w.reshape(w.shape[0], -1) for w in g.W], axis=1)
    m = G.shape[0]
    if m < 2:
        raise ValueError("grad_cosine needs at least two models")
    norms = np.linalg.norm(G, axis=1)
    vals, skipped = [], 0
    for a in range(m):
        for b in range(a + 1, m):
            if norms[a] == 0 or norms[b] == 0:
                skipped += 1
                continue
            vals.append(abs(G[a] @ G[b]) / (norms[a] * norms[b]))
    vals = np.array(vals)
    return {"mean": float(vals.mean()) if vals.size else float("nan"),
            "std": float(vals.std()) if vals.size else float("nan"),
            "n_pairs": int(vals.size), "n_skipped": skipped}


def grad_norm_hist(param_list, arch: ArchSpec, batch, bins: int = 20,
                   loss_kind: str = "cross_entropy") -> dict:
    """Histogram of ``|dL_a/dW_l|`` over layers, models and the given parameter draws.

    Exact zeros are counted separately (``zero_count``) since log bins cannot hold them.
    ``spread`` is the mean over layers and draws of max/min norm across models.
    """
    if isinstance(param_list, EnsembleParams):
        param_list = [param_list]
    norms, spreads = [], []
    for p in param_list:
        _, g = loss_and_grads(p, arch, batch, loss_kind)
        for w in g.W:
            nl = np.linalg.norm(w.reshape(w.shape[0], -1), axis=1)
            norms.append(nl)
            if nl.min() > 0:
                spreads.append(nl.max() / nl.min())
    norms = np.concatenate(norms)
    pos = norms[norms > 0]
    if pos.size:
        lo, hi = np.log10(pos.min()), np.log10(pos.max())
        edges = np.logspace(lo, hi if hi > lo else lo + 1e-9, bins + 1)
        counts, _ = np.histogram(pos, bins=edges)
    else:
        edges, counts = np.array([]), np.zeros(0, dtype=int)
    return {"edges": edges, "counts": counts, "zero_count": int((norms == 0).sum()),
            "n_samples": int(norms.size),
            "spread": float(np.mean(spreads)) if spreads else float("nan")}


def binarized_correlation(predictions, labels) -> dict:
    """Mean pairwise Pearson correlation of correct/incorrect indicators.

    ``predictions`` is ``(M, n, C)`` scores or ``(M, n)`` predicted labels.
    Pairs where either indicator is constant are skipped and counted.
    """
    P = np.asarray(predictions)
    pred = P.argmax(axis=-1) if P.ndim == 3 else P
    ind = (pred == np.asarray(labels)[None, :]).astype(float)
    m, n = ind.shape
    if m < 2 or n < 2:
        raise ValueError("need at least two models and two points")
    vals, skipped = [], 0
    for a in range(m):
        for b in range(a + 1, m):
            if ind[a].std() == 0 or ind[b].std() == 0:
                skipped += 1
                continue
            vals.append(np.corrcoef(ind[a], ind[b])[0, 1])
    return {"mean": float(np.mean(vals)) if vals else float("nan"),
            "n_pairs": len(vals), "n_skipped": skipped}


def ntk_reduce_nll(full: np.ndarray, probs: np.ndarray, targets) -> np.ndarray:
    """Contract a class NTK ``(M, M, C, C, n, n)`` with CE derivatives ``p - onehot``.

    ``probs`` is ``(M, n, C)``; result ``(M, M, n, n)``.
    """
    probs = np.asarray(probs, dtype=float)
    t = np.asarray(targets, dtype=int)
    d = probs.copy()
    d[:, np.arange(len(t)), t] -= 1.0
    return np.einsum("aki,abijkl,blj->abkl", d, full, d)


def ntk_reduce_target(full: np.ndarray, targets) -> np.ndarray:
    """Select ``Theta[a, b, c_i, c_j, i, j]`` for each point pair."""
    t = np.asarray(targets, dtype=int)
    n = len(t)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return full[:, :, t[i], t[j], i, j]


def interaction_subsets(m_models: int, m: int, seed: Seed = Seed(0)) -> list[np.ndarray]:
    """For each model, ``m`` other models: the first ``m`` of a seeded shuffle, skipping itself."""
    if not 1 <= m < m_models:
        raise ValueError("need 1 <= m < M")
    perm = seed.rng().permutation(m_models)
    return [np.array([b for b in perm if b != a][:m]) for a in range(m_models)]


def interaction_metrics(reduced: np.ndarray, m: int, seed: Seed = Seed(0)) -> dict:
    """Cross-model interaction statistics of a reduced kernel ``(M, M, n, n)``.

    ``offdiag_ratio``: mean squared off-diagonal-model entry over mean squared
    diagonal-model entry. ``subset_ratio``: squared batch-averaged contribution of
    ``m`` other models to a model's loss derivative, relative to its own.
    """
    K = np.asarray(reduced, dtype=float)
    M = K.shape[0]
    diag = np.arange(M)
    sq = K * K
    den1 = sq[diag, diag].mean()
    off = (sq.sum(axis=(0, 1)) - sq[diag, diag].sum(axis=0)).sum() / (M * (M - 1) * sq[0, 0].size)
    if den1 == 0:
        raise ZeroDivisionError("diagonal blocks are zero")
    row = K.mean(axis=3)  # (M, M, n): batch average over b
    subsets = interaction_subsets(M, m, seed)
    num = sum(np.sum(row[a, s].sum(axis=0) ** 2) for a, s in enumerate(subsets))
    den2 = np.sum(row[diag, diag] ** 2)
    if den2 == 0:
        raise ZeroDivisionError("diagonal contributions are zero")
    return {"offdiag_ratio": float(off / den1), "subset_ratio": float(num / den2), "m": m}


def contribution_decomposition(params: EnsembleParams, arch: ArchSpec, batch, cfg: TrainConfig,
                               X=None) -> np.ndarray:
    """First-order output change of model ``a`` caused by model ``b``'s loss, ``(M, M, n, C)``.

    ``D[a, b] = -eta_w (gamma/M) <df_a/dw, dL_b/dw> - delta_ab eta_u <df_a/du_a, dL_a/du_a>``.
    """
    Xb, y = batch
    Xb = np.atleast_2d(np.asarray(Xb, dtype=float))
    X = Xb if X is None else np.atleast_2d(np.asarray(X, dtype=float))
    cache_b = forward_cache(params, arch, Xb)
    _, d = pointwise_loss(cache_b["out"], _targets(arch, y, cfg.loss_kind, len(Xb)), cfg.loss_kind)
    back_b = backward_per_sample(params, arch, cache_b, d / len(Xb))
    m = params.n_models
    coef = gamma_value(cfg.gamma_mode, m) / m
    out = np.zeros((m, m, len(X), arch.output_dim))
    for c in range(arch.output_dim):
        cache_a, back_a = _output_factors(params, arch, X, c)
        com, ind = _ntk_parts(cache_a, back_a, cache_b, back_b, arch)
        out[..., c] = -(cfg.eta_w * coef * com + cfg.lr_u * ind).sum(axis=3)
    return out


def ntk_drift(params_t: EnsembleParams, params_0: EnsembleParams, arch: ArchSpec, X,
              gamma_mode="m") -> float:
    """``|Theta(t) - Theta(0)|_F / |Theta(0)|_F`` of the empirical ensemble NTK."""
    k0 = empirical_ntk(params_0, arch, X, gamma_mode).values
    kt = empirical_ntk(params_t, arch, X, gamma_mode).values
    return float(np.linalg.norm(kt - k0) / np.linalg.norm(k0))


@dataclass
class MetricReport:
    name: str
    value: float
    stderr: float | None = None
    keys: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"name": self.name, **self.keys, "value": self.value, "stderr": self.stderr}


def averaged(name: str, samples, **keys) -> MetricReport:
    s = np.asarray(samples, dtype=float)
    s = s[np.isfinite(s)]
    se = float(s.std(ddof=1) / np.sqrt(s.size)) if s.size > 1 else float("nan")
    return MetricReport(name, float(s.mean()) if s.size else float("nan"), se, dict(keys))


def reports_to_csv(reports: list[MetricReport], path) -> None:
    keys = sorted({k for r in reports for k in r.keys})
    cols = ["name", *keys, "value", "stderr"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def reports_to_json(reports: list[MetricReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([asdict(r) for r in reports], fh, indent=2, sort_keys=True)

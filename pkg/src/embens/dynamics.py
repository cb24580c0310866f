"""Linearised (kernel-regime) output dynamics of an ensemble.

Outputs are stored as ``(M, n, C)`` arrays and flattened model-major
(row ``alpha * n + i``) to match :func:`embens.kernels.assemble_ntk`. Every
class channel evolves with the same kernel. Time ``t`` is continuous
gradient-flow time; a finite net trained for ``s`` steps at learning rate
``eta`` corresponds to ``t = s * eta``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import NotPSDError, Seed


@dataclass(frozen=True)
class BlockKernel:
    """Train-train and (optional) test-train blocks of an assembled ensemble NTK."""

    train: np.ndarray
    test_train: np.ndarray | None = None
    n_models: int = 1

    def __post_init__(self):
        K = np.asarray(self.train, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("train block must be square")
        if not np.allclose(K, K.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(K).max())):
            raise ValueError("train block must be symmetric")
        if K.shape[0] % self.n_models:
            raise ValueError("train block size must be a multiple of n_models")

    @property
    def n_train(self) -> int:
        return self.train.shape[0] // self.n_models

    @classmethod
    def from_full(cls, full: np.ndarray, m: int, n_train: int) -> "BlockKernel":
        """Split a kernel over ``n_train + n_test`` points (model-major) into blocks."""
        n = full.shape[0] // m
        idx_tr = np.concatenate([a * n + np.arange(n_train) for a in range(m)])
        idx_te = np.concatenate([a * n + np.arange(n_train, n) for a in range(m)])
        te = full[np.ix_(idx_te, idx_tr)] if n > n_train else None
        return cls(full[np.ix_(idx_tr, idx_tr)], te, m)


@dataclass
class KernelDynamicsState:
    f: np.ndarray
    targets: np.ndarray
    t: float
    loss_kind: str


def _flat(f: np.ndarray) -> np.ndarray:
    """``(M, n, C)`` -> ``(M*n, C)``."""
    m, n, c = f.shape
    return f.reshape(m * n, c)


def _unflat(F: np.ndarray, m: int) -> np.ndarray:
    return F.reshape(m, F.shape[0] // m, F.shape[1])


def _as_3d(f, m: int | None = None) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f[None, :, None]
    elif f.ndim == 2:
        f = f[:, :, None]
    return f


def gp_sample_outputs(cov: np.ndarray, m: int, n_points: int, c: int, seed: Seed) -> np.ndarray:
    """Draw initial outputs ``(M, n, C)`` from ``N(0, cov)`` independently per class."""
    cov = np.asarray(cov, dtype=float)
    dim = m * n_points
    if cov.shape != (dim, dim):
        raise ValueError(f"covariance must be {dim}x{dim}")
    if not np.any(cov):
        return np.zeros((m, n_points, c))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(cov) / dim
        try:
            L = np.linalg.cholesky(cov + jitter * np.eye(dim))
        except np.linalg.LinAlgError as e:
            raise NotPSDError("covariance not PSD after jitter") from e
    z = seed.rng().standard_normal((dim, c))
    return _unflat(L @ z, m)


def _eig(K: np.ndarray):
    lam, Q = np.linalg.eigh((K + K.T) / 2)
    return np.maximum(lam, 0.0), Q


def mse_closed_form(k: BlockKernel, f0_train, y, t: float, batch_size: int | None = None):
    """Train outputs at time ``t``: ``f_t - y = exp(-Theta t / B) (f_0 - y)``."""
    f0 = _as_3d(f0_train)
    m = f0.shape[0]
    B = batch_size or f0.shape[1]
    yt = _broadcast_targets(y, f0.shape)
    lam, Q = _eig(k.train)
    d0 = _flat(f0 - yt)
    dt = Q @ (np.exp(-lam * t / B)[:, None] * (Q.T @ d0))
    return yt + _unflat(dt, m)


def mse_test_prediction(k: BlockKernel, f0_train, f0_test, y, t: float,
                        batch_size: int | None = None):
    """Test outputs at ``t``: ``f_0(x) - K_x K^+ (I - exp(-K t / B)) (f_0 - y)``."""
    if k.test_train is None:
        raise ValueError("kernel has no test block")
    f0 = _as_3d(f0_train)
    g0 = _as_3d(f0_test)
    m = f0.shape[0]
    B = batch_size or f0.shape[1]
    yt = _broadcast_targets(y, f0.shape)
    lam, Q = _eig(k.train)
    cutoff = 1e-10 * (lam.max() if lam.size else 0.0)
    inv = np.where(lam > cutoff, 1.0 / np.where(lam > cutoff, lam, 1.0), 0.0)
    coeff = inv * (1.0 - np.exp(-lam * t / B))
    d0 = _flat(f0 - yt)
    delta = k.test_train @ (Q @ (coeff[:, None] * (Q.T @ d0)))
    return g0 - _unflat(delta, m)


def _broadcast_targets(y, shape) -> np.ndarray:
    """Regression targets ``(n,)``/``(n, C)`` shared by all models -> ``(M, n, C)``."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim == 2:
        y = np.broadcast_to(y[None], shape)
    return np.asarray(y, dtype=float)


def loss_grad(F: np.ndarray, y, loss_kind: str):
    """Per-point loss and ``dL/df`` for flattened outputs ``(M, n, C)``."""
    if loss_kind == "mse":
        r = F - _broadcast_targets(y, F.shape)
        return 0.5 * np.sum(r * r, axis=-1), r
    if loss_kind == "cross_entropy":
        yi = np.asarray(y, dtype=int)
        mx = F.max(axis=-1, keepdims=True)
        logp = F - mx - np.log(np.exp(F - mx).sum(axis=-1, keepdims=True))
        p = np.exp(logp)
        onehot = np.zeros_like(F)
        np.put_along_axis(onehot, np.broadcast_to(yi[None, :, None], F.shape[:2] + (1,)), 1.0,
                          axis=-1)
        return -np.sum(onehot * logp, axis=-1), p - onehot
    raise ValueError(f"unknown loss_kind {loss_kind!r}")


def ode_integrate(k: BlockKernel, f0_train, y, loss_kind: str, t_end: float, dt: float,
                  record_times=None, f0_test=None, batch_size: int | None = None):
    """RK4 on ``df/dt = -(1/B) Theta dL/df`` for train (and test) outputs.

    Returns ``(times, train_traj, test_traj)`` with trajectories of shape
    ``(len(times), M, n, C)``; ``test_traj`` is ``None`` without a test block.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = _as_3d(f0_train).copy()
    m, n, _ = f.shape
    B = batch_size or n
    g = None
    if f0_test is not None:
        if k.test_train is None:
            raise ValueError("kernel has no test block")
        g = _as_3d(f0_test).copy()
    K = k.train
    Kx = k.test_train

    def rhs(fc):
        _, d = loss_grad(fc, y, loss_kind)
        D = _flat(d)
        return _unflat(-(K @ D) / B, m), (None if g is None else -(Kx @ D) / B)

    times = np.asarray(record_times if record_times is not None else [t_end], dtype=float)
    out_tr, out_te = [], []
    t = 0.0
    n_steps = int(np.ceil(t_end / dt - 1e-12)) if t_end > 0 else 0
    step_h = t_end / n_steps if n_steps else 0.0
    ti = 0

    def record():
        out_tr.append(f.copy())
        if g is not None:
            out_te.append(g.copy())

    while ti < len(times) and times[ti] <= 1e-15:
        record()
        ti += 1
    for s in range(n_steps):
        k1, q1 = rhs(f)
        k2, q2 = rhs(f + 0.5 * step_h * k1)
        k3, q3 = rhs(f + 0.5 * step_h * k2)
        k4, q4 = rhs(f + step_h * k3)
        f = f + step_h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if g is not None:
            g = g + _unflat(step_h / 6.0 * (q1 + 2 * q2 + 2 * q3 + q4), m)
        if not np.all(np.isfinite(f)):
            raise FloatingPointError(f"non-finite state at t={t:.6g}")
        t = (s + 1) * step_h
        while ti < len(times) and times[ti] <= t + 1e-12 * max(1.0, t):
            record()
            ti += 1
    while ti < len(times):
        record()
        ti += 1
    return times, np.array(out_tr), (np.array(out_te) if g is not None else None)


def export_trajectory_csv(path, times, traj) -> None:
    """Write ``(t, model, point, class, value)`` rows for a ``(T, M, n, C)`` trajectory."""
    traj = np.asarray(traj)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "model", "point", "class", "value"])
        for ti, t in enumerate(times):
            for idx in np.ndindex(traj.shape[1:]):
                w.writerow([repr(float(t)), *idx, repr(float(traj[(ti,) + idx]))])

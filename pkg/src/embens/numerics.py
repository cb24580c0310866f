"""Random streams, 2x2 Gaussian algebra and bivariate Gaussian quadrature.

All Gaussian expectations in the package go through :func:`bivariate_rule`.
Three methods are available:

``polar`` (default)
    Whiten with the Cholesky factor and integrate in polar coordinates: a
    Gauss rule for the Rayleigh radial density times piecewise Gauss-Legendre
    in the angle, with breaks on the lines ``z1 = 0`` and ``z2 = 0``. Every
    activation here is smooth away from zero, so integrands are smooth on each
    angular piece, and ReLU-type integrands are exactly polynomial in ``r``.
``split``
    Conditional tensor rule with Gauss-Legendre on each side of zero over
    ``mu +- 10 sigma``.
``hermite``
    Conditional tensor probabilists' Gauss-Hermite. Exact for polynomials of
    degree ``< 2 n`` in each whitened variable, but slow across kinks.

1D Gaussian expectations (:func:`normal_rule`) under ``polar`` use Gauss
rules for the two halves of the density on either side of zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

_TRUNC = 10.0


class QuadratureError(ArithmeticError):
    """Raised when an integrand produces non-finite values."""


class NotPSDError(ValueError):
    """Raised when a covariance (2x2 or block) is not positive semi-definite."""


@dataclass(frozen=True)
class Seed:
    root: int
    stream: int = 0

    def rng(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.root, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))


def split_rng(seed: Seed, child_id: int) -> Seed:
    """Deterministic child stream; distinct ids give independent streams."""
    ss = np.random.SeedSequence(entropy=seed.root, spawn_key=(seed.stream, int(child_id)))
    stream = int(ss.generate_state(1, np.uint64)[0])
    return Seed(seed.root, stream)


@dataclass(frozen=True)
class Cov2:
    s11: float
    s12: float
    s22: float

    def as_array(self) -> np.ndarray:
        return np.array([[self.s11, self.s12], [self.s12, self.s22]])


def check_psd2(s11, s12, s22, rtol: float = 1e-9) -> None:
    s11, s12, s22 = np.broadcast_arrays(*(np.asarray(a, float) for a in (s11, s12, s22)))
    if np.any(s11 < 0) or np.any(s22 < 0):
        raise NotPSDError("negative variance in 2x2 covariance")
    if np.any(s12 * s12 > s11 * s22 * (1 + rtol) + 1e-300):
        bad = np.argmax(s12 * s12 - s11 * s22)
        raise NotPSDError(
            f"2x2 covariance not PSD: s12^2={s12.flat[bad] ** 2:.6g} > "
            f"s11*s22={s11.flat[bad] * s22.flat[bad]:.6g}"
        )


def cholesky2(c: Cov2) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == c``; handles rank-deficient ``c``."""
    check_psd2(c.s11, c.s12, c.s22)
    l11 = np.sqrt(c.s11)
    if l11 == 0.0:
        return np.array([[0.0, 0.0], [0.0, np.sqrt(c.s22)]])
    l21 = c.s12 / l11
    l22 = np.sqrt(max(c.s22 - l21 * l21, 0.0))
    return np.array([[l11, 0.0], [l21, l22]])


@lru_cache(maxsize=None)
def gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite nodes/weights for E over N(0, 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def _legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


_GRID = 600
_RMAX = 13.0


def gauss_from_density(t: np.ndarray, wt: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n``-point Gauss rule for the discrete measure ``sum_k wt_k delta(t_k)``.

    Recurrence coefficients come from Lanczos with full reorthogonalisation;
    weights use the Christoffel function so that tiny tail weights keep full
    relative precision (plain Golub-Welsch loses them).
    """
    mass = wt.sum()
    if mass <= 0:
        return np.zeros(n), np.zeros(n)
    n = min(n, int(np.count_nonzero(wt > 0)))
    Q = np.zeros((n, t.size))
    a = np.zeros(n)
    b = np.zeros(n + 1)
    q = np.ones(t.size) / np.sqrt(mass)
    for k in range(n):
        Q[k] = q
        a[k] = np.sum(wt * t * q * q)
        r = t * q
        for _ in range(2):
            r -= Q[:k + 1].T @ (Q[:k + 1] @ (wt * r))
        b[k + 1] = np.sqrt(np.sum(wt * r * r))
        if b[k + 1] == 0:
            n = k + 1
            a, b = a[:n], b[:n + 1]
            break
        q = r / b[k + 1]
    J = np.diag(a) + np.diag(b[1:n], 1) + np.diag(b[1:n], -1)
    x = np.linalg.eigvalsh(J)
    P = np.zeros((n, n))
    P[0] = 1.0 / np.sqrt(mass)
    for k in range(1, n):
        P[k] = ((x - a[k - 1]) * P[k - 1] - (b[k - 1] * P[k - 2] if k > 1 else 0.0)) / b[k]
    w = 1.0 / np.sum(P * P, axis=0)
    return x, w * (mass / w.sum())


@lru_cache(maxsize=None)
def rayleigh_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss rule for the radial density ``r exp(-r^2/2)`` on ``[0, inf)`` (weights sum to 1)."""
    x, w = _legendre(_GRID)
    t = _RMAX * (x + 1) / 2
    wt = w * _RMAX / 2 * t * np.exp(-t * t / 2)
    r, wr = gauss_from_density(t, wt, n)
    wr = wr / wr.sum()
    r.setflags(write=False)
    wr.setflags(write=False)
    return r, wr


@lru_cache(maxsize=4096)
def _half_normal_rules(c: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss rules for N(0, 1) restricted to ``s < c`` and ``s > c`` (standardised units)."""
    nodes, weights = [], []
    x, w = _legendre(_GRID)
    for lo, hi in ((-_RMAX, min(c, _RMAX)), (max(c, -_RMAX), _RMAX)):
        if hi <= lo:
            continue
        t = lo + (hi - lo) * (x + 1) / 2
        wt = w * (hi - lo) / 2 * np.exp(-t * t / 2) / np.sqrt(2 * np.pi)
        if wt.sum() < 1e-300:
            continue
        xs, ws = gauss_from_density(t, wt, n)
        nodes.append(xs)
        weights.append(ws)
    x_all = np.concatenate(nodes)
    w_all = np.concatenate(weights)
    return x_all, w_all / w_all.sum()


@dataclass(frozen=True)
class QuadratureSpec:
    nodes_per_dim: int = 64
    degenerate_eps: float = 1e-12
    method: str = "polar"

    def __post_init__(self):
        if self.nodes_per_dim < 1:
            raise ValueError("nodes_per_dim must be >= 1")
        if self.method not in ("polar", "split", "hermite"):
            raise ValueError(f"unknown quadrature method {self.method!r}")

    @property
    def radial_nodes(self) -> int:
        return max(1, self.nodes_per_dim // 2)

    @property
    def angular_nodes(self) -> int:
        """Gauss-Legendre nodes on each of the four angular pieces."""
        return max(2, self.nodes_per_dim // 2)


def normal_rule(mu, sigma, q: QuadratureSpec) -> tuple[np.ndarray, np.ndarray]:
    """1D rule for E over N(mu, sigma^2), vectorised over the leading shape.

    Returns ``(nodes, weights)`` of shape ``mu.shape + (K,)``. Zero ``sigma``
    collapses to a point mass at ``mu`` (other weights are zero).
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    mu, sigma = np.broadcast_arrays(mu, sigma)
    point = sigma <= 0.0
    if q.method == "polar" and mu.ndim == 0:
        if point:
            return np.array([float(mu)]), np.array([1.0])
        x, w = _half_normal_rules(float(-mu / sigma), q.radial_nodes)
        return mu + sigma * x, w.copy()
    if q.method == "hermite":
        x, w = gauss_hermite(q.nodes_per_dim)
        nodes = mu[..., None] + sigma[..., None] * x
        weights = np.broadcast_to(w, nodes.shape).copy()
    else:
        h = max(1, q.nodes_per_dim // 2)
        x, w = _legendre(h)
        sig = np.where(point, 1.0, sigma)
        lo = mu - _TRUNC * sig
        hi = mu + _TRUNC * sig
        pieces = [(lo, np.minimum(hi, 0.0)), (np.maximum(lo, 0.0), hi)]
        nodes_l, weights_l = [], []
        for a, b in pieces:
            half = np.maximum(b - a, 0.0) / 2.0
            mid = (a + b) / 2.0
            t = mid[..., None] + half[..., None] * x
            dens = np.exp(-0.5 * ((t - mu[..., None]) / sig[..., None]) ** 2)
            dens /= sig[..., None] * np.sqrt(2.0 * np.pi)
            nodes_l.append(t)
            weights_l.append(half[..., None] * w * dens)
        nodes = np.concatenate(nodes_l, axis=-1)
        weights = np.concatenate(weights_l, axis=-1)
        weights /= np.where(point, 1.0, weights.sum(axis=-1))[..., None]
    if np.any(point):
        nodes[point] = mu[point][..., None]
        weights[point] = 0.0
        weights[point, 0] = 1.0
    return nodes, weights


def bivariate_rule(s11, s12, s22, q: QuadratureSpec):
    """Nodes ``(z1, z2)`` and weights for E over N(0, [[s11, s12], [s12, s22]]).

    Inputs broadcast to a common shape ``P``; outputs have shape ``P + (G,)``.
    When ``det < degenerate_eps * s11 * s22`` the conditional variance is set
    to zero so the rule reduces to 1D along the rank-1 direction.
    """
    s11, s12, s22 = np.broadcast_arrays(*(np.asarray(a, float) for a in (s11, s12, s22)))
    check_psd2(s11, s12, s22)
    if q.method == "polar":
        return _polar_rule(s11, s12, s22, q)
    z1, w1 = normal_rule(np.zeros_like(s11), np.sqrt(s11), q)
    safe = np.where(s11 > 0, s11, 1.0)
    slope = np.where(s11 > 0, s12 / safe, 0.0)
    det = s11 * s22 - s12 * s12
    cvar = np.where(s11 > 0, np.maximum(det, 0.0) / safe, s22)
    degenerate = (s11 > 0) & (det < q.degenerate_eps * s11 * s22)
    cvar = np.where(degenerate, 0.0, cvar)
    mu2 = slope[..., None] * z1
    z2, w2 = normal_rule(mu2, np.broadcast_to(np.sqrt(cvar)[..., None], mu2.shape), q)
    k1 = z1.shape[-1]
    k2 = z2.shape[-1]
    shape = s11.shape + (k1 * k2,)
    Z1 = np.broadcast_to(z1[..., None], s11.shape + (k1, k2)).reshape(shape)
    Z2 = z2.reshape(shape)
    W = (w1[..., None] * w2).reshape(shape)
    return Z1, Z2, W


def _polar_rule(s11, s12, s22, q: QuadratureSpec):
    l11 = np.sqrt(s11)
    safe = np.where(l11 > 0, l11, 1.0)
    l21 = np.where(l11 > 0, s12 / safe, 0.0)
    det = s11 * s22 - s12 * s12
    l22 = np.sqrt(np.maximum(np.where(l11 > 0, s22 - l21 * l21, s22), 0.0))
    degenerate = (s11 > 0) & (det < q.degenerate_eps * s11 * s22)
    l22 = np.where(degenerate, 0.0, l22)
    # kink directions: z1 = 0 at theta = pi/2 (+pi); z2 = 0 where l21 cos + l22 sin = 0
    t2 = np.mod(np.arctan2(-l21, l22), np.pi)
    # coinciding kinks (z2 proportional to z1): keep four quarter pieces
    t2 = np.where(np.abs(np.cos(t2)) < 1e-12, 0.0, t2)
    br = np.sort(np.stack([np.full_like(t2, np.pi / 2), t2, np.full_like(t2, 1.5 * np.pi),
                           t2 + np.pi], axis=-1), axis=-1)
    lo = br
    hi = np.concatenate([br[..., 1:], br[..., :1] + 2 * np.pi], axis=-1)
    x, w = _legendre(q.angular_nodes)
    half = (hi - lo)[..., None] / 2
    theta = ((lo + hi)[..., None] / 2 + half * x).reshape(lo.shape[:-1] + (-1,))
    wth = (half * w / (2 * np.pi)).reshape(theta.shape)
    r, wr = rayleigh_rule(q.radial_nodes)
    c, s = np.cos(theta), np.sin(theta)
    Z1 = (l11[..., None] * c)[..., None] * r
    Z2 = (l21[..., None] * c + l22[..., None] * s)[..., None] * r
    W = wth[..., None] * wr
    shape = s11.shape + (-1,)
    return Z1.reshape(shape), Z2.reshape(shape), W.reshape(shape)


def expect_bivariate(g: Callable[[np.ndarray, np.ndarray], np.ndarray], c: Cov2,
                     q: QuadratureSpec = QuadratureSpec()) -> float:
    """Estimate ``E[g(z1, z2)]`` for ``(z1, z2) ~ N(0, c)``; ``g`` must be vectorised."""
    z1, z2, w = bivariate_rule(c.s11, c.s12, c.s22, q)
    vals = np.asarray(g(z1, z2), dtype=float)
    if not np.all(np.isfinite(vals[w != 0])):
        raise QuadratureError("integrand returned non-finite values on the quadrature grid")
    return float(np.sum(w * vals))

"""Infinite-width covariance and ensemble-NTK recursions.

Only two model-pair classes are tracked, ``same`` (alpha == beta) and ``diff``
(alpha != beta); modulations are i.i.d. across models so every off-diagonal
pair is equivalent. The NTK is carried as two accumulators:

* ``theta_com`` -- inner products of shared-weight gradients,
* ``theta_ind`` -- inner products of a model's own trainable-modulation
  gradients (model-diagonal by construction).

Both propagate through a layer with the same multiplier. The ``gamma(M)/M``
weighting of the common part is applied only in :func:`assemble_ntk`.

Propagation multiplier
----------------------
The exact limit of the propagated term is ``<u_a u_b> E[v_a phi'(v_a z_1) v_b phi'(v_b z_2)]``.
The default ``v_coupling="factored"`` uses ``<u_a u_b> <v_a v_b> E[phi'(v_a z_1) phi'(v_b z_2)]``
instead. The two coincide for constant pre-modulations and, for ReLU, in the
same-model channel whenever the pre-modulation has no atom at zero (``phi'`` is
then a sign indicator and the ``v^2`` factor separates). ``"joint"`` evaluates the exact expectation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .activations import dphi, phi
from .numerics import NotPSDError, QuadratureError, QuadratureSpec, bivariate_rule, normal_rule
from .specs import ArchSpec, ModulationSpec, gamma_value

SAME = "same_model"
DIFF = "diff_model"
PAIR_MODES = (SAME, DIFF)


@dataclass(frozen=True)
class ModulationMoments:
    m1: float
    m2: float
    trainable: bool = False


def moments(spec: ModulationSpec | None) -> ModulationMoments:
    """Exact first and second moments of a modulation distribution."""
    if spec is None:
        return ModulationMoments(1.0, 1.0, False)
    if spec.kind == "deterministic":
        return ModulationMoments(spec.c, spec.c * spec.c, spec.trainable)
    if spec.kind == "gaussian":
        return ModulationMoments(spec.mean, spec.variance + spec.mean ** 2, spec.trainable)
    v = np.asarray(spec.values, dtype=float)
    p = np.asarray(spec.probs, dtype=float)
    return ModulationMoments(float(p @ v), float(p @ (v * v)), spec.trainable)


_PIECEWISE_LINEAR = ("relu", "identity")


def _v_rule(spec: ModulationSpec | None, q: QuadratureSpec,
            activation: str = "relu") -> tuple[np.ndarray, np.ndarray]:
    """Nodes/probabilities representing the pre-modulation distribution.

    Gaussian specs use Gauss rules on each side of ``v = 0``. For ReLU and
    identity every integrand is a polynomial of degree <= 2 in ``v`` on each
    side, so two nodes per side are exact; smooth activations get
    ``nodes_per_dim // 4`` per side.
    """
    if spec is None or spec.kind == "deterministic":
        c = 1.0 if spec is None else spec.c
        return np.array([c]), np.array([1.0])
    if spec.kind == "discrete":
        p = np.asarray(spec.probs, dtype=float)
        keep = p > 0
        return np.asarray(spec.values, dtype=float)[keep], p[keep]
    if spec.variance == 0.0:
        return np.array([spec.mean]), np.array([1.0])
    per_side = 2 if activation in _PIECEWISE_LINEAR else max(2, q.nodes_per_dim // 4)
    vq = replace(q, nodes_per_dim=2 * per_side, method="polar") if q.method == "polar" else q
    nodes, w = normal_rule(spec.mean, np.sqrt(spec.variance), vq)
    keep = w > 0
    return nodes[keep], w[keep]


def _integrand(kind: str, activation: str):
    if kind == "phi":
        return lambda v, z: phi(activation, v * z)
    if kind == "phid":
        return lambda v, z: dphi(activation, v * z)
    if kind == "phiz":
        return lambda v, z: z * dphi(activation, v * z)
    if kind == "vphid":
        return lambda v, z: v * dphi(activation, v * z)
    raise ValueError(kind)


_CHUNK_ELEMS = 4_000_000


def modulated_expectations(kinds, activation: str, s11, s12, s22, v_spec, mode: str,
                           q: QuadratureSpec = QuadratureSpec()) -> dict[str, np.ndarray]:
    """``E[h(v_1, z_1) h(v_2, z_2)]`` for each integrand kind, over arrays of 2x2 covariances.

    ``(z_1, z_2) ~ N(0, [[s11, s12], [s12, s22]])``. In ``same_model`` mode
    ``v_1 = v_2`` is a single draw; in ``diff_model`` mode they are independent.
    Kinds: ``phi`` (phi), ``phid`` (phi'), ``phiz`` (z phi'), ``vphid`` (v phi').
    """
    if mode not in PAIR_MODES:
        raise ValueError(f"unknown pair mode {mode!r}")
    s11, s12, s22 = np.broadcast_arrays(*(np.asarray(a, float) for a in (s11, s12, s22)))
    shape = s11.shape
    s11, s12, s22 = s11.ravel(), s12.ravel(), s22.ravel()
    vn, vp = _v_rule(v_spec, q, activation)
    funcs = {k: _integrand(k, activation) for k in kinds}
    out = {k: np.empty(s11.size) for k in kinds}
    P = s11.size
    if P == 0:
        return {k: out[k].reshape(shape) for k in kinds}
    z1, z2, w = bivariate_rule(s11[:1], s12[:1], s22[:1], q)
    G = w.shape[-1]
    step = max(1, _CHUNK_ELEMS // (G * len(vn)))
    V = vn[:, None, None]
    for start in range(0, P, step):
        sl = slice(start, min(P, start + step))
        z1, z2, w = bivariate_rule(s11[sl], s12[sl], s22[sl], q)
        for k, f in funcs.items():
            A = f(V, z1[None])
            B = f(V, z2[None])
            if mode == SAME:
                val = np.einsum("k,kpg,pg->p", vp, A * B, w)
            else:
                val = np.einsum("pg,pg,pg->p", np.tensordot(vp, A, 1), np.tensordot(vp, B, 1), w)
            out[k][sl] = val
    for k in kinds:
        if not np.all(np.isfinite(out[k])):
            raise QuadratureError(f"non-finite {k} expectation")
    return {k: out[k].reshape(shape) for k in kinds}


def _scalar(kind, activation, c, v_spec, mode, q):
    return float(modulated_expectations((kind,), activation, c.s11, c.s12, c.s22,
                                        v_spec, mode, q)[kind])


def phi_expect(activation, c, v_spec=None, mode=SAME, q=QuadratureSpec()) -> float:
    """``E[phi(v_1 z_1) phi(v_2 z_2)]``."""
    return _scalar("phi", activation, c, v_spec, mode, q)


def phid_expect(activation, c, v_spec=None, mode=SAME, q=QuadratureSpec()) -> float:
    """``E[phi'(v_1 z_1) phi'(v_2 z_2)]``."""
    return _scalar("phid", activation, c, v_spec, mode, q)


def phiz_expect(activation, c, v_spec=None, mode=SAME, q=QuadratureSpec()) -> float:
    """``E[z_1 phi'(v_1 z_1) z_2 phi'(v_2 z_2)]`` (derivative form; see module notes)."""
    return _scalar("phiz", activation, c, v_spec, mode, q)


# ----------------------------------------------------------------------------
# layer recursions


@dataclass(frozen=True)
class LayerKernels:
    """Per-layer kernels over an input list of ``n`` points (all ``n x n``)."""

    layer: int
    sigma_same: np.ndarray
    sigma_diff: np.ndarray
    theta_com_same: np.ndarray
    theta_com_diff: np.ndarray
    theta_ind_same: np.ndarray

    CHANNELS = ("sigma_same", "sigma_diff", "theta_com_same", "theta_com_diff", "theta_ind_same")

    @property
    def theta_same(self) -> np.ndarray:
        """Total same-model NTK for ``gamma(M)/M = 1``."""
        return self.theta_com_same + self.theta_ind_same

    @property
    def theta_diff(self) -> np.ndarray:
        return self.theta_com_diff


def sigma_init(X, n0: int | None = None) -> LayerKernels:
    """First-layer kernels: ``Sigma = Theta_com = X X^T / N_0`` for both pair classes."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n0 = X.shape[1] if n0 is None else n0
    if X.shape[1] != n0:
        raise ValueError("input dimension mismatch")
    K = X @ X.T / n0
    return LayerKernels(1, K, K.copy(), K.copy(), K.copy(), np.zeros_like(K))


def _pair_cov(prev: LayerKernels, mode: str):
    d = np.diag(prev.sigma_same)
    off = prev.sigma_same if mode == SAME else prev.sigma_diff
    s11 = np.broadcast_to(d[:, None], off.shape)
    s22 = np.broadcast_to(d[None, :], off.shape)
    return s11, off, s22


def _layer_expectations(prev: LayerKernels, v_spec, activation, q, kinds_by_mode):
    """Gaussian expectations on the upper triangle, mirrored to full matrices."""
    n = prev.sigma_same.shape[0]
    iu = np.triu_indices(n)
    res = {}
    for mode, kinds in kinds_by_mode.items():
        if not kinds:
            continue
        s11, s12, s22 = (a[iu] for a in _pair_cov(prev, mode))
        tol = 1e-9 * s11 * s22
        excess = s12 * s12 - s11 * s22
        if np.any(excess > tol + 1e-300):
            raise NotPSDError(f"layer {prev.layer} {mode} 2x2 covariance not PSD")
        lim = np.sqrt(s11 * s22)
        s12 = np.clip(s12, -lim, lim)
        vals = modulated_expectations(kinds, activation, s11, s12, s22, v_spec, mode, q)
        for k, v in vals.items():
            full = np.empty((n, n))
            full[iu] = v
            full.T[iu] = v
            res[(mode, k)] = full
    return res


def sigma_step(prev: LayerKernels, u_mom: ModulationMoments, v_spec, activation: str,
               q: QuadratureSpec = QuadratureSpec()) -> tuple[np.ndarray, np.ndarray]:
    """Next-layer ``(sigma_same, sigma_diff)``: ``U_2 Phi_same`` and ``U_1^2 Phi_diff``."""
    e = _layer_expectations(prev, v_spec, activation, q, {SAME: ("phi",), DIFF: ("phi",)})
    return u_mom.m2 * e[(SAME, "phi")], u_mom.m1 ** 2 * e[(DIFF, "phi")]


def _step(prev: LayerKernels, u_mom: ModulationMoments, v_mom: ModulationMoments, v_spec,
          activation: str, q: QuadratureSpec, v_coupling: str) -> LayerKernels:
    if v_coupling not in ("factored", "joint"):
        raise ValueError(f"unknown v_coupling {v_coupling!r}")
    prop = "phid" if v_coupling == "factored" else "vphid"
    same_kinds = ["phi", prop]
    if v_mom.trainable:
        same_kinds.append("phiz")
    diff_kinds = ["phi", prop]
    e = _layer_expectations(prev, v_spec, activation, q,
                            {SAME: tuple(same_kinds), DIFF: tuple(diff_kinds)})
    U1, U2 = u_mom.m1, u_mom.m2
    if v_coupling == "factored":
        mult_same = U2 * v_mom.m2 * e[(SAME, "phid")]
        mult_diff = U1 ** 2 * v_mom.m1 ** 2 * e[(DIFF, "phid")]
    else:
        mult_same = U2 * e[(SAME, "vphid")]
        mult_diff = U1 ** 2 * e[(DIFF, "vphid")]
    phi_same = e[(SAME, "phi")]
    phi_diff = e[(DIFF, "phi")]
    ind_new = (1.0 if u_mom.trainable else 0.0) * phi_same
    if v_mom.trainable:
        ind_new = ind_new + U2 * e[(SAME, "phiz")]
    return LayerKernels(
        layer=prev.layer + 1,
        sigma_same=U2 * phi_same,
        sigma_diff=U1 ** 2 * phi_diff,
        theta_com_same=mult_same * prev.theta_com_same + U2 * phi_same,
        theta_com_diff=mult_diff * prev.theta_com_diff + U1 ** 2 * phi_diff,
        theta_ind_same=mult_same * prev.theta_ind_same + ind_new,
    )


def ntk_step(prev: LayerKernels, u_mom: ModulationMoments, v_mom: ModulationMoments, v_spec,
             activation: str, T_u: bool | None = None, T_v: bool | None = None,
             q: QuadratureSpec = QuadratureSpec(), v_coupling: str = "factored"):
    """Next-layer ``(theta_com_same, theta_com_diff, theta_ind_same)``."""
    if T_u is not None:
        u_mom = replace(u_mom, trainable=bool(T_u))
    if T_v is not None:
        v_mom = replace(v_mom, trainable=bool(T_v))
    k = _step(prev, u_mom, v_mom, v_spec, activation, q, v_coupling)
    return k.theta_com_same, k.theta_com_diff, k.theta_ind_same


def run_recursion(arch: ArchSpec, X, q: QuadratureSpec = QuadratureSpec(),
                  v_coupling: str = "factored") -> list[LayerKernels]:
    """Kernels for layers ``1..L+1``; the last entry is the network output."""
    if arch.input_mod is not None or arch.output_mod is not None:
        raise ValueError("kernel recursion does not cover input/output modulations")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ks = [sigma_init(X, arch.input_dim)]
    for layer in arch.layers:
        ks.append(_step(ks[-1], moments(layer.post), moments(layer.pre), layer.pre,
                        arch.activation, q, v_coupling))
    return ks


# ----------------------------------------------------------------------------
# block assembly


def _check_psd_block(K: np.ndarray, what: str) -> None:
    n = K.shape[0]
    tr = np.trace(K)
    lam = np.linalg.eigvalsh((K + K.T) / 2)[0]
    if n and lam < -1e-8 * max(tr, 0.0) / n - 1e-300:
        raise NotPSDError(f"{what} not PSD: min eigenvalue {lam:.3e}, trace {tr:.3e}")


def _blocks(same: np.ndarray, diff: np.ndarray, m: int) -> np.ndarray:
    n = same.shape[0]
    K = np.kron(np.ones((m, m)), diff)
    for a in range(m):
        K[a * n:(a + 1) * n, a * n:(a + 1) * n] = same
    return K


def assemble_ntk(k: LayerKernels, m: int, gamma_mode="m", check: bool = True) -> np.ndarray:
    """``(Mn, Mn)`` ensemble NTK, model-major ordering (row ``alpha * n + i``).

    Diagonal blocks ``(gamma/M) theta_com_same + theta_ind_same``, off-diagonal
    blocks ``(gamma/M) theta_com_diff``.
    """
    c = gamma_value(gamma_mode, m) / m
    K = _blocks(c * k.theta_com_same + k.theta_ind_same, c * k.theta_com_diff, m)
    if check:
        _check_psd_block(K, "assembled NTK")
    return K


def gp_covariance_blocks(k: LayerKernels, m: int, check: bool = True) -> np.ndarray:
    """``(Mn, Mn)`` covariance of the initial outputs (same model-major ordering)."""
    K = _blocks(k.sigma_same, k.sigma_diff, m)
    if check:
        _check_psd_block(K, "GP covariance")
    return K


# ----------------------------------------------------------------------------
# export


def export_csv(kernels: list[LayerKernels], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "channel", "row", "col", "value"])
        for k in kernels:
            for ch in LayerKernels.CHANNELS:
                mat = getattr(k, ch)
                for i in range(mat.shape[0]):
                    for j in range(mat.shape[1]):
                        w.writerow([k.layer, ch, i, j, repr(float(mat[i, j]))])


def export_blob(kernels: list[LayerKernels], path, meta: dict | None = None) -> None:
    from .blob import write_blob

    arrays = {f"L{k.layer}/{ch}": getattr(k, ch) for k in kernels for ch in LayerKernels.CHANNELS}
    write_blob(path, arrays, {"kind": "layer_kernels", **(meta or {})})


def load_blob(path) -> list[LayerKernels]:
    from .blob import read_blob

    arrays, _ = read_blob(path)
    layers = sorted({int(k.split("/")[0][1:]) for k in arrays})
    return [LayerKernels(l, *(arrays[f"L{l}/{ch}"] for ch in LayerKernels.CHANNELS))
            for l in layers]

"""Finite-width embedded ensembles: modulated forward pass, manual backprop and SGD.

Shapes follow one convention throughout: activations are ``(M, B, N)`` with
``M`` models, ``B`` inputs and ``N`` neurons. Shared weights ``W[l]`` are
``(N_{l-1}, N_l)`` for ``l = 1..L+1`` (stored at list index ``l-1``).
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .activations import dphi, phi
from .numerics import Seed, split_rng
from .specs import IDENTITY_MOD, ArchSpec, TrainConfig, gamma_value

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class EnsembleParams:
    """Shared weights plus per-model modulations.

    ``u[l]``/``v[l]`` (``l = 0..L-1`` for hidden layers ``1..L``) are ``(M, N_l)``.
    ``u_in`` (``(M, N_0)``) multiplies the input and ``v_out`` (``(M, C)``)
    multiplies the output; both are all-ones unless the arch modulates them.
    """

    W: list[np.ndarray]
    u: list[np.ndarray]
    v: list[np.ndarray]
    u_in: np.ndarray
    v_out: np.ndarray

    @property
    def n_models(self) -> int:
        return self.u_in.shape[0]

    def copy(self) -> "EnsembleParams":
        return copy.deepcopy(self)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"W{l + 1}": w for l, w in enumerate(self.W)}
        out.update({f"u{l + 1}": a for l, a in enumerate(self.u)})
        out.update({f"v{l + 1}": a for l, a in enumerate(self.v)})
        out["u_in"] = self.u_in
        out["v_out"] = self.v_out
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "EnsembleParams":
        n = sum(1 for k in arrays if k.startswith("W"))
        return cls(
            W=[arrays[f"W{l + 1}"] for l in range(n)],
            u=[arrays[f"u{l + 1}"] for l in range(n - 1)],
            v=[arrays[f"v{l + 1}"] for l in range(n - 1)],
            u_in=arrays["u_in"],
            v_out=arrays["v_out"],
        )


@dataclass
class Grads:
    """Per-model gradients.

    ``W[l]`` is ``(M, N_{l-1}, N_l)``: model ``alpha``'s own loss gradient with
    respect to the shared weights. Modulation entries exist only for trainable
    slots (dicts keyed by hidden-layer list index).
    """

    W: list[np.ndarray]
    u: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    u_in: np.ndarray | None = None
    v_out: np.ndarray | None = None

    def modulation_items(self):
        for l, g in sorted(self.u.items()):
            yield f"u{l + 1}", g
        for l, g in sorted(self.v.items()):
            yield f"v{l + 1}", g
        if self.u_in is not None:
            yield "u_in", self.u_in
        if self.v_out is not None:
            yield "v_out", self.v_out


def _layer_scale(arch: ArchSpec, fan_in: int) -> float:
    return 1.0 / math.sqrt(fan_in) if arch.parametrization == "ntk" else 1.0


def _modulation_streams(arch: ArchSpec):
    """(name, spec, width) for every modulation slot, in a fixed order."""
    for l, layer in enumerate(arch.layers):
        yield f"u{l + 1}", layer.post, layer.width
        yield f"v{l + 1}", layer.pre, layer.width
    yield "u_in", arch.input_mod or IDENTITY_MOD, arch.input_dim
    yield "v_out", arch.output_mod or IDENTITY_MOD, arch.output_dim


def _draw_modulations(arch: ArchSpec, seed: Seed, m: int, only_untrainable=False) -> dict:
    out = {}
    for k, (name, spec, width) in enumerate(_modulation_streams(arch)):
        if only_untrainable and (spec.trainable or spec.is_constant):
            continue
        rng = split_rng(seed, 100 + k).rng()
        out[name] = spec.sample(rng, (m, width))
    return out


def init_params(arch: ArchSpec, seed: Seed) -> EnsembleParams:
    """Shared weights ``N(0, 1)`` (ntk) or ``N(0, 1/N_{l-1})`` (standard); modulations
    i.i.d. per model and neuron from their specs.

    Each slot draws from its own child stream, so the shared weights do not
    depend on ``n_models`` and model ``alpha``'s modulations are a prefix-stable
    function of the seed.
    """
    widths = arch.widths
    W = []
    for l in range(len(widths) - 1):
        rng = split_rng(seed, l).rng()
        w = rng.standard_normal((widths[l], widths[l + 1]))
        if arch.parametrization == "standard":
            w /= math.sqrt(widths[l])
        W.append(w)
    mods = _draw_modulations(arch, seed, arch.n_models)
    L = arch.depth
    return EnsembleParams(
        W=W,
        u=[mods[f"u{l + 1}"] for l in range(L)],
        v=[mods[f"v{l + 1}"] for l in range(L)],
        u_in=mods["u_in"],
        v_out=mods["v_out"],
    )


def resample_untrainable(params: EnsembleParams, arch: ArchSpec, seed: Seed) -> EnsembleParams:
    """Redraw every random non-trainable modulation (MC-dropout resampling mode)."""
    fresh = _draw_modulations(arch, seed, params.n_models, only_untrainable=True)
    out = EnsembleParams(list(params.W), list(params.u), list(params.v), params.u_in, params.v_out)
    for name, val in fresh.items():
        if name == "u_in":
            out.u_in = val
        elif name == "v_out":
            out.v_out = val
        else:
            idx = int(name[1:]) - 1
            (out.u if name[0] == "u" else out.v)[idx] = val
    return out


# ----------------------------------------------------------------------------
# forward / backward


def _check_inputs(arch: ArchSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"expected inputs of dim {arch.input_dim}, got shape {X.shape}")
    return X


def forward_cache(params: EnsembleParams, arch: ArchSpec, X) -> dict:
    X = _check_inputs(arch, X)
    act = arch.activation
    h = params.u_in[:, None, :] * X[None, :, :]
    cache = {"X": X, "h": [h], "z": [], "s": [], "a": []}
    L = arch.depth
    for l in range(L + 1):
        z = (h @ params.W[l]) * _layer_scale(arch, params.W[l].shape[0])
        cache["z"].append(z)
        if l == L:
            break
        s = params.v[l][:, None, :] * z
        a = phi(act, s)
        h = params.u[l][:, None, :] * a
        cache["s"].append(s)
        cache["a"].append(a)
        cache["h"].append(h)
    cache["out"] = cache["z"][-1] * params.v_out[:, None, :]
    return cache


def forward_batch(params: EnsembleParams, arch: ArchSpec, X) -> np.ndarray:
    """Per-model outputs ``(M, B, C)`` for a batch of inputs ``(B, N_0)``."""
    return forward_cache(params, arch, X)["out"]


def forward(params: EnsembleParams, arch: ArchSpec, x) -> np.ndarray:
    """Per-model outputs ``(M, C)`` for a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("forward expects a single input vector; use forward_batch")
    return forward_batch(params, arch, x)[:, 0, :]


def backward_per_sample(params: EnsembleParams, arch: ArchSpec, cache: dict, g_out: np.ndarray):
    """Backpropagate an upstream gradient ``g_out`` ``(M, B, C)``.

    Returns per-sample factors rather than summed gradients:
    ``gz[l]`` (``(M, B, N_l)``, already multiplied by the layer scale) so that
    ``dW[l] = h[l]^T gz[l]`` summed over the batch, and per-sample modulation
    gradients ``gu[l]``, ``gv[l]`` (``(M, B, N_l)``), ``gu_in``, ``gv_out``.
    """
    act = arch.activation
    L = arch.depth
    gv_out = g_out * cache["z"][-1]
    gz = g_out * params.v_out[:, None, :]
    gzs: list = [None] * (L + 1)
    gu: list = [None] * L
    gv: list = [None] * L
    gu_in = None
    for l in range(L, -1, -1):
        scale = _layer_scale(arch, params.W[l].shape[0])
        gzs[l] = gz * scale
        gh = gzs[l] @ params.W[l].T
        if l == 0:
            gu_in = gh * cache["X"][None, :, :]
            break
        k = l - 1
        a = cache["a"][k]
        gu[k] = gh * a
        gs = gh * params.u[k][:, None, :] * dphi(act, cache["s"][k])
        gv[k] = gs * cache["z"][k]
        gz = gs * params.v[k][:, None, :]
    return {"gz": gzs, "gu": gu, "gv": gv, "gu_in": gu_in, "gv_out": gv_out}


def _collect_grads(arch: ArchSpec, cache: dict, back: dict) -> Grads:
    L = arch.depth
    W = [np.einsum("mbi,mbj->mij", cache["h"][l], back["gz"][l]) for l in range(L + 1)]
    g = Grads(W)
    for k, layer in enumerate(arch.layers):
        if layer.post.trainable:
            g.u[k] = back["gu"][k].sum(axis=1)
        if layer.pre.trainable:
            g.v[k] = back["gv"][k].sum(axis=1)
    if arch.input_mod is not None and arch.input_mod.trainable:
        g.u_in = back["gu_in"].sum(axis=1)
    if arch.output_mod is not None and arch.output_mod.trainable:
        g.v_out = back["gv_out"].sum(axis=1)
    return g


# ----------------------------------------------------------------------------
# losses


def _targets(arch: ArchSpec, y, loss_kind: str, n: int) -> np.ndarray:
    y = np.asarray(y)
    if loss_kind == "cross_entropy":
        y = y.astype(int).reshape(n)
        if np.any(y < 0) or np.any(y >= arch.output_dim):
            raise ValueError("class indices must lie in [0, output_dim)")
        return y
    y = y.astype(float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape != (n, arch.output_dim):
        raise ValueError(f"regression targets must have shape ({n}, {arch.output_dim})")
    return y


def log_softmax(f: np.ndarray) -> np.ndarray:
    m = f.max(axis=-1, keepdims=True)
    return f - m - np.log(np.exp(f - m).sum(axis=-1, keepdims=True))


def pointwise_loss(out: np.ndarray, y: np.ndarray, loss_kind: str):
    """Per-point loss ``(M, B)`` and its derivative ``dL/df`` ``(M, B, C)``."""
    if loss_kind == "mse":
        r = out - y[None]
        return 0.5 * np.sum(r * r, axis=-1), r
    logp = log_softmax(out)
    b = np.arange(out.shape[1])
    loss = -logp[:, b, y]
    d = np.exp(logp)
    d[:, b, y] -= 1.0
    return loss, d


def per_model_loss(params: EnsembleParams, arch: ArchSpec, batch, loss_kind: str) -> np.ndarray:
    """``L_alpha = mean_b L(f_alpha(x_b), y_b)`` for every model, shape ``(M,)``."""
    X, y = batch
    X = _check_inputs(arch, X)
    if len(X) == 0:
        raise ValueError("empty batch")
    out = forward_batch(params, arch, X)
    loss, _ = pointwise_loss(out, _targets(arch, y, loss_kind, len(X)), loss_kind)
    return loss.mean(axis=1)


def loss_and_grads(params: EnsembleParams, arch: ArchSpec, batch, loss_kind: str):
    X, y = batch
    X = _check_inputs(arch, X)
    cache = forward_cache(params, arch, X)
    loss, d = pointwise_loss(cache["out"], _targets(arch, y, loss_kind, len(X)), loss_kind)
    back = backward_per_sample(params, arch, cache, d / len(X))
    return loss.mean(axis=1), _collect_grads(arch, cache, back)


def grads(params: EnsembleParams, arch: ArchSpec, batch, loss_kind: str) -> Grads:
    """Exact gradients of every ``L_alpha`` w.r.t. shared weights and its own trainable modulations."""
    return loss_and_grads(params, arch, batch, loss_kind)[1]


def sgd_step(params: EnsembleParams, g: Grads, cfg: TrainConfig) -> EnsembleParams:
    """``dW = -eta_w * gamma(M)/M * sum_alpha dL_alpha/dW``; ``du_alpha = -eta_u dL_alpha/du_alpha``."""
    m = g.W[0].shape[0]
    coef = cfg.eta_w * gamma_value(cfg.gamma_mode, m) / m
    new = EnsembleParams(
        W=[w - coef * gw.sum(axis=0) for w, gw in zip(params.W, g.W)],
        u=list(params.u), v=list(params.v), u_in=params.u_in, v_out=params.v_out,
    )
    eta_u = cfg.lr_u
    for k, gk in g.u.items():
        new.u[k] = params.u[k] - eta_u * gk
    for k, gk in g.v.items():
        new.v[k] = params.v[k] - eta_u * gk
    if g.u_in is not None:
        new.u_in = params.u_in - eta_u * g.u_in
    if g.v_out is not None:
        new.v_out = params.v_out - eta_u * g.v_out
    return new


# ----------------------------------------------------------------------------
# training loop


def accuracy(out: np.ndarray, y, loss_kind: str) -> np.ndarray:
    """Per-model accuracy (classification) or NaN (regression)."""
    if loss_kind != "cross_entropy":
        return np.full(out.shape[0], np.nan)
    return (out.argmax(axis=-1) == np.asarray(y)[None, :]).mean(axis=1)


@dataclass
class TrainResult:
    params: EnsembleParams
    history: list[dict]
    diverged: bool = False
    diagnostic: dict | None = None


def _epoch_record(params, arch, X, y, loss_kind, epoch, eval_data=None, keep_out=False) -> dict:
    out = forward_batch(params, arch, X)
    yt = _targets(arch, y, loss_kind, len(X))
    loss, _ = pointwise_loss(out, yt, loss_kind)
    rec = {"epoch": epoch, "loss": loss.mean(axis=1), "acc": accuracy(out, yt, loss_kind)}
    if loss_kind == "cross_entropy":
        rec["ens_acc"] = float((out.mean(axis=0).argmax(axis=-1) == yt).mean())
    if eval_data is not None:
        Xe, ye = eval_data
        oe = forward_batch(params, arch, Xe)
        ye = _targets(arch, ye, loss_kind, len(Xe))
        le, _ = pointwise_loss(oe, ye, loss_kind)
        rec["test_loss"] = le.mean(axis=1)
        rec["test_acc"] = accuracy(oe, ye, loss_kind)
        if keep_out:
            rec["test_out"] = oe
        if loss_kind == "cross_entropy":
            rec["test_ens_acc"] = float((oe.mean(axis=0).argmax(axis=-1) == ye).mean())
    return rec


def train(params: EnsembleParams, arch: ArchSpec, data, cfg: TrainConfig, seed: Seed,
          eval_data=None, record_test_outputs: bool = False) -> TrainResult:
    """Mini-batch SGD with epoch-wise shuffling; every model sees the same batch.

    History entry 0 is the initial state. A non-finite loss aborts training and
    the result carries ``diverged=True`` plus the step where it happened.
    """
    X, y = data
    X = _check_inputs(arch, X)
    n = len(X)
    shuffle_rng = split_rng(seed, 1).rng()
    mask_seed = split_rng(seed, 2)
    history = [_epoch_record(params, arch, X, y, cfg.loss_kind, 0, eval_data, record_test_outputs)]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if cfg.dropout_resample:
                params = resample_untrainable(params, arch, split_rng(mask_seed, step))
            losses, g = loss_and_grads(params, arch, (X[idx], np.asarray(y)[idx]), cfg.loss_kind)
            if not np.all(np.isfinite(losses)):
                diag = {"epoch": epoch, "step": step, "loss": losses.tolist()}
                log.warning("training diverged: %s", diag)
                return TrainResult(params, history, True, diag)
            params = sgd_step(params, g, cfg)
            step += 1
        rec = _epoch_record(params, arch, X, y, cfg.loss_kind, epoch, eval_data,
                            record_test_outputs)
        if not np.all(np.isfinite(rec["loss"])):
            diag = {"epoch": epoch, "step": step, "loss": rec["loss"].tolist()}
            log.warning("training diverged: %s", diag)
            return TrainResult(params, history, True, diag)
        history.append(rec)
    return TrainResult(params, history)


# ----------------------------------------------------------------------------
# last-layer dropout (LLD) fused path


def check_lld(arch: ArchSpec) -> None:
    """Per-model parameters may only be post-modulations of the last hidden layer."""
    for k, layer in enumerate(arch.layers):
        if not layer.pre.is_constant or layer.pre.trainable:
            raise ValueError(f"LLD requires constant pre-modulation at layer {k + 1}")
        if k < arch.depth - 1 and (not layer.post.is_constant or layer.post.trainable):
            raise ValueError(f"LLD requires constant post-modulation at layer {k + 1}")
    for spec in (arch.input_mod, arch.output_mod):
        if spec is not None and (not spec.is_constant or spec.trainable):
            raise ValueError("LLD requires constant input/output modulations")


def _lld_features(params: EnsembleParams, arch: ArchSpec, X):
    """Shared feature pass using model 0's (identical) early-layer modulations."""
    single = EnsembleParams(
        W=params.W[:-1], u=[u[:1] for u in params.u], v=[v[:1] for v in params.v],
        u_in=params.u_in[:1], v_out=params.v_out[:1],
    )
    act = arch.activation
    h = single.u_in[:, None, :] * X[None]
    zs, ss, hs = [], [], [h]
    for l in range(arch.depth):
        z = (h @ params.W[l]) * _layer_scale(arch, params.W[l].shape[0])
        s = single.v[l][:, None, :] * z
        a = phi(act, s)
        zs.append(z)
        ss.append(s)
        if l < arch.depth - 1:
            h = single.u[l][:, None, :] * a
            hs.append(h)
    return a[0], {"z": zs, "s": ss, "h": hs, "single": single}


def lld_fused_inference(params: EnsembleParams, arch: ArchSpec, x) -> np.ndarray:
    """Ensemble-mean output from one pass with the averaged last-layer mask."""
    check_lld(arch)
    x = np.asarray(x, dtype=float)
    single_input = x.ndim == 1
    X = _check_inputs(arch, x)
    feats, _ = _lld_features(params, arch, X)
    ubar = params.u[-1].mean(axis=0)
    scale = _layer_scale(arch, params.W[-1].shape[0])
    out = ((feats * ubar) @ params.W[-1]) * scale * params.v_out[0]
    return out[0] if single_input else out


@dataclass
class LLDGrads:
    """Gradient of the fused train loss w.r.t. the shared weights (already
    ``gamma/M``-weighted) and unscaled per-model last-layer mask gradients."""

    W: list[np.ndarray]
    u_last: np.ndarray | None


def lld_fused_train_loss(params: EnsembleParams, arch: ArchSpec, batch, cfg: TrainConfig):
    """``(gamma/M) sum_alpha mean_b L(f_alpha(x_b), y_b)`` and its gradients.

    All ``M`` outputs share one feature pass; only the last layer is per-model.
    """
    check_lld(arch)
    X, y = batch
    X = _check_inputs(arch, X)
    m = params.n_models
    B = len(X)
    coef = gamma_value(cfg.gamma_mode, m) / m
    feats, fc = _lld_features(params, arch, X)
    uL = params.u[-1]
    Wl = params.W[-1]
    N, C = Wl.shape
    scale = _layer_scale(arch, N)
    # the last layer is linear in the mask, so fold it into per-model output weights
    # and keep every M-dependent product a single (.., N) x (N, M C) matmul
    w_eff = uL[:, :, None] * Wl[None]                                  # (M, N, C)
    z_out = (feats @ w_eff.transpose(1, 0, 2).reshape(N, m * C)) * scale
    out = z_out.reshape(B, m, C).transpose(1, 0, 2) * params.v_out[0]
    yt = _targets(arch, y, cfg.loss_kind, B)
    loss, d = pointwise_loss(out, yt, cfg.loss_kind)
    per_model = loss.mean(axis=1)
    total = coef * per_model.sum()

    gz = ((d / B) * params.v_out[0] * scale).transpose(1, 0, 2).reshape(B, m * C)
    fg = (feats.T @ gz).reshape(N, m, C)                               # sum_b h_bi gz_mbc
    gW_last = coef * np.einsum("imc,mi->ic", fg, uL)
    u_last = None
    if arch.layers[-1].post.trainable:
        u_last = np.einsum("imc,ic->mi", fg, Wl)
    # shared backward through the feature layers
    ga = coef * (gz @ w_eff.transpose(0, 2, 1).reshape(m * C, N))
    single = fc["single"]
    gW = [None] * arch.depth
    act = arch.activation
    for l in range(arch.depth - 1, -1, -1):
        gs = ga * dphi(act, fc["s"][l][0])
        gz_l = gs * single.v[l][0] * _layer_scale(arch, params.W[l].shape[0])
        gW[l] = fc["h"][l][0].T @ gz_l
        if l == 0:
            break
        ga = (gz_l @ params.W[l].T) * single.u[l - 1][0]
    return total, LLDGrads(gW + [gW_last], u_last)


def lld_sgd_step(params: EnsembleParams, g: LLDGrads, cfg: TrainConfig) -> EnsembleParams:
    new = EnsembleParams([w - cfg.eta_w * gw for w, gw in zip(params.W, g.W)],
                         list(params.u), list(params.v), params.u_in, params.v_out)
    if g.u_last is not None:
        new.u[-1] = params.u[-1] - cfg.lr_u * g.u_last
    return new

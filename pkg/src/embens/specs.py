"""Architecture and modulation descriptions shared by the network and the kernel theory."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .activations import ACTIVATIONS


@dataclass(frozen=True)
class ModulationSpec:
    """Distribution of a per-neuron modulation and whether it is trained.

    ``kind`` is one of ``deterministic`` (value ``c``), ``gaussian``
    (``mean``, ``variance``) or ``discrete`` (``values``, ``probs``).
    """

    kind: str = "deterministic"
    c: float = 1.0
    mean: float = 0.0
    variance: float = 1.0
    values: tuple = ()
    probs: tuple = ()
    trainable: bool = False

    def __post_init__(self):
        if self.kind == "gaussian":
            if self.variance < 0:
                raise ValueError("gaussian modulation variance must be >= 0")
        elif self.kind == "discrete":
            p = np.asarray(self.probs, dtype=float)
            if len(self.values) != len(self.probs) or len(self.values) == 0:
                raise ValueError("discrete modulation needs matching non-empty values/probs")
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError("discrete modulation probs must be nonnegative and sum to 1")
        elif self.kind != "deterministic":
            raise ValueError(f"unknown modulation kind {self.kind!r}")

    @classmethod
    def deterministic(cls, c: float = 1.0, trainable: bool = False) -> "ModulationSpec":
        return cls("deterministic", c=float(c), trainable=trainable)

    @classmethod
    def gaussian(cls, mean: float, variance: float, trainable: bool = True) -> "ModulationSpec":
        return cls("gaussian", mean=float(mean), variance=float(variance), trainable=trainable)

    @classmethod
    def shifted(cls, p: float, trainable: bool = True) -> "ModulationSpec":
        """``N(p, 1 - p^2)``; ``p = 1`` degenerates to the constant 1."""
        return cls.gaussian(p, max(1.0 - p * p, 0.0), trainable=trainable)

    @classmethod
    def discrete(cls, values: Sequence[float], probs: Sequence[float],
                 trainable: bool = False) -> "ModulationSpec":
        return cls("discrete", values=tuple(float(v) for v in values),
                   probs=tuple(float(p) for p in probs), trainable=trainable)

    @property
    def is_constant(self) -> bool:
        if self.kind == "deterministic":
            return True
        if self.kind == "gaussian":
            return self.variance == 0.0
        p = np.asarray(self.probs)
        return len(set(v for v, pi in zip(self.values, p) if pi > 0)) == 1

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "deterministic":
            return np.full(shape, self.c, dtype=float)
        if self.kind == "gaussian":
            return self.mean + np.sqrt(self.variance) * rng.standard_normal(shape)
        idx = rng.choice(len(self.values), size=shape, p=np.asarray(self.probs))
        return np.asarray(self.values, dtype=float)[idx]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "trainable": self.trainable}
        if self.kind == "deterministic":
            d["c"] = self.c
        elif self.kind == "gaussian":
            d.update(mean=self.mean, variance=self.variance)
        else:
            d.update(values=list(self.values), probs=list(self.probs))
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModulationSpec | None":
        if d is None:
            return None
        kind = d.get("kind", "deterministic")
        trainable = bool(d.get("trainable", kind == "gaussian"))
        if kind == "deterministic":
            return cls.deterministic(d.get("c", 1.0), trainable)
        if kind == "gaussian":
            return cls.gaussian(d["mean"], d["variance"], trainable)
        if kind == "shifted":
            return cls.shifted(d["p"], trainable)
        if kind == "discrete":
            return cls.discrete(d["values"], d["probs"], trainable)
        raise ValueError(f"unknown modulation kind {kind!r}")


IDENTITY_MOD = ModulationSpec.deterministic(1.0)


@dataclass(frozen=True)
class LayerSpec:
    width: int
    pre_mod: ModulationSpec | None = None
    post_mod: ModulationSpec | None = None

    @property
    def pre(self) -> ModulationSpec:
        return self.pre_mod or IDENTITY_MOD

    @property
    def post(self) -> ModulationSpec:
        return self.post_mod or IDENTITY_MOD


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    layers: tuple[LayerSpec, ...]
    output_dim: int = 1
    activation: str = "relu"
    parametrization: str = "ntk"
    n_models: int = 1
    input_mod: ModulationSpec | None = None
    output_mod: ModulationSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 1:
            raise ValueError("need at least one hidden layer")
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.parametrization not in ("ntk", "standard"):
            raise ValueError(f"unknown parametrization {self.parametrization!r}")
        if self.input_dim < 1 or self.output_dim < 1 or any(l.width < 1 for l in self.layers):
            raise ValueError("all widths must be positive")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        """``[N_0, N_1, ..., N_L, N_{L+1}]``."""
        return [self.input_dim] + [l.width for l in self.layers] + [self.output_dim]

    def with_models(self, m: int) -> "ArchSpec":
        return replace(self, n_models=m)

    def scaled(self, factor: float) -> "ArchSpec":
        layers = tuple(replace(l, width=max(1, int(round(l.width * factor)))) for l in self.layers)
        return replace(self, layers=layers)

    @classmethod
    def uniform(cls, input_dim: int, widths: Sequence[int], output_dim: int = 1, *,
                pre: ModulationSpec | None = None, post: ModulationSpec | None = None,
                activation: str = "relu", parametrization: str = "ntk",
                n_models: int = 1) -> "ArchSpec":
        """Same pre/post modulation spec on every hidden layer."""
        layers = tuple(LayerSpec(w, pre, post) for w in widths)
        return cls(input_dim, layers, output_dim, activation, parametrization, n_models)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layers": [
                {"width": l.width,
                 "pre_mod": l.pre_mod.to_dict() if l.pre_mod else None,
                 "post_mod": l.post_mod.to_dict() if l.post_mod else None}
                for l in self.layers
            ],
            "output_dim": self.output_dim,
            "activation": self.activation,
            "parametrization": self.parametrization,
            "n_models": self.n_models,
            "input_mod": self.input_mod.to_dict() if self.input_mod else None,
            "output_mod": self.output_mod.to_dict() if self.output_mod else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        layers = d["layers"]
        if layers and isinstance(layers[0], int):
            pre = ModulationSpec.from_dict(d.get("pre_mod"))
            post = ModulationSpec.from_dict(d.get("post_mod"))
            layers = [LayerSpec(w, pre, post) for w in layers]
        else:
            layers = [LayerSpec(l["width"], ModulationSpec.from_dict(l.get("pre_mod")),
                                ModulationSpec.from_dict(l.get("post_mod"))) for l in layers]
        return cls(
            input_dim=d["input_dim"],
            layers=tuple(layers),
            output_dim=d.get("output_dim", 1),
            activation=d.get("activation", "relu"),
            parametrization=d.get("parametrization", "ntk"),
            n_models=d.get("n_models", 1),
            input_mod=ModulationSpec.from_dict(d.get("input_mod")),
            output_mod=ModulationSpec.from_dict(d.get("output_mod")),
        )


def gamma_value(gamma_mode, m: int) -> float:
    """Shared-gradient scaling factor: ``"one"`` -> 1, ``"m"`` -> M, a number -> itself."""
    if gamma_mode == "one":
        return 1.0
    if gamma_mode == "m":
        return float(m)
    if isinstance(gamma_mode, (int, float)) and not isinstance(gamma_mode, bool):
        return float(gamma_mode)
    raise ValueError(f"unknown gamma_mode {gamma_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    eta_w: float = 0.1
    eta_u: float | None = None
    gamma_mode: object = "m"
    batch_size: int = 32
    epochs: int = 10
    loss_kind: str = "cross_entropy"
    dropout_resample: bool = False

    def __post_init__(self):
        if self.eta_w < 0 or (self.eta_u is not None and self.eta_u < 0):
            raise ValueError("learning rates must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        gamma_value(self.gamma_mode, 1)

    @property
    def lr_u(self) -> float:
        return self.eta_w if self.eta_u is None else self.eta_u

    def to_dict(self) -> dict:
        return {
            "eta_w": self.eta_w, "eta_u": self.eta_u, "gamma_mode": self.gamma_mode,
            "batch_size": self.batch_size, "epochs": self.epochs,
            "loss_kind": self.loss_kind, "dropout_resample": self.dropout_resample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

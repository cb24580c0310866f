"""Synthetic and CSV datasets for desk-scale experiments."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .numerics import Seed, split_rng
from .specs import ArchSpec


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    """``kind`` in {blobs, spirals, teacher, csv}; remaining fields are kind-specific."""

    kind: str = "blobs"
    n_train: int = 256
    n_test: int = 256
    seed: int = 0
    n_classes: int = 3
    dim: int = 2
    separation: float = 3.0
    noise: float = 0.1
    teacher: dict | None = None
    path: str | None = None
    regression: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("blobs", "spirals", "teacher", "csv"):
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "csv" and (self.n_train < 1 or self.n_test < 1):
            raise DatasetError("n_train and n_test must be >= 1")
        if self.kind == "csv" and not self.path:
            raise DatasetError("csv dataset needs a path")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DatasetError(f"unknown dataset fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int | None

    @property
    def train(self):
        return self.X_train, self.y_train

    @property
    def test(self):
        return self.X_test, self.y_test


def _blobs(spec: DatasetSpec, rng, n):
    centers_rng = split_rng(Seed(spec.seed), 0).rng()
    centers = centers_rng.standard_normal((spec.n_classes, spec.dim))
    centers *= spec.separation / np.linalg.norm(centers, axis=1, keepdims=True).clip(1e-12)
    y = rng.integers(0, spec.n_classes, n)
    X = centers[y] + rng.standard_normal((n, spec.dim))
    return X, y


def _spirals(spec: DatasetSpec, rng, n):
    y = rng.integers(0, spec.n_classes, n)
    r = rng.uniform(0.1, 1.0, n)
    theta = 4.0 * r + 2 * np.pi * y / spec.n_classes
    X = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    X += spec.noise * rng.standard_normal(X.shape)
    if spec.dim > 2:
        X = np.concatenate([X, np.zeros((n, spec.dim - 2))], axis=1)
    return X, y


def teacher_arch(spec: DatasetSpec) -> ArchSpec:
    d = dict(spec.teacher or {})
    d.setdefault("input_dim", spec.dim)
    d.setdefault("layers", [64, 64])
    d.setdefault("output_dim", 1)
    d["n_models"] = 1
    return ArchSpec.from_dict(d)


def _split(X, y, n_train):
    return X[:n_train], y[:n_train], X[n_train:], y[n_train:]


def read_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Header row, comma separated, last column label (int) or target (float)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        width = len(header)
        if width < 2:
            raise DatasetError(f"{path}:1: need at least one feature and a label column")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DatasetError(f"{path}:{line}: expected {width} columns, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as e:
                raise DatasetError(f"{path}:{line}: {e}") from None
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    data = np.array(rows)
    return data[:, :-1], data[:, -1]


def gen_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic train/test arrays for a spec."""
    rng = split_rng(Seed(spec.seed), 1).rng()
    n = spec.n_train + spec.n_test
    if spec.kind == "blobs":
        X, y = _blobs(spec, rng, n)
        return Dataset(*_split(X, y, spec.n_train), spec.n_classes)
    if spec.kind == "spirals":
        X, y = _spirals(spec, rng, n)
        return Dataset(*_split(X, y, spec.n_train), spec.n_classes)
    if spec.kind == "teacher":
        from .net import forward_batch, init_params

        arch = teacher_arch(spec)
        X = rng.standard_normal((n, arch.input_dim))
        p = init_params(arch, split_rng(Seed(spec.seed), 2))
        y = forward_batch(p, arch, X)[0]
        return Dataset(*_split(X, y, spec.n_train), None)
    X, y = read_csv(spec.path)
    regression = spec.regression or not np.all(y == np.round(y))
    n_classes = None
    if not regression:
        y = y.astype(int)
        if np.any(y < 0):
            raise DatasetError(f"{spec.path}: class labels must be nonnegative")
        n_classes = int(y.max()) + 1
    n_tr = min(spec.n_train, len(X))
    return Dataset(*_split(X, y, n_tr), n_classes)

"""Elementwise activations and their derivatives.

The ReLU derivative uses the convention ``relu'(0) = 0`` in both the finite
networks and the kernel quadrature, so discrete modulations that hit zero are
treated identically on both sides.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

ACTIVATIONS = ("relu", "identity", "sigmoid", "erf")


def _sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def phi(name: str, s):
    if name == "relu":
        return np.maximum(s, 0.0)
    if name == "identity":
        return np.asarray(s, dtype=float)
    if name == "sigmoid":
        return _sigmoid(s)
    if name == "erf":
        return _erf(s)
    raise ValueError(f"unknown activation {name!r}")


def dphi(name: str, s):
    if name == "relu":
        return (np.asarray(s) > 0.0).astype(float)
    if name == "identity":
        return np.ones_like(np.asarray(s, dtype=float))
    if name == "sigmoid":
        p = _sigmoid(s)
        return p * (1.0 - p)
    if name == "erf":
        return (2.0 / math.sqrt(math.pi)) * np.exp(-np.square(s))
    raise ValueError(f"unknown activation {name!r}")

"""Parameter containers and the small set of learnable building blocks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict[str, Tensor]


def param(values: np.ndarray, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def init_linear(params: Params, prefix: str, d_in: int, d_out: int, rng: np.random.Generator,
                bias: bool = True, gain: float = 1.0) -> None:
    std = gain / np.sqrt(d_in)
    params[f"{prefix}.w"] = param(rng.normal(0.0, std, (d_in, d_out)), f"{prefix}.w")
    if bias:
        params[f"{prefix}.b"] = param(np.zeros(d_out), f"{prefix}.b")


def init_conv(params: Params, prefix: str, c_in: int, c_out: int, rng: np.random.Generator,
              k: int = 3) -> None:
    std = np.sqrt(2.0 / (k * k * c_in))
    params[f"{prefix}.w"] = param(rng.normal(0.0, std, (k, k, c_in, c_out)), f"{prefix}.w")
    params[f"{prefix}.b"] = param(np.zeros(c_out), f"{prefix}.b")


def init_norm(params: Params, prefix: str, d: int) -> None:
    params[f"{prefix}.g"] = param(np.ones(d), f"{prefix}.g")
    params[f"{prefix}.b"] = param(np.zeros(d), f"{prefix}.b")


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    y = x @ params[f"{prefix}.w"]
    b = params.get(f"{prefix}.b")
    return y + b if b is not None else y


def norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def conv2d(x: Tensor, params: Params, prefix: str, stride: int = 1) -> Tensor:
    """Same-padded square convolution on ``x[..., H, W, C]``."""
    w = params[f"{prefix}.w"]
    k, _, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise T.ShapeError(f"conv2d {prefix}: input has {x.shape[-1]} channels, weights expect {c_in}")
    cols = T.im2col(x, k, stride, k // 2)
    return cols @ w.reshape(k * k * c_in, c_out) + params[f"{prefix}.b"]


def mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    """Two linear layers with a ReLU between."""
    return linear(T.relu(linear(x, params, f"{prefix}.0")), params, f"{prefix}.1")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, rows sum to one."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample(x: Tensor, factor: int = 2) -> Tensor:
    h, w = x.shape[-3], x.shape[-2]
    return T.resize(x, bilinear_matrix(h, h * factor), bilinear_matrix(w, w * factor))

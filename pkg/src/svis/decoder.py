"""Skip-fusion decoder, per-slot class head and dynamic-convolution mask head."""

from __future__ import annotations

import math

import numpy as np

from . import layers
from . import tensor as T
from .config import StackConfig
from .layers import Params
from .tensor import ContractError, Tensor


def init_decoder(params: Params, cfg: StackConfig, rng: np.random.Generator) -> None:
    d = cfg.dim
    layers.init_linear(params, "dec.skip", d, d, rng)
    layers.init_conv(params, "dec.0", 2 * d, d, rng)
    layers.init_conv(params, "dec.1", d, d, rng)
    if cfg.layer_norm:
        layers.init_norm(params, "head.ln", d)
    layers.init_linear(params, "cls.0", d, d, rng, gain=math.sqrt(2))
    layers.init_linear(params, "cls.1", d, cfg.num_classes + 1, rng)
    layers.init_linear(params, "mask.0", d, d, rng, gain=math.sqrt(2))
    layers.init_linear(params, "mask.1", d, d, rng)


def decode_features(f: Tensor, skip: Tensor, params: Params) -> Tensor:
    """Upsample ``f[H, W, D]`` 2x, fuse with projected ``skip[2H, 2W, D]``, two 3x3 convs."""
    h, w = f.shape[-3], f.shape[-2]
    if skip.shape[-3:-1] != (2 * h, 2 * w) or skip.shape[:-3] != f.shape[:-3]:
        raise T.ShapeError(f"decode_features: skip {list(skip.shape)} must be twice the size of {list(f.shape)}")
    up = layers.upsample(f, 2)
    fused = T.concat([up, layers.linear(skip, params, "dec.skip")], axis=-1)
    x = T.relu(layers.conv2d(fused, params, "dec.0"))
    return layers.conv2d(x, params, "dec.1")


def predict_classes(e: Tensor, params: Params) -> Tensor:
    """Per-slot MLP and softmax over C+1 classes; the last column is the empty class."""
    return T.softmax(layers.mlp(e, params, "cls"), axis=-1)


def dynamic_filters(e: Tensor, params: Params) -> Tensor:
    return layers.mlp(e, params, "mask")


def predict_masks(e: Tensor, f_out: Tensor, params: Params) -> Tensor:
    """``softmax_over_slots(theta @ f_out^T)`` with ``theta = MLP(e)``; returns ``[L, Ho, Wo]``."""
    theta = dynamic_filters(e, params)
    return masks_from_filters(theta, f_out)


def masks_from_filters(theta: Tensor, f_out: Tensor) -> Tensor:
    *lead, ho, wo, d = f_out.shape
    if theta.shape[-1] != d or theta.shape[:-2] != tuple(lead):
        raise T.ShapeError(f"mask head: filters {list(theta.shape)} vs features {list(f_out.shape)}")
    logits = theta @ T.swap_last(f_out.reshape(*lead, ho * wo, d))
    probs = T.softmax(logits, axis=-2)
    return probs.reshape(*lead, theta.shape[-2], ho, wo)


def binarize_masks(masks: np.ndarray) -> np.ndarray:
    """Slot-exclusive binary masks: a pixel belongs to the argmax slot if its value exceeds 1/L."""
    masks = np.asarray(masks)
    slots = masks.shape[0]
    if slots < 1:
        raise ContractError("binarize_masks: no slots")
    winner = masks.argmax(axis=0)
    confident = masks.max(axis=0) > 1.0 / slots
    out = np.zeros(masks.shape, dtype=bool)
    for i in range(slots):
        out[i] = (winner == i) & confident
    return out


def slot_index_image(binary: np.ndarray) -> np.ndarray:
    """Indexed image for export: slot index + 1 where claimed, 0 for background."""
    img = np.zeros(binary.shape[1:], dtype=np.uint8)
    for i in range(binary.shape[0]):
        img[binary[i]] = i + 1
    return img

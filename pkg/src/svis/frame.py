"""Hybrid per-frame representation: instance code plus pixel feature map.

The instance code is an ``[L, D]`` learnable latent, one row ("slot") per
potential instance. The slot index carries identity across frames, so nothing
here sorts, pools or shuffles over the slot axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers
from . import tensor as T
from .config import StackConfig
from .layers import Params
from .tensor import ContractError, Tensor

CODE_STD = 0.02
CHECKPOINT_MAGIC = b"SVIS"
CHECKPOINT_VERSION = 1


def init_instance_code(slots: int, dim: int, seed: int) -> Tensor:
    if slots < 1 or dim < 1:
        raise ContractError(f"instance code needs slots, dim >= 1, got ({slots}, {dim})")
    rng = np.random.default_rng(seed)
    return layers.param(rng.normal(0.0, CODE_STD, (slots, dim)), "code")


@dataclass
class PositionalTable:
    """Learnable per-frame-offset encodings; offset 0 is the target frame, offset d is frame t-d."""

    code_pe: Tensor  # [(n_ref + 1) * L, D]
    pixel_pe: Tensor  # [(n_ref + 1) * H * W, D]
    n_offsets: int

    @classmethod
    def from_params(cls, params: Params, cfg: StackConfig) -> "PositionalTable":
        return cls(params["pe.code"], params["pe.pixel"], cfg.n_ref + 1)


def init_positional_table(params: Params, cfg: StackConfig, rng: np.random.Generator) -> None:
    n = cfg.n_ref + 1
    hw = cfg.feat_size ** 2
    params["pe.code"] = layers.param(rng.normal(0.0, CODE_STD, (n * cfg.slots, cfg.dim)), "pe.code")
    params["pe.pixel"] = layers.param(rng.normal(0.0, CODE_STD, (n * hw, cfg.dim)), "pe.pixel")


def add_positional_encoding(x: Tensor, table: PositionalTable, frame_offset: int) -> Tensor:
    """Add the encoding slice for ``frame_offset`` to a code ``[L, D]`` or feature map ``[H, W, D]``."""
    if not 0 <= frame_offset < table.n_offsets:
        raise ContractError(f"frame offset {frame_offset} outside [0, {table.n_offsets})")
    if x.ndim == 2:
        rows = x.shape[0]
        pe = table.code_pe[frame_offset * rows:(frame_offset + 1) * rows]
    elif x.ndim == 3:
        h, w, d = x.shape
        rows = h * w
        pe = table.pixel_pe[frame_offset * rows:(frame_offset + 1) * rows].reshape(h, w, d)
    else:
        raise ContractError(f"positional encoding expects rank 2 or 3, got shape {list(x.shape)}")
    if pe.shape != x.shape:
        raise T.ShapeError(f"positional table slice {list(pe.shape)} does not fit input {list(x.shape)}")
    return x + pe


def init_backbone(params: Params, cfg: StackConfig, rng: np.random.Generator) -> None:
    d = cfg.dim
    layers.init_conv(params, "stem.0", cfg.in_channels + (2 if cfg.coord_channels else 0), d, rng)
    layers.init_conv(params, "stem.1", d, d, rng)
    for i in range(2):
        layers.init_conv(params, f"res{i}.0", d, d, rng)
        layers.init_conv(params, f"res{i}.1", d, d, rng)
        params[f"res{i}.1.w"].data *= 0.5


def coordinate_channels(h: int, w: int) -> np.ndarray:
    """``[H, W, 2]`` pixel-centre coordinates scaled to [-1, 1] (x, then y)."""
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    return np.stack(np.meshgrid(xs, ys), axis=-1)


def encode_frame(frame: Tensor, params: Params, return_skip: bool = False, coords: bool = False):
    """Stride-4 feature map of an ``[H, W, C]`` image (leading batch dims allowed).

    With ``coords`` two coordinate channels are appended to the input so that
    features carry absolute position. With ``return_skip`` also returns the
    stride-2 features used by the decoder.
    """
    h, w = frame.shape[-3], frame.shape[-2]
    if h % 4 or w % 4:
        raise ContractError(f"frame size {h}x{w} must be a multiple of 4")
    if coords:
        grid = np.broadcast_to(coordinate_channels(h, w), frame.shape[:-1] + (2,))
        frame = T.concat([frame, Tensor(np.ascontiguousarray(grid))], axis=-1)
    skip = T.relu(layers.conv2d(frame, params, "stem.0", stride=2))
    x = T.relu(layers.conv2d(skip, params, "stem.1", stride=2))
    for i in range(2):
        y = layers.conv2d(T.relu(layers.conv2d(x, params, f"res{i}.0")), params, f"res{i}.1")
        x = T.relu(x + y)
    return (x, skip) if return_skip else x


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: Params | dict[str, np.ndarray]) -> None:
    """Little-endian: magic, u32 version, u32 count, then per tensor
    (u32 name length, name, u32 rank, u32 dims..., f64 data)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name in sorted(params):
        value = params[name]
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class CheckpointError(ContractError):
    """Checkpoint file is malformed or does not fit the configured model."""


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out


def assign_checkpoint(params: Params, values: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into ``params``; names and shapes must match exactly."""
    missing = sorted(set(params) - set(values))
    extra = sorted(set(values) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not fit model: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        if p.shape != values[name].shape:
            raise CheckpointError(
                f"checkpoint tensor {name!r} has shape {list(values[name].shape)}, model expects {list(p.shape)}")
        p.data = values[name].copy()

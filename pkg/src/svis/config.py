"""Experiment configuration: model shape, loss weights, optimizer and I/O settings.

Config files are flat ``key = value`` TOML. Every key has a default and
unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

import tomli

from .tensor import ContractError


@dataclass(frozen=True)
class StackConfig:
    slots: int = 10
    dim: int = 32
    heads: int = 2
    n_intra: int = 2
    n_alt: int = 2
    n_ref: int = 3
    num_classes: int = 3
    image_size: int = 64
    in_channels: int = 3
    coord_channels: bool = True
    ffn_dim: int = 64
    layer_norm: bool = True
    ffn: bool = True
    pixel_attention: bool = True
    inter_p2c: bool = True
    inter_c2c_c2p: bool = True

    def __post_init__(self):
        if self.slots < 1 or self.dim < 1:
            raise ContractError("slots and dim must be >= 1")
        if self.n_intra < 1 or self.n_alt < 1 or self.n_ref < 0:
            raise ContractError("need n_intra >= 1, n_alt >= 1, n_ref >= 0")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % 4:
            raise ContractError(f"image_size {self.image_size} must be a multiple of 4")

    @property
    def feat_size(self) -> int:
        return self.image_size // 4

    @property
    def out_size(self) -> int:
        return self.image_size // 2


@dataclass(frozen=True)
class LossWeights:
    lambda_inst: float = 0.75
    lambda_aux: float = 0.0
    k_mask: float = 1.0
    k_cls: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_inst <= 1.0:
            raise ContractError(f"lambda_inst must lie in [0, 1], got {self.lambda_inst}")
        if min(self.lambda_aux, self.k_mask, self.k_cls) < 0:
            raise ContractError("lambda_aux, k_mask and k_cls must be non-negative")


@dataclass
class RunConfig:
    # model
    slots: int = 10
    dim: int = 32
    heads: int = 2
    n_intra: int = 2
    n_alt: int = 2
    n_ref: int = 3
    num_classes: int = 3
    image_size: int = 64
    in_channels: int = 3
    coord_channels: bool = True
    coord_channels: bool = True
    ffn_dim: int = 64
    layer_norm: bool = True
    ffn: bool = True
    pixel_attention: bool = True
    inter_p2c: bool = True
    inter_c2c_c2p: bool = True
    # loss
    lambda_inst: float = 0.75
    lambda_aux: float = 0.0
    k_mask: float = 1.0
    k_cls: float = 1.0
    pairwise_matching: bool = True
    # optimizer
    lr: float = 1e-3
    poly_power: float = 0.9
    iterations: int = 3000
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # global L2 norm, 0 disables
    hflip: bool = True
    rot90: bool = True
    time_reverse: bool = True
    max_shift: int = 0  # random translation in pixels
    # tracker / evaluation
    iou_threshold: float = 0.5
    t_gone: int = 5
    interp_points: int = 101
    # paths
    data_dir: str = "data"
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        self.stack()
        self.loss_weights()
        if self.iterations < 0 or self.batch_size < 1:
            raise ContractError("iterations must be >= 0 and batch_size >= 1")
        if self.max_shift < 0:
            raise ContractError(f"max_shift must be >= 0, got {self.max_shift}")
        if self.grad_clip < 0:
            raise ContractError(f"grad_clip must be >= 0, got {self.grad_clip}")

    def stack(self) -> StackConfig:
        return StackConfig(**{f.name: getattr(self, f.name) for f in fields(StackConfig)})

    def loss_weights(self) -> LossWeights:
        return LossWeights(**{f.name: getattr(self, f.name) for f in fields(LossWeights)})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise ContractError(f"unknown config key {key!r}")
    kind = type(getattr(RunConfig(), key))
    if kind is bool:
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "on", "1", "yes"):
                return True
            if low in ("false", "off", "0", "no"):
                return False
            raise ContractError(f"config key {key!r}: expected a boolean, got {value!r}")
        if isinstance(value, bool):
            return value
        raise ContractError(f"config key {key!r}: expected a boolean, got {value!r}")
    try:
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise ContractError(f"config key {key!r}: expected {kind.__name__}, got {value!r}") from None


def from_mapping(values: dict, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    return base.replace(**{k: _coerce(k, v) for k, v in values.items()})


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    try:
        values = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ContractError(f"malformed config: {exc}") from None
    nested = [k for k, v in values.items() if isinstance(v, dict)]
    if nested:
        raise ContractError(f"config must be flat, found tables {nested}")
    return from_mapping(values, base)


def load(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse(Path(path).read_text(), base)


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply ``key=value`` strings from the command line."""
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ContractError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip().replace("-", "_")
        raw = raw.strip()
        try:
            values[key] = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            values[key] = raw
    return from_mapping(values, cfg)


def dumps(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, str):
            # JSON string escapes are a subset of TOML basic-string escapes; DEL must be escaped too
            text = json.dumps(v, ensure_ascii=False).replace("\x7f", "\\u007f")
        else:
            text = repr(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))

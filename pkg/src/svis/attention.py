"""Intra- and inter-frame hybrid attention and the encoder stack built from them.

Naming follows query-to-key direction: c2c/c2p means code queries attending to
codes and pixels, p2c means pixel queries attending to codes. Every op fuses
its output back into the query-side input through a residual connection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import frame as fr
from . import layers
from . import tensor as T
from .config import StackConfig
from .layers import Params
from .tensor import ContractError, Tensor

# (layer_name, op_name, weights[heads, Nq, Nk])
AttentionTrace = Callable[[str, str, np.ndarray], None]


@dataclass(frozen=True)
class AttentionParams:
    """Projection weights of one attention op, addressed by prefix inside a parameter dict."""

    params: Params
    prefix: str
    heads: int = 1
    layer_norm: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def norm(self, x: Tensor, which: str) -> Tensor:
        if not self.layer_norm:
            return x
        return layers.norm(x, self.params, f"{self.prefix}.ln_{which}")


def init_attention(params: Params, prefix: str, dim: int, query: str, sources: tuple[str, ...],
                   rng: np.random.Generator) -> None:
    """Create ``q_<query>``, ``k_<s>``, ``v_<s>`` for each source, ``o`` and layer norms."""
    std = 1.0 / math.sqrt(dim)
    params[f"{prefix}.q_{query}"] = layers.param(rng.normal(0, std, (dim, dim)), f"{prefix}.q_{query}")
    for s in sources:
        params[f"{prefix}.k_{s}"] = layers.param(rng.normal(0, std, (dim, dim)), f"{prefix}.k_{s}")
        params[f"{prefix}.v_{s}"] = layers.param(rng.normal(0, std, (dim, dim)), f"{prefix}.v_{s}")
    params[f"{prefix}.o"] = layers.param(rng.normal(0, std, (dim, dim)), f"{prefix}.o")
    for s in sorted({query, *sources}):
        layers.init_norm(params, f"{prefix}.ln_{s}", dim)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2).reshape(*lead, n, h * dh)


def attend(query: Tensor, keys: list[Tensor], values: list[Tensor], heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the concatenation of several key/value groups.

    Returns the merged output ``[..., Nq, D]`` and the weights ``[..., heads, Nq, Nk]``.
    """
    d = query.shape[-1]
    if d % heads:
        raise ContractError(f"projection dim {d} not divisible by {heads} heads")
    k = T.concat(keys, axis=-2) if len(keys) > 1 else keys[0]
    v = T.concat(values, axis=-2) if len(values) > 1 else values[0]
    q = _split_heads(query, heads)
    logits = (q @ T.swap_last(_split_heads(k, heads))) * (1.0 / math.sqrt(d // heads))
    w = T.softmax(logits, axis=-1)
    return _merge_heads(w @ _split_heads(v, heads)), w


def _flat(f: Tensor) -> Tensor:
    *lead, h, w, d = f.shape
    return f.reshape(*lead, h * w, d)


def _check_dims(op: str, p: AttentionParams, *xs: Tensor) -> None:
    d = p["o"].shape[0]
    for x in xs:
        if x.shape[-1] != d:
            raise T.ShapeError(f"{op}: input feature dim {x.shape[-1]} does not match params dim {d}")


def intra_c2c_c2p(e: Tensor, f: Tensor, p: AttentionParams, trace: AttentionTrace | None = None) -> Tensor:
    """Code queries over the joint key set [code; pixels] of the same frame; residual into ``e``."""
    _check_dims("intra_c2c_c2p", p, e, f)
    if e.shape[:-2] != f.shape[:-3]:
        raise T.ShapeError(f"intra_c2c_c2p: code {list(e.shape)} and features {list(f.shape)} disagree")
    en = p.norm(e, "e")
    fn = p.norm(_flat(f), "f")
    out, w = attend(en @ p["q_e"], [en @ p["k_e"], fn @ p["k_f"]], [en @ p["v_e"], fn @ p["v_f"]], p.heads)
    if trace is not None:
        trace(p.prefix, "intra_c2c_c2p", w.data)
    return e + out @ p["o"]


def intra_p2c(e: Tensor, f: Tensor, p: AttentionParams, trace: AttentionTrace | None = None) -> Tensor:
    """Pixel queries over the L code slots; residual into ``f``."""
    _check_dims("intra_p2c", p, e, f)
    if e.shape[:-2] != f.shape[:-3]:
        raise T.ShapeError(f"intra_p2c: code {list(e.shape)} and features {list(f.shape)} disagree")
    en = p.norm(e, "e")
    fn = p.norm(_flat(f), "f")
    out, w = attend(fn @ p["q_f"], [en @ p["k_e"]], [en @ p["v_e"]], p.heads)
    if trace is not None:
        trace(p.prefix, "intra_p2c", w.data)
    return f + (out @ p["o"]).reshape(*f.shape)


def pixel_self_attention(f: Tensor, p: AttentionParams) -> Tensor:
    fn = p.norm(_flat(f), "f")
    out, _ = attend(fn @ p["q_f"], [fn @ p["k_f"]], [fn @ p["v_f"]], p.heads)
    return f + (out @ p["o"]).reshape(*f.shape)


@dataclass(frozen=True)
class ReferenceBuffer:
    """Snapshots ``(code, features)`` of previous frames, oldest first, at most ``capacity`` long."""

    capacity: int
    entries: tuple[tuple[Tensor, Tensor], ...] = field(default=())

    def push(self, code: Tensor, features: Tensor) -> "ReferenceBuffer":
        if self.capacity == 0:
            return self
        kept = (self.entries + ((code, features),))[-self.capacity:]
        return ReferenceBuffer(self.capacity, kept)

    def __len__(self) -> int:
        return len(self.entries)

    def by_offset(self):
        """Yield ``(delta, code, features)`` with delta = 1 for the most recent frame."""
        for delta, (c, f) in enumerate(reversed(self.entries), start=1):
            yield delta, c, f


def _reference_inputs(buf: ReferenceBuffer, pe: fr.PositionalTable, p: AttentionParams,
                      with_pixels: bool) -> tuple[Tensor, Tensor | None]:
    if len(buf) == 0:
        raise ContractError("inter-frame attention needs a non-empty reference buffer")
    codes, feats = [], []
    for delta, c, f in buf.by_offset():
        codes.append(fr.add_positional_encoding(p.norm(c, "e"), pe, delta))
        if with_pixels:
            fn = p.norm(f, "f")
            feats.append(_flat(fr.add_positional_encoding(fn, pe, delta)))
    ref_e = T.concat(codes, axis=0) if len(codes) > 1 else codes[0]
    ref_f = None
    if with_pixels:
        ref_f = T.concat(feats, axis=0) if len(feats) > 1 else feats[0]
    return ref_e, ref_f


def inter_c2c_c2p(e_tgt: Tensor, buf: ReferenceBuffer, pe: fr.PositionalTable, p: AttentionParams,
                  trace: AttentionTrace | None = None) -> Tensor:
    """Target code queries over all reference codes and reference pixels; residual into ``e_tgt``."""
    _check_dims("inter_c2c_c2p", p, e_tgt)
    ref_e, ref_f = _reference_inputs(buf, pe, p, with_pixels=True)
    q_in = fr.add_positional_encoding(p.norm(e_tgt, "e"), pe, 0)
    out, w = attend(q_in @ p["q_e"], [ref_e @ p["k_e"], ref_f @ p["k_f"]],
                    [ref_e @ p["v_e"], ref_f @ p["v_f"]], p.heads)
    if trace is not None:
        trace(p.prefix, "inter_c2c_c2p", w.data)
    return e_tgt + out @ p["o"]


def inter_p2c(f_tgt: Tensor, buf: ReferenceBuffer, pe: fr.PositionalTable, p: AttentionParams,
              trace: AttentionTrace | None = None) -> Tensor:
    """Target pixel queries over the reference code slots only; residual into ``f_tgt``."""
    _check_dims("inter_p2c", p, f_tgt)
    ref_e, _ = _reference_inputs(buf, pe, p, with_pixels=False)
    q_in = _flat(fr.add_positional_encoding(p.norm(f_tgt, "f"), pe, 0))
    out, w = attend(q_in @ p["q_f"], [ref_e @ p["k_e"]], [ref_e @ p["v_e"]], p.heads)
    if trace is not None:
        trace(p.prefix, "inter_p2c", w.data)
    return f_tgt + (out @ p["o"]).reshape(*f_tgt.shape)


# --------------------------------------------------------------------------
# layers and stack


def init_intra_layer(params: Params, prefix: str, cfg: StackConfig, rng: np.random.Generator) -> None:
    d = cfg.dim
    init_attention(params, f"{prefix}.c2c_c2p", d, "e", ("e", "f"), rng)
    init_attention(params, f"{prefix}.p2c", d, "f", ("e",), rng)
    if cfg.ffn:
        layers.init_norm(params, f"{prefix}.ffn.ln", d)
        layers.init_linear(params, f"{prefix}.ffn.0", d, cfg.ffn_dim, rng, gain=math.sqrt(2))
        layers.init_linear(params, f"{prefix}.ffn.1", cfg.ffn_dim, d, rng)
    if cfg.pixel_attention:
        init_attention(params, f"{prefix}.pix", d, "f", ("f",), rng)


def init_inter_layer(params: Params, prefix: str, cfg: StackConfig, rng: np.random.Generator) -> None:
    d = cfg.dim
    init_attention(params, f"{prefix}.c2c_c2p", d, "e", ("e", "f"), rng)
    init_attention(params, f"{prefix}.p2c", d, "f", ("e",), rng)
    if cfg.ffn:
        layers.init_norm(params, f"{prefix}.ffn.ln", d)
        layers.init_linear(params, f"{prefix}.ffn.0", d, cfg.ffn_dim, rng, gain=math.sqrt(2))
        layers.init_linear(params, f"{prefix}.ffn.1", cfg.ffn_dim, d, rng)


def _ap(params: Params, prefix: str, cfg: StackConfig) -> AttentionParams:
    return AttentionParams(params, prefix, cfg.heads, cfg.layer_norm)


def _ffn(e: Tensor, params: Params, prefix: str, cfg: StackConfig) -> Tensor:
    x = layers.norm(e, params, f"{prefix}.ffn.ln") if cfg.layer_norm else e
    return e + layers.mlp(x, params, f"{prefix}.ffn")


def intra_layer(e: Tensor, f: Tensor, params: Params, prefix: str, cfg: StackConfig,
                trace: AttentionTrace | None = None) -> tuple[Tensor, Tensor]:
    e = intra_c2c_c2p(e, f, _ap(params, f"{prefix}.c2c_c2p", cfg), trace)
    if cfg.ffn:
        e = _ffn(e, params, prefix, cfg)
    f = intra_p2c(e, f, _ap(params, f"{prefix}.p2c", cfg), trace)
    if cfg.pixel_attention:
        f = pixel_self_attention(f, _ap(params, f"{prefix}.pix", cfg))
    return e, f


def inter_layer(e: Tensor, f: Tensor, buf: ReferenceBuffer, params: Params, prefix: str, cfg: StackConfig,
                trace: AttentionTrace | None = None) -> tuple[Tensor, Tensor]:
    """Both inter-frame ops read the same inputs; skipped entirely when ``buf`` is empty."""
    if len(buf) == 0:
        return e, f
    pe = fr.PositionalTable.from_params(params, cfg)
    e_new, f_new = e, f
    if cfg.inter_c2c_c2p:
        e_new = inter_c2c_c2p(e, buf, pe, _ap(params, f"{prefix}.c2c_c2p", cfg), trace)
        if cfg.ffn:
            e_new = _ffn(e_new, params, prefix, cfg)
    if cfg.inter_p2c:
        f_new = inter_p2c(f, buf, pe, _ap(params, f"{prefix}.p2c", cfg), trace)
    return e_new, f_new


def init_stack(params: Params, cfg: StackConfig, rng: np.random.Generator) -> None:
    for i in range(cfg.n_intra):
        init_intra_layer(params, f"intra{i}", cfg, rng)
    for j in range(cfg.n_alt):
        init_inter_layer(params, f"alt{j}.inter", cfg, rng)
        init_intra_layer(params, f"alt{j}.intra", cfg, rng)


def snapshot_stage(frames: Tensor, params: Params, cfg: StackConfig,
                   trace: AttentionTrace | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Backbone plus the first N intra layers for ``[..., H, W, C]`` frames.

    Returns ``(code, features, skip)``; ``code`` and ``features`` are what the
    reference buffer stores.
    """
    f, skip = fr.encode_frame(frames, params, return_skip=True, coords=cfg.coord_channels)
    code = params["code"]
    lead = frames.shape[:-3]
    if lead:
        code = T.zeros(lead + code.shape) + code
    for i in range(cfg.n_intra):
        code, f = intra_layer(code, f, params, f"intra{i}", cfg, trace)
    return code, f, skip


def alternating_stage(e: Tensor, f: Tensor, buf: ReferenceBuffer, params: Params, cfg: StackConfig,
                      trace: AttentionTrace | None = None) -> tuple[Tensor, Tensor]:
    """M repetitions of (inter layer, intra layer) for one target frame."""
    for j in range(cfg.n_alt):
        e, f = inter_layer(e, f, buf, params, f"alt{j}.inter", cfg, trace)
        e, f = intra_layer(e, f, params, f"alt{j}.intra", cfg, trace)
    return e, f


def run_encoder_stack(frame: Tensor, buf: ReferenceBuffer, cfg: StackConfig, params: Params,
                      trace: AttentionTrace | None = None, return_skip: bool = False):
    """Encode one ``[H, W, C]`` frame online.

    The inter-frame layers read ``buf`` as it was before this frame; the
    returned buffer additionally holds this frame's snapshot.
    """
    if frame.shape != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ContractError(
            f"frame shape {list(frame.shape)} does not match config "
            f"{[cfg.image_size, cfg.image_size, cfg.in_channels]}")
    e_n, f_n, skip = snapshot_stage(frame, params, cfg, trace)
    e, f = alternating_stage(e_n, f_n, buf, params, cfg, trace)
    new_buf = buf.push(e_n, f_n)
    return (e, f, new_buf, skip) if return_skip else (e, f, new_buf)

"""Full model: parameter initialisation, training-window forward and online inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import decoder as dec
from . import frame as fr
from . import layers
from .config import StackConfig
from .layers import Params
from .tensor import Tensor


@dataclass
class FramePrediction:
    class_probs: Tensor  # [L, C+1], last column = empty class
    masks: Tensor  # [L, Ho, Wo], softmax over slots


def init_params(cfg: StackConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {"code": fr.init_instance_code(cfg.slots, cfg.dim, seed)}
    fr.init_positional_table(params, cfg, rng)
    fr.init_backbone(params, cfg, rng)
    att.init_stack(params, cfg, rng)
    dec.init_decoder(params, cfg, rng)
    return params


def predict_heads(e: Tensor, f: Tensor, skip: Tensor, params: Params, cfg: StackConfig) -> FramePrediction:
    code = layers.norm(e, params, "head.ln") if cfg.layer_norm else e
    f_out = dec.decode_features(f, skip, params)
    return FramePrediction(dec.predict_classes(code, params), dec.predict_masks(code, f_out, params))


def forward_window(frames: np.ndarray, params: Params, cfg: StackConfig, n_out: int = 2,
                   trace: att.AttentionTrace | None = None) -> list[FramePrediction]:
    """Predictions for the last ``n_out`` frames of a ``[n, H, W, C]`` window.

    Each output frame sees exactly the same references it would see online,
    restricted to the window; snapshots are computed once, batched.
    """
    n = frames.shape[0]
    e_n, f_n, skip = att.snapshot_stage(Tensor(frames), params, cfg, trace)
    preds = []
    for t in range(max(0, n - n_out), n):
        refs = tuple((e_n[k], f_n[k]) for k in range(max(0, t - cfg.n_ref), t))
        buf = att.ReferenceBuffer(cfg.n_ref, refs[-cfg.n_ref:] if cfg.n_ref else ())
        e, f = att.alternating_stage(e_n[t], f_n[t], buf, params, cfg, trace)
        preds.append(predict_heads(e, f, skip[t], params, cfg))
    return preds


class OnlineSegmenter:
    """Processes one video frame by frame; never sees future frames."""

    def __init__(self, params: Params, cfg: StackConfig, trace: att.AttentionTrace | None = None):
        self.params = params
        self.cfg = cfg
        self.trace = trace
        self.buffer = att.ReferenceBuffer(cfg.n_ref)

    def step(self, image: np.ndarray) -> FramePrediction:
        e, f, self.buffer, skip = att.run_encoder_stack(
            Tensor(image), self.buffer, self.cfg, self.params, self.trace, return_skip=True)
        return predict_heads(e, f, skip, self.params, self.cfg)


def upsample_masks(masks: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling of ``[L, h, w]`` slot probabilities; slot sums stay 1."""
    if factor == 1:
        return masks
    _, h, w = masks.shape
    rows = layers.bilinear_matrix(h, h * factor)
    cols = layers.bilinear_matrix(w, w * factor)
    return np.einsum("ip,jq,lpq->lij", rows, cols, masks, optimize=True)


def segment_video(frames, params: Params, cfg: StackConfig, trace: att.AttentionTrace | None = None):
    """Yield ``(class_probs, full-resolution mask probabilities)`` per frame, in order."""
    seg = OnlineSegmenter(params, cfg, trace)
    for image in frames:
        pred = seg.step(np.asarray(image, dtype=np.float64))
        yield pred.class_probs.data, upsample_masks(pred.masks.data, 2)


def num_parameters(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


"""Training loop: window sampling, two-frame matching, Adam with poly learning-rate decay."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Clip, VideoAnnotations
from .layers import Params
from .matching import hungarian_assign, loss_terms, similarity_matrix
from .model import forward_window, init_params


class Adam:
    def __init__(self, params: Params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.steps = 0

    def step(self, grads: dict, lr: float) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for k, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def poly_lr(base: float, it: int, total: int, power: float) -> float:
    return base * (1.0 - it / total) ** power if total else base


def _shift(x: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    """Translate axes 1 and 2 of ``x`` by (dy, dx), filling uncovered pixels with ``fill``."""
    out = np.empty_like(x)
    out[...] = fill
    h, w = x.shape[1:3]
    src = x[:, max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[:, max(0, dy):max(0, dy) + src.shape[1], max(0, dx):max(0, dx) + src.shape[2]] = src
    return out


def augment(clip: Clip, flip: bool = False, rot: int = 0, reverse: bool = False,
            shift: tuple[int, int] = (0, 0)) -> Clip:
    """Dihedral transform and translation of every frame, optionally played backwards.

    Translated-in pixels take the clip's median colour, which is the background for
    the synthetic generator.
    """
    frames, ann = clip.frames, clip.ann
    if any(shift):
        dy, dx = shift
        fill = np.median(frames.reshape(-1, frames.shape[-1]), axis=0)
        masks = np.moveaxis(_shift(np.moveaxis(ann.masks, 1, -1), dy, dx, False), -1, 1)
        frames, ann = _shift(frames, dy, dx, fill), VideoAnnotations(ann.ids, ann.classes, masks)
    if reverse:
        frames, ann = frames[::-1], ann.reversed()
    if flip:
        frames, ann = frames[:, :, ::-1], ann.hflip()
    if rot:
        frames, ann = np.rot90(frames, rot, axes=(1, 2)), ann.rot90(rot)
    return Clip(clip.name, clip.split, np.ascontiguousarray(frames), ann)


def window_loss(clip: Clip, t: int, params: Params, cfg: RunConfig, flip: bool = False,
                trace=None) -> tuple[T.Tensor, dict]:
    """Loss on frames t-1 and t of one clip; both predictions share one assignment
    when pairwise matching is on, otherwise each frame is matched on its own."""
    stack = cfg.stack()
    w = cfg.loss_weights()
    if flip:
        clip = augment(clip, flip=True)
    start = max(0, t - 1 - stack.n_ref)
    frames = clip.frames[start:t + 1]
    ann = clip.ann
    preds = forward_window(frames, params, stack, n_out=2, trace=trace)
    pred_prev, pred_t = preds
    gt_t, gt_prev = ann.frame(t, stride=2), ann.frame(t - 1, stride=2)
    if cfg.pairwise_matching:
        sim, ids = similarity_matrix(pred_t, pred_prev, gt_t, gt_prev)
        asg_t = asg_prev = hungarian_assign(sim, ids)
    else:
        asg_t = hungarian_assign(*similarity_matrix(pred_t, None, gt_t, None))
        asg_prev = hungarian_assign(*similarity_matrix(pred_prev, None, gt_prev, None))
    terms_t = loss_terms(pred_t, gt_t, asg_t, w)
    terms_p = loss_terms(pred_prev, gt_prev, asg_prev, w)
    loss = (terms_t["total"] + terms_p["total"]) * 0.5
    info = {
        "pos": 0.5 * (terms_t["pos"].item() + terms_p["pos"].item()),
        "neg": 0.5 * (terms_t["neg"].item() + terms_p["neg"].item()),
        "matched": int(asg_t.matched_count),
    }
    return loss, info


def train(cfg: RunConfig, clips: list[Clip], log: TextIO | None = None, params: Params | None = None,
          on_step: Callable[[int, dict], None] | None = None, trace=None) -> Params:
    """Train from ``cfg.seed`` for ``cfg.iterations`` steps on the ``train`` split of ``clips``."""
    train_clips = [c for c in clips if c.split == "train"] or list(clips)
    train_clips = [c for c in train_clips if c.frames.shape[0] >= 2]
    if not train_clips:
        raise ValueError("training needs at least one clip with two or more frames")
    stack = cfg.stack()
    params = params if params is not None else init_params(stack, cfg.seed)
    opt = Adam(params, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 7919)
    for it in range(cfg.iterations):
        lr = poly_lr(cfg.lr, it, cfg.iterations, cfg.poly_power)
        with T.Tape() as tape:
            total = None
            infos = []
            for _ in range(cfg.batch_size):
                clip = train_clips[int(rng.integers(len(train_clips)))]
                t = int(rng.integers(1, clip.frames.shape[0]))
                flip = bool(cfg.hflip and rng.random() < 0.5)
                rot = int(rng.integers(4)) if cfg.rot90 else 0
                reverse = bool(cfg.time_reverse and rng.random() < 0.5)
                shift = (0, 0)
                if cfg.max_shift:
                    shift = tuple(int(v) for v in rng.integers(-cfg.max_shift, cfg.max_shift + 1, 2))
                clip = augment(clip, flip, rot, reverse, shift)
                loss, info = window_loss(clip, t, params, cfg, trace=trace)
                infos.append(info)
                total = loss if total is None else total + loss
            total = total * (1.0 / cfg.batch_size)
        grads = T.backward(tape, total)
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if cfg.grad_clip > 0 and norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        opt.step(grads, lr)
        record = {
            "iter": it,
            "lr": lr,
            "loss": total.item(),
            "pos": float(np.mean([i["pos"] for i in infos])),
            "neg": float(np.mean([i["neg"] for i in infos])),
            "matched": int(sum(i["matched"] for i in infos)),
            "grad_norm": norm,
        }
        if log is not None:
            log.write(json.dumps(record) + "\n")
        if on_step is not None:
            on_step(it, record)
    return params


def train_to_files(cfg: RunConfig, clips: list[Clip], out_dir: Path) -> Params:
    from .frame import save_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.jsonl", "w") as log:
        params = train(cfg, clips, log=log)
    save_checkpoint(out_dir / "model.ckpt", params)
    return params

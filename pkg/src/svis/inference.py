"""Online inference: model → binary masks → tracker → video-level tracks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Clip, rle_decode, rle_encode, write_image
from .decoder import binarize_masks, slot_index_image
from .evaluation import APReport, count_identity_switches, evaluate_ap
from .layers import Params
from .model import segment_video
from .tracker import VideoTracker


@dataclass
class VideoResult:
    tracks: list[dict]
    slot_images: list[np.ndarray]  # per frame, slot index + 1 (0 = background)
    num_frames: int
    size: tuple[int, int]


def infer_video(frames, params: Params, cfg: RunConfig, trace=None) -> VideoResult:
    """Frames are consumed strictly in order; each frame's output is final once emitted."""
    tracker = VideoTracker(cfg.iou_threshold, cfg.t_gone)
    slot_images = []
    size = None
    for probs, masks in segment_video(frames, params, cfg.stack(), trace):
        binary = binarize_masks(masks)
        size = binary.shape[1:]
        tracker.update(probs, binary)
        slot_images.append(slot_index_image(binary))
    return VideoResult(tracker.tracks(), slot_images, len(slot_images), tuple(size or (0, 0)))


def tracks_to_json(name: str, result: VideoResult) -> dict:
    h, w = result.size
    empty = {"size": [h, w], "counts": [h * w]}
    return {
        "video": name,
        "height": h,
        "width": w,
        "num_frames": result.num_frames,
        "tracks": [
            {
                "track_id": tr["track_id"],
                "category": tr["label"],
                "score": tr["score"],
                "segmentations": [rle_encode(m) if m is not None else empty for m in tr["masks"]],
            }
            for tr in result.tracks
        ],
    }


def tracks_from_json(doc: dict) -> list[dict]:
    out = []
    for tr in doc["tracks"]:
        masks = [rle_decode(s) for s in tr["segmentations"]]
        out.append({
            "track_id": tr["track_id"],
            "label": tr["category"],
            "score": tr["score"],
            "masks": [m if m.any() else None for m in masks],
        })
    return out


def write_result(out_dir: Path, name: str, result: VideoResult) -> None:
    clip_dir = Path(out_dir) / name
    clip_dir.mkdir(parents=True, exist_ok=True)
    (clip_dir / "tracks.json").write_text(json.dumps(tracks_to_json(name, result)))
    for t, img in enumerate(result.slot_images):
        write_image(clip_dir / f"mask_{t:03d}.pgm", img / 255.0)


def evaluate_clips(clips: list[Clip], params: Params, cfg: RunConfig) -> tuple[APReport, int]:
    """AP report and total identity switches over ``clips``."""
    preds, gts = {}, {}
    switches = 0
    for clip in clips:
        res = infer_video(clip.frames, params, cfg)
        preds[clip.name] = res.tracks
        gts[clip.name] = clip.ann
        switches += count_identity_switches(res.tracks, clip.ann)
    return evaluate_ap(preds, gts, interp_points=cfg.interp_points), switches

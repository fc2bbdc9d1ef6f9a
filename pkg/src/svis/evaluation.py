"""Video-level average precision with spatio-temporal mask IoU, plus identity-switch counting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import VideoAnnotations

DEFAULT_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)


@dataclass
class APReport:
    ap: float
    ap50: float
    ap75: float
    ar1: float
    ar10: float

    def row(self) -> str:
        return " ".join(f"{100 * v:5.1f}" for v in (self.ap, self.ap50, self.ap75, self.ar1, self.ar10))

    @staticmethod
    def header() -> str:
        return "   AP  AP50  AP75   AR1  AR10"


def _stack(masks: list, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros((len(masks),) + shape, dtype=bool)
    for t, m in enumerate(masks):
        if m is not None:
            out[t] = m
    return out


def video_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Summed per-frame intersections over summed per-frame unions; ``[T, H, W]`` each."""
    union = np.logical_or(pred, gt).sum()
    return float(np.logical_and(pred, gt).sum() / union) if union else 0.0


def _interp_ap(tp: np.ndarray, n_gt: int, points: int) -> float:
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, points)
    idx = np.searchsorted(recall, grid, side="left")
    return float(np.mean([envelope[i] if i < recall.size else 0.0 for i in idx]))


def evaluate_ap(predictions: dict[str, list[dict]], ground_truth: dict[str, VideoAnnotations],
                iou_thresholds=DEFAULT_THRESHOLDS, interp_points: int = 101) -> APReport:
    """Class-averaged video AP / AR.

    ``predictions[video]`` is a list of tracks ``{"label", "score", "masks"}`` where
    ``masks[t]`` is a boolean mask or ``None`` for frames the track is absent.
    Predictions are matched greedily to ground truth in descending score order
    (ties broken by content, so input order never matters).
    """
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    videos = sorted(ground_truth)
    classes = sorted({int(c) for v in videos for c in ground_truth[v].classes})
    if not classes:
        return APReport(0.0, 0.0, 0.0, 0.0, 0.0)

    ap = np.zeros((len(classes), len(thresholds)))
    ar = {1: np.zeros_like(ap), 10: np.zeros_like(ap)}
    for ci, c in enumerate(classes):
        dets = []  # (sort key, video, ious against gt of class c)
        n_gt = 0
        for vi, v in enumerate(videos):
            ann = ground_truth[v]
            shape = ann.masks.shape[2:]
            gts = [ann.masks[:, k] for k in range(len(ann.ids)) if ann.classes[k] == c]
            n_gt += len(gts)
            for tr in predictions.get(v, []):
                if int(tr["label"]) != c:
                    continue
                pm = _stack(tr["masks"], shape)
                ious = np.asarray([video_iou(pm, g) for g in gts])
                key = (-float(tr["score"]), vi, np.packbits(pm).tobytes())
                dets.append((key, vi, ious))
        dets.sort(key=lambda d: d[0])
        for ti, thr in enumerate(thresholds):
            matched: dict[int, set] = {}
            per_video_rank: dict[int, int] = {}
            tp = np.zeros(len(dets))
            hits_at = {1: 0, 10: 0}
            for di, (_, vi, ious) in enumerate(dets):
                rank = per_video_rank.get(vi, 0)
                per_video_rank[vi] = rank + 1
                used = matched.setdefault(vi, set())
                best, best_iou = -1, -1.0
                for g, iou in enumerate(ious):
                    if g in used or iou < thr:
                        continue
                    if iou > best_iou:
                        best, best_iou = g, iou
                if best >= 0:
                    used.add(best)
                    tp[di] = 1
                    for k in hits_at:
                        if rank < k:
                            hits_at[k] += 1
            ap[ci, ti] = _interp_ap(tp, n_gt, interp_points)
            for k in ar:
                ar[k][ci, ti] = hits_at[k] / n_gt if n_gt else float("nan")

    def col(a, thr):
        i = int(np.argmin(np.abs(thresholds - thr)))
        return float(np.nanmean(a[:, i])) if np.isclose(thresholds[i], thr) else float("nan")

    return APReport(float(np.nanmean(ap)), col(ap, 0.5), col(ap, 0.75),
                    float(np.nanmean(ar[1])), float(np.nanmean(ar[10])))


def count_identity_switches(tracks: list[dict], ann: VideoAnnotations, iou_threshold: float = 0.5) -> int:
    """Times a ground-truth instance's covering track changes between frames where it is covered.

    A track covers an instance at frame t when their per-frame mask IoU exceeds
    ``iou_threshold``; frames with no covering track are skipped.
    """
    switches = 0
    for k in range(len(ann.ids)):
        last = None
        for t in range(ann.num_frames):
            g = ann.masks[t, k]
            if not g.any():
                continue
            best, best_iou = None, iou_threshold
            for tr in tracks:
                m = tr["masks"][t]
                if m is None:
                    continue
                union = np.logical_or(m, g).sum()
                iou = np.logical_and(m, g).sum() / union if union else 0.0
                if iou > best_iou:
                    best, best_iou = tr["track_id"], iou
            if best is None:
                continue
            if last is not None and best != last:
                switches += 1
            last = best
    return switches

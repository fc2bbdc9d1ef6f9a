"""Online identity maintenance: slot index is identity, with an IoU override for slot swaps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask_iou: shapes {a.shape} and {b.shape} differ")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class SlotResult:
    slot: int
    active: bool
    label: int  # 1..C, or 0 for the empty class
    confidence: float
    mask: np.ndarray
    track_id: int | None


@dataclass
class FrameResult:
    slots: list[SlotResult]

    def active(self) -> list[SlotResult]:
        return [s for s in self.slots if s.active]


@dataclass
class TrackState:
    iou_threshold: float = 0.5
    t_gone: int = 5
    slot_to_track: dict[int, int] = field(default_factory=dict)
    last_masks: dict[int, np.ndarray] = field(default_factory=dict)  # slot -> mask at t-1
    last_tracks: dict[int, int] = field(default_factory=dict)  # slot -> track id at t-1
    missing: dict[int, int] = field(default_factory=dict)  # track id -> consecutive inactive frames
    next_track_id: int = 1


def frame_slots(class_probs: np.ndarray, binary_masks: np.ndarray) -> list[SlotResult]:
    """Per-slot label, confidence and activity; a slot is active when its argmax class
    is not empty and its binary mask has at least one pixel."""
    class_probs = np.asarray(class_probs)
    n_cls = class_probs.shape[1] - 1
    out = []
    for i in range(class_probs.shape[0]):
        label = int(class_probs[i].argmax()) + 1
        if label == n_cls + 1:
            label = 0
        conf = float(class_probs[i, :n_cls].max())
        mask = np.asarray(binary_masks[i], dtype=bool)
        out.append(SlotResult(i, label != 0 and bool(mask.any()), label, conf, mask, None))
    return out


def associate(state: TrackState, slots: list[SlotResult]) -> tuple[TrackState, FrameResult]:
    """Assign track ids to the active slots of one frame and advance the state.

    1. Pairs (current slot i, previous slot j) with IoU above the threshold
       inherit j's track, greedily by descending IoU, each side used once.
    2. Remaining active slots keep their own slot's current track.
    3. Anything left opens a new track.
    """
    active = [s for s in slots if s.active]
    pairs = []
    for s in active:
        for j, prev in state.last_masks.items():
            iou = mask_iou(s.mask, prev)
            if iou > state.iou_threshold:
                pairs.append((-iou, s.slot, j))
    pairs.sort()
    taken_cur, taken_prev, used_tracks = set(), set(), set()
    assigned: dict[int, int] = {}
    for _, i, j in pairs:
        if i in taken_cur or j in taken_prev:
            continue
        tid = state.last_tracks[j]
        if tid in used_tracks:
            continue
        assigned[i] = tid
        taken_cur.add(i)
        taken_prev.add(j)
        used_tracks.add(tid)
    for s in active:
        if s.slot in assigned:
            continue
        tid = state.slot_to_track.get(s.slot)
        if tid is not None and tid not in used_tracks:
            assigned[s.slot] = tid
            used_tracks.add(tid)
    for s in active:
        if s.slot not in assigned:
            assigned[s.slot] = state.next_track_id
            used_tracks.add(state.next_track_id)
            state.next_track_id += 1

    for s in slots:
        s.track_id = assigned.get(s.slot) if s.active else None

    # every active slot now owns its track; drop slots that lost theirs to an override
    for slot, tid in list(state.slot_to_track.items()):
        if tid in used_tracks and assigned.get(slot) != tid:
            del state.slot_to_track[slot]
    state.slot_to_track.update(assigned)

    live = set(assigned.values())
    for tid in set(state.slot_to_track.values()) | set(state.missing):
        state.missing[tid] = 0 if tid in live else state.missing.get(tid, 0) + 1
    for tid, gone in list(state.missing.items()):
        if gone >= state.t_gone:
            del state.missing[tid]
            for slot in [k for k, v in state.slot_to_track.items() if v == tid]:
                del state.slot_to_track[slot]

    state.last_masks = {s.slot: s.mask for s in active}
    state.last_tracks = {s.slot: assigned[s.slot] for s in active}
    return state, FrameResult(slots)


class VideoTracker:
    """Accumulates per-frame associations into video-level tracks."""

    def __init__(self, iou_threshold: float = 0.5, t_gone: int = 5):
        self.state = TrackState(iou_threshold=iou_threshold, t_gone=t_gone)
        self.frames: list[FrameResult] = []

    def update(self, class_probs: np.ndarray, binary_masks: np.ndarray) -> FrameResult:
        self.state, result = associate(self.state, frame_slots(class_probs, binary_masks))
        self.frames.append(result)
        return result

    def tracks(self) -> list[dict]:
        """One record per track: label (most frequent per-frame label), mean confidence, per-frame masks."""
        n = len(self.frames)
        by_id: dict[int, dict] = {}
        for t, fr in enumerate(self.frames):
            for s in fr.active():
                rec = by_id.setdefault(s.track_id, {"labels": [], "confs": [], "masks": [None] * n})
                rec["labels"].append(s.label)
                rec["confs"].append(s.confidence)
                rec["masks"][t] = s.mask
        out = []
        for tid in sorted(by_id):
            rec = by_id[tid]
            labels, counts = np.unique(rec["labels"], return_counts=True)
            out.append({
                "track_id": tid,
                "label": int(labels[counts.argmax()]),
                "score": float(np.mean(rec["confs"])),
                "masks": rec["masks"],
            })
        return out

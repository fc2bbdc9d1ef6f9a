"""Two-frame ground-truth assignment and the set-prediction training loss."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossWeights
from .model import FramePrediction
from .tensor import ContractError, Tensor

DICE_SMOOTH = 1e-6
LOG_FLOOR = 1e-12
TIE_TOL = 1e-12
BRUTE_FORCE_MAX_SLOTS = 8


@dataclass
class GroundTruthFrame:
    masks: np.ndarray  # bool [K, H, W], pairwise disjoint
    classes: np.ndarray  # int [K], labels in 1..C
    ids: np.ndarray  # int [K], stable across the clip

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.classes = np.asarray(self.classes, dtype=int).reshape(-1)
        self.ids = np.asarray(self.ids, dtype=int).reshape(-1)
        k = len(self.ids)
        if self.masks.ndim != 3 or self.masks.shape[0] != k or len(self.classes) != k:
            raise ContractError(f"ground truth: {self.masks.shape} masks, {len(self.classes)} classes, {k} ids")
        if len(set(self.ids.tolist())) != k:
            raise ContractError("ground truth: duplicate instance ids in one frame")

    @property
    def count(self) -> int:
        return len(self.ids)

    def index_of(self, instance_id: int) -> int | None:
        hits = np.nonzero(self.ids == instance_id)[0]
        return int(hits[0]) if len(hits) else None


@dataclass
class Assignment:
    """Slot chosen for each matched ground-truth instance (column order of the similarity matrix)."""

    slots: np.ndarray  # int [K]
    ids: np.ndarray  # int [K]
    total: float

    @property
    def matched_count(self) -> int:
        return len(self.slots)

    def slot_for(self, instance_id: int) -> int | None:
        hits = np.nonzero(self.ids == instance_id)[0]
        return int(self.slots[hits[0]]) if len(hits) else None

    def unmatched(self, num_slots: int) -> list[int]:
        used = set(self.slots.tolist())
        return [s for s in range(num_slots) if s not in used]


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Smoothed Dice coefficient ``2 sum(p g) / (sum p^2 + sum g^2)`` of a soft and a binary mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"dice: shapes {pred.shape} and {gt.shape} differ")
    return float((2.0 * (pred * gt).sum() + DICE_SMOOTH) / ((pred * pred).sum() + (gt * gt).sum() + DICE_SMOOTH))


def dice_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable Dice over the trailing two axes; ``pred[..., H, W]`` against binary ``gt``."""
    if pred.shape != gt.shape:
        raise T.ShapeError(f"dice: shapes {list(pred.shape)} and {list(gt.shape)} differ")
    g = Tensor(np.asarray(gt, dtype=np.float64))
    axes = (-2, -1)
    inter = (pred * g).sum(axis=axes)
    num = inter * 2.0 + DICE_SMOOTH
    den = (pred * pred).sum(axis=axes) + Tensor((g.data * g.data).sum(axis=axes) + DICE_SMOOTH)
    return num / den


def similarity_matrix(pred_t: FramePrediction, pred_prev: FramePrediction | None, gt_t: GroundTruthFrame,
                      gt_prev: GroundTruthFrame | None) -> tuple[np.ndarray, np.ndarray]:
    """Joint mask x class similarity of every slot against every ground-truth instance.

    Columns are the instances present at t (in ``gt_t`` order) followed by those
    present only at t-1. Each frame's terms are used only where the instance is
    present in that frame. Returns ``(sim[L, K], ids[K])``.
    """
    probs_t = pred_t.class_probs.data
    masks_t = pred_t.masks.data
    slots = probs_t.shape[0]
    ids = list(gt_t.ids.tolist())
    if gt_prev is not None:
        if pred_prev is None:
            raise ContractError("similarity_matrix: previous ground truth given without previous prediction")
        ids += [i for i in gt_prev.ids.tolist() if i not in set(gt_t.ids.tolist())]
    frames = [(probs_t, masks_t, gt_t)]
    if gt_prev is not None:
        frames.append((pred_prev.class_probs.data, pred_prev.masks.data, gt_prev))
    for _, m, g in frames:
        if m.shape[1:] != g.masks.shape[1:]:
            raise T.ShapeError(f"similarity_matrix: mask size {m.shape[1:]} vs ground truth {g.masks.shape[1:]}")

    sim = np.zeros((slots, len(ids)))
    for col, iid in enumerate(ids):
        inter = np.zeros(slots)
        pred_sq = np.zeros(slots)
        gt_sq = 0.0
        cls = np.zeros(slots)
        for probs, masks, g in frames:
            k = g.index_of(iid)
            if k is None:
                continue
            c = int(g.classes[k])
            if c <= 0:
                continue  # empty ground-truth class gates the entry to zero
            gm = g.masks[k].astype(np.float64)
            inter += (masks * gm).sum(axis=(1, 2))
            pred_sq += (masks * masks).sum(axis=(1, 2))
            gt_sq += gm.sum()
            cls += probs[:, c - 1]
        mask_sim = (2.0 * inter + DICE_SMOOTH) / (pred_sq + gt_sq + DICE_SMOOTH)
        sim[:, col] = np.where(cls > 0, mask_sim * cls, 0.0)
    return sim, np.asarray(ids, dtype=int)


# --------------------------------------------------------------------------
# assignment


def _kuhn_munkres(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of each row to a distinct column (rows <= cols)."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j] = row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    cols = np.zeros(n, dtype=int)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols


def _best(sim: np.ndarray, gts: list[int], slots: list[int]) -> tuple[float, list[int]]:
    if not gts:
        return 0.0, []
    sub = sim[np.ix_(slots, gts)].T  # rows = gts
    cols = _kuhn_munkres(-sub)
    chosen = [slots[c] for c in cols]
    return _total(sim, chosen, gts), chosen


def _total(sim: np.ndarray, chosen: list[int], gts: list[int]) -> float:
    total = 0.0
    for s, g in zip(chosen, gts):
        total += sim[s, g]
    return total


def hungarian_assign(sim: np.ndarray, ids: np.ndarray | None = None) -> Assignment:
    """Maximum-similarity injection of ground-truth columns into slot rows.

    Ties are broken towards the lexicographically smallest slot sequence taken
    in column order (lowest slot for the first instance, then the next, ...).
    """
    sim = np.asarray(sim, dtype=np.float64)
    slots_n, k = sim.shape
    if k > slots_n:
        raise ContractError(f"hungarian_assign: {k} ground-truth instances exceed {slots_n} slots")
    ids = np.arange(k) if ids is None else np.asarray(ids, dtype=int)
    remaining_slots = list(range(slots_n))
    value, ref = _best(sim, list(range(k)), remaining_slots)
    tol = TIE_TOL * max(1.0, abs(value))
    chosen: list[int] = []
    for g in range(k):
        rest = list(range(g + 1, k))
        pick = ref[0]
        for s in remaining_slots:
            if s >= pick:
                break
            others = [x for x in remaining_slots if x != s]
            sub_value, sub_ref = _best(sim, rest, others)
            if sim[s, g] + sub_value >= value - tol:
                pick, ref = s, [s] + sub_ref
                break
        chosen.append(pick)
        remaining_slots.remove(pick)
        value -= sim[pick, g]
        ref = ref[1:]
    return Assignment(np.asarray(chosen, dtype=int), ids, _total(sim, chosen, list(range(k))))


def brute_force_assign(sim: np.ndarray, ids: np.ndarray | None = None) -> Assignment:
    """Exhaustive search over injections, same tie-break as :func:`hungarian_assign`."""
    sim = np.asarray(sim, dtype=np.float64)
    slots_n, k = sim.shape
    if slots_n > BRUTE_FORCE_MAX_SLOTS:
        raise ContractError(f"brute_force_assign refuses {slots_n} slots (limit {BRUTE_FORCE_MAX_SLOTS})")
    if k > slots_n:
        raise ContractError(f"brute_force_assign: {k} ground-truth instances exceed {slots_n} slots")
    ids = np.arange(k) if ids is None else np.asarray(ids, dtype=int)
    gts = list(range(k))
    candidates = list(itertools.permutations(range(slots_n), k))
    totals = [_total(sim, list(c), gts) for c in candidates]
    best = max(totals)
    tol = TIE_TOL * max(1.0, abs(best))
    for c, tot in zip(candidates, totals):
        if tot >= best - tol:
            return Assignment(np.asarray(c, dtype=int), ids, tot)
    raise AssertionError("unreachable")


# --------------------------------------------------------------------------
# loss


def loss_terms(pred: FramePrediction, gt: GroundTruthFrame, assignment: Assignment, w: LossWeights,
               aux: Tensor | None = None) -> dict[str, Tensor]:
    """``{"pos", "neg", "aux", "total"}`` for one frame under a fixed assignment.

    A slot is positive when its assigned instance is present in ``gt``; every
    other slot (including slots matched to an instance absent from this frame)
    is supervised towards the empty class.
    """
    probs, masks = pred.class_probs, pred.masks
    slots_n, n_cls = probs.shape
    pos_slots, pos_gt = [], []
    for k, iid in enumerate(gt.ids.tolist()):
        s = assignment.slot_for(iid)
        if s is not None:
            pos_slots.append(s)
            pos_gt.append(k)
    if pos_slots:
        sl = np.asarray(pos_slots)
        d = dice_tensor(masks[sl], gt.masks[pos_gt])
        p_true = probs[sl, gt.classes[pos_gt] - 1]
        pos = -(d * w.k_mask + T.log(T.clamp_min(p_true, LOG_FLOOR)) * w.k_cls).sum()
    else:
        pos = Tensor(0.0)
    neg_slots = np.asarray([s for s in range(slots_n) if s not in set(pos_slots)], dtype=int)
    if len(neg_slots):
        neg = -T.log(T.clamp_min(probs[neg_slots, n_cls - 1], LOG_FLOOR)).sum()
    else:
        neg = Tensor(0.0)
    aux = aux if aux is not None else Tensor(0.0)
    total = pos * w.lambda_inst + neg * (1.0 - w.lambda_inst) + aux * w.lambda_aux
    return {"pos": pos, "neg": neg, "aux": aux, "total": total}


def total_loss(pred: FramePrediction, gt: GroundTruthFrame, assignment: Assignment, w: LossWeights,
               aux: Tensor | None = None) -> Tensor:
    return loss_terms(pred, gt, assignment, w, aux)["total"]

"""Synthetic moving-shape videos, run-length mask encoding and the on-disk dataset layout.

Layout::

    root/manifest.json           {"clips": [{"name", "split", "num_frames"}], "classes": [...], ...}
    root/<clip>/frame_000.ppm    binary 8-bit RGB
    root/<clip>/annotations.json {"height", "width", "num_frames", "instances": [
                                    {"id", "category", "segmentations": [rle | null, ...]}]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .matching import GroundTruthFrame
from .tensor import ContractError

SHAPES = ("rectangle", "disk", "triangle")
PALETTES = ("random", "class")
CLASS_COLORS = np.array([[0.9, 0.35, 0.3], [0.35, 0.85, 0.35], [0.35, 0.45, 0.95]])


@dataclass(frozen=True)
class ClipSpec:
    num_frames: int = 8
    size: int = 64
    min_instances: int = 1
    max_instances: int = 3
    shapes: tuple[str, ...] = SHAPES
    speed: tuple[float, float] = (0.5, 2.0)  # pixels per frame
    extent: tuple[float, float] = (7.0, 12.0)  # half-size / radius in pixels
    occlusion: bool = True
    entry_exit: bool = False
    noise: float = 0.0  # stddev of per-pixel Gaussian noise
    palette: str = "random"  # "random" colours, or "class": one colour family per shape
    max_slots: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.max_instances > self.max_slots:
            raise ContractError(f"{self.max_instances} instances exceed the {self.max_slots} slots")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ContractError("need 0 <= min_instances <= max_instances")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ContractError(f"unknown shapes {sorted(unknown)}; choose from {SHAPES}")
        if not 0 < self.extent[0] <= self.extent[1] or 2 * self.extent[1] >= self.size:
            raise ContractError(f"shape extent {self.extent} does not fit a {self.size}px canvas")
        if self.palette not in PALETTES:
            raise ContractError(f"unknown palette {self.palette!r}; choose from {PALETTES}")


@dataclass
class VideoAnnotations:
    ids: np.ndarray  # [N]
    classes: np.ndarray  # [N], 1..C
    masks: np.ndarray  # bool [T, N, H, W], visible pixels only

    @property
    def num_frames(self) -> int:
        return self.masks.shape[0]

    def present(self, t: int) -> np.ndarray:
        return self.masks[t].reshape(len(self.ids), -1).any(axis=1)

    def frame(self, t: int, stride: int = 1) -> GroundTruthFrame:
        """Ground truth of the instances visible at frame ``t``, optionally block-downsampled."""
        keep = self.present(t)
        masks = self.masks[t][keep]
        if stride > 1:
            k, h, w = masks.shape
            masks = masks.reshape(k, h // stride, stride, w // stride, stride).mean(axis=(2, 4)) >= 0.5
        return GroundTruthFrame(masks, self.classes[keep], self.ids[keep])

    def hflip(self) -> "VideoAnnotations":
        return VideoAnnotations(self.ids, self.classes, self.masks[..., ::-1].copy())

    def rot90(self, k: int) -> "VideoAnnotations":
        """Rotate every mask by ``k`` quarter turns, matching ``np.rot90(frame, k)``."""
        return VideoAnnotations(self.ids, self.classes, np.rot90(self.masks, k, axes=(2, 3)).copy())

    def reversed(self) -> "VideoAnnotations":
        return VideoAnnotations(self.ids, self.classes, self.masks[::-1].copy())


@dataclass
class _Mover:
    shape: str
    center: np.ndarray
    velocity: np.ndarray
    extent: float
    color: np.ndarray
    aspect: float = 1.0
    path: list = field(default_factory=list)


def _rasterize(shape: str, cx: float, cy: float, ext: float, aspect: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "rectangle":
        return (np.abs(dx) <= ext) & (np.abs(dy) <= ext * aspect)
    if shape == "disk":
        return dx * dx + dy * dy <= ext * ext
    # upright equilateral triangle inscribed in a circle of radius ext
    h = 1.5 * ext
    top = cy - ext
    rel = (ys - top) / h  # 0 at apex, 1 at base
    half_width = rel * ext * np.sqrt(3.0)
    return (rel >= 0) & (rel <= 1) & (np.abs(dx) <= half_width)


def _step(m: _Mover, size: int, bounce: bool) -> None:
    m.center = m.center + m.velocity
    if not bounce:
        return
    for axis, ext in ((0, m.extent), (1, m.extent * (m.aspect if m.shape == "rectangle" else 1.0))):
        lo, hi = ext, size - ext
        if m.center[axis] < lo:
            m.center[axis] = 2 * lo - m.center[axis]
            m.velocity[axis] = -m.velocity[axis]
        elif m.center[axis] > hi:
            m.center[axis] = 2 * hi - m.center[axis]
            m.velocity[axis] = -m.velocity[axis]


def _sample_movers(spec: ClipSpec, rng: np.random.Generator) -> list[_Mover]:
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    movers = []
    for _ in range(n):
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        ext = float(rng.uniform(*spec.extent))
        aspect = float(rng.uniform(0.6, 1.0)) if shape == "rectangle" else 1.0
        margin = ext if not spec.entry_exit else -ext
        center = rng.uniform(margin, spec.size - margin, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(*spec.speed)
        velocity = speed * np.array([np.cos(angle), np.sin(angle)])
        color = rng.uniform(0.35, 1.0, size=3)
        if spec.palette == "class":
            color = np.clip(CLASS_COLORS[SHAPES.index(shape)] * rng.uniform(0.75, 1.05) + rng.uniform(-0.05, 0.05, 3), 0, 1)
        movers.append(_Mover(shape, center, velocity, ext, color, aspect))
    return movers


def _render(movers: list[_Mover], spec: ClipSpec) -> tuple[np.ndarray, np.ndarray]:
    t_n, s = spec.num_frames, spec.size
    full = np.zeros((t_n, len(movers), s, s), dtype=bool)
    for i, m in enumerate(movers):
        for t, (cx, cy) in enumerate(m.path):
            full[t, i] = _rasterize(m.shape, cx, cy, m.extent, m.aspect, s)
    visible = full.copy()
    for i in range(len(movers)):
        for j in range(i + 1, len(movers)):
            visible[:, i] &= ~full[:, j]
    return full, visible


def generate_clip(spec: ClipSpec) -> tuple[np.ndarray, VideoAnnotations]:
    """Frames ``[T, H, W, 3]`` in [0, 1] (8-bit quantised) and visible-pixel annotations.

    Later instances are painted over earlier ones. Without ``occlusion`` the
    trajectories are resampled until no two shapes ever overlap.
    """
    rng = np.random.default_rng(spec.seed)
    for _ in range(200):
        movers = _sample_movers(spec, rng)
        for m in movers:
            m.path = []
            for _t in range(spec.num_frames):
                m.path.append(m.center.copy())
                _step(m, spec.size, bounce=not spec.entry_exit)
        full, visible = _render(movers, spec)
        if spec.occlusion or not (full.sum(axis=1) > 1).any():
            break
    else:
        raise ContractError("could not place non-overlapping shapes; relax the spec")

    s = spec.size
    background = np.full((s, s, 3), 0.1)
    frames = np.repeat(background[None], spec.num_frames, axis=0)
    for i, m in enumerate(movers):
        frames[visible[:, i]] = m.color
    if spec.noise > 0:
        frames = frames + rng.normal(0.0, spec.noise, frames.shape)
    frames = np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0

    ids = np.arange(1, len(movers) + 1)
    classes = np.asarray([SHAPES.index(m.shape) + 1 for m in movers], dtype=int)
    return frames, VideoAnnotations(ids, classes, visible)


# --------------------------------------------------------------------------
# run-length encoding


def rle_encode(mask: np.ndarray) -> dict:
    """Alternating run lengths in row-major order, starting with a (possibly empty) run of zeros."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": list(mask.shape), "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    values = np.zeros(len(rle["counts"]), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle["counts"])
    if flat.size != h * w:
        raise ContractError(f"RLE counts sum to {flat.size}, expected {h * w}")
    return flat.reshape(h, w)


# --------------------------------------------------------------------------
# disk I/O


def write_image(path: Path, pixels: np.ndarray) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr.squeeze()).save(path)


def read_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def annotations_to_json(ann: VideoAnnotations) -> dict:
    t_n, _, h, w = ann.masks.shape
    instances = []
    for k, iid in enumerate(ann.ids.tolist()):
        segs = [rle_encode(ann.masks[t, k]) if ann.masks[t, k].any() else None for t in range(t_n)]
        instances.append({"id": int(iid), "category": int(ann.classes[k]), "segmentations": segs})
    return {"height": h, "width": w, "num_frames": t_n, "instances": instances}


def annotations_from_json(doc: dict) -> VideoAnnotations:
    t_n, h, w = doc["num_frames"], doc["height"], doc["width"]
    insts = doc["instances"]
    masks = np.zeros((t_n, len(insts), h, w), dtype=bool)
    for k, inst in enumerate(insts):
        for t, seg in enumerate(inst["segmentations"]):
            if seg is not None:
                masks[t, k] = rle_decode(seg)
    ids = np.asarray([i["id"] for i in insts], dtype=int)
    classes = np.asarray([i["category"] for i in insts], dtype=int)
    return VideoAnnotations(ids, classes, masks)


def write_clip(clip_dir: Path, frames: np.ndarray, ann: VideoAnnotations) -> None:
    clip_dir.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(frames):
        write_image(clip_dir / f"frame_{t:03d}.ppm", img)
    (clip_dir / "annotations.json").write_text(json.dumps(annotations_to_json(ann)))


def frame_paths(clip_dir: Path) -> list[Path]:
    return sorted(p for p in Path(clip_dir).iterdir() if p.suffix in (".ppm", ".pgm"))


def read_frames(clip_dir: Path) -> np.ndarray:
    return np.stack([read_image(p) for p in frame_paths(clip_dir)])


def read_clip(clip_dir: Path) -> tuple[np.ndarray, VideoAnnotations]:
    clip_dir = Path(clip_dir)
    doc = json.loads((clip_dir / "annotations.json").read_text())
    return read_frames(clip_dir), annotations_from_json(doc)


@dataclass
class Clip:
    name: str
    split: str
    frames: np.ndarray
    ann: VideoAnnotations


def make_benchmark(n_train: int = 32, n_test: int = 16, seed: int = 0, **spec_kwargs) -> list[Clip]:
    """Training clips use seeds ``seed*10000 + i``; held-out clips continue past them."""
    clips = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        spec = ClipSpec(seed=seed * 10000 + i, **spec_kwargs)
        frames, ann = generate_clip(spec)
        clips.append(Clip(f"clip_{i:04d}", split, frames, ann))
    return clips


def write_dataset(root: Path, clips: list[Clip]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for c in clips:
        write_clip(root / c.name, c.frames, c.ann)
    manifest = {
        "classes": list(SHAPES),
        "clips": [{"name": c.name, "split": c.split, "num_frames": int(c.frames.shape[0])} for c in clips],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def read_manifest(root: Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def read_dataset(root: Path, split: str | None = None) -> list[Clip]:
    root = Path(root)
    out = []
    for entry in read_manifest(root)["clips"]:
        if split is not None and entry["split"] != split:
            continue
        frames, ann = read_clip(root / entry["name"])
        out.append(Clip(entry["name"], entry["split"], frames, ann))
    return out

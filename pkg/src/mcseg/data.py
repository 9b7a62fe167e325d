"""Dataset ingestion (DAVIS directory layout), synthetic clips, folds and batching."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError
from .motion import FrameSequence, HornSchunckParams, sequence_diffs, sequence_flow_cues

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg")
CAMERA_TAGS = ("stationary", "moving", "unknown")


# ---------------------------------------------------------------- index


@dataclass
class SequenceEntry:
    name: str
    frames: List[Path]
    annotations: List[Path]
    camera_tag: str = "unknown"

    def frame_ids(self) -> List[str]:
        return [p.stem for p in self.frames]


@dataclass
class DatasetIndex:
    sequences: List[SequenceEntry]
    resolution: Tuple[int, int] = (384, 384)
    root: Optional[Path] = None

    def __post_init__(self):
        check_resolution(self.resolution)

    def names(self) -> List[str]:
        return [s.name for s in self.sequences]

    def subset(self, names: Sequence[str]) -> "DatasetIndex":
        wanted = set(names)
        return replace(self, sequences=[s for s in self.sequences if s.name in wanted])

    def stationary(self) -> "DatasetIndex":
        return replace(self, sequences=[s for s in self.sequences if s.camera_tag == "stationary"])


def check_resolution(resolution):
    h, w = resolution
    if h <= 0 or w <= 0 or h % 32 or w % 32:
        raise ConfigError(f"resolution {h}x{w} must be positive multiples of 32", field="resolution")


def _layout_dirs(root: Path) -> Tuple[Path, Path]:
    for img, ann in (("images", "annotations"), ("JPEGImages/480p", "Annotations/480p"),
                     ("JPEGImages", "Annotations")):
        if (root / img).is_dir():
            return root / img, root / ann
    raise DataError(f"{root}: no images/ directory (expected images/<seq>/NNNNN.ext)")


def scan_davis_layout(root, resolution=(384, 384), stationary: Optional[Sequence[str]] = None) -> DatasetIndex:
    """Index ``root/images/<seq>/*`` with masks from ``root/annotations/<seq>/*.png``.

    Camera tags come from ``root/meta.json`` when present; names listed in
    ``stationary`` are tagged stationary regardless.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset root does not exist")
    img_dir, ann_dir = _layout_dirs(root)
    tags: Dict[str, str] = {}
    meta_path = root / "meta.json"
    if meta_path.exists():
        tags = json.loads(meta_path.read_text()).get("camera", {})
    for name in stationary or ():
        tags[name] = "stationary"

    sequences = []
    for seq_dir in sorted(p for p in img_dir.iterdir() if p.is_dir()):
        frames = sorted(p for p in seq_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS)
        if not frames:
            continue
        ann_seq = ann_dir / seq_dir.name
        anns = sorted(ann_seq.glob("*.png")) if ann_seq.is_dir() else []
        stems = {p.stem for p in frames}
        for a in anns:
            if a.stem not in stems:
                raise DataError(f"annotation {a} has no matching frame in {seq_dir}")
        tag = tags.get(seq_dir.name, "unknown")
        if tag not in CAMERA_TAGS:
            raise DataError(f"{meta_path}: unknown camera tag {tag!r} for {seq_dir.name}")
        sequences.append(SequenceEntry(seq_dir.name, frames, anns, tag))
    if not sequences:
        raise DataError(f"{img_dir}: no sequences with frames found")
    return DatasetIndex(sequences, tuple(resolution), root)


# ---------------------------------------------------------------- folds


@dataclass
class Fold:
    index: int
    train: List[str]
    test: List[str]
    degenerate: bool = False


def make_folds(source: Union[DatasetIndex, Sequence[str]], k: int, seed: int = 0) -> List[Fold]:
    """Sequence-level k-fold partition, shuffled deterministically by ``seed``."""
    names = source.names() if isinstance(source, DatasetIndex) else list(source)
    if k < 1:
        raise ConfigError(f"fold count must be >= 1, got {k}", field="folds")
    if k > len(names):
        raise ConfigError(f"cannot make {k} folds from {len(names)} sequences", field="folds")
    if k == 1:
        return [Fold(0, list(names), list(names), degenerate=True)]
    order = np.random.default_rng(seed).permutation(len(names))
    chunks = np.array_split(order, k)
    folds = []
    for i, chunk in enumerate(chunks):
        test = sorted(names[j] for j in chunk)
        train = [n for n in names if n not in set(test)]
        folds.append(Fold(i, train, test))
    return folds


# ---------------------------------------------------------------- synthetic clips


@dataclass
class SynthSpec:
    canvas: Tuple[int, int] = (96, 96)
    shape: str = "square"
    size: int = 24
    texture: str = "noise"
    velocity: Tuple[float, float] = (2.0, 0.0)  # (x, y) px/frame
    start: Optional[Tuple[int, int]] = None  # (x, y) top-left at frame 0; drawn from seed if None
    distractor: bool = True
    camera_pan: Tuple[float, float] = (0.0, 0.0)
    frames: int = 8
    seed: int = 0

    def positions(self, start) -> List[Tuple[int, int]]:
        vx, vy = self.velocity
        return [(int(round(start[0] + vx * t)), int(round(start[1] + vy * t))) for t in range(self.frames)]


@dataclass
class SynthClip:
    name: str
    images: List[np.ndarray]  # uint8 H x W x 3
    masks: List[np.ndarray]  # uint8 H x W in {0, 1}
    spec: SynthSpec
    camera_tag: str = "stationary"

    @property
    def sequence(self) -> FrameSequence:
        return FrameSequence([im.astype(np.float32) / 255 for im in self.images], list(range(len(self.images))))


def _shape_mask(kind: str, size: int) -> np.ndarray:
    if kind == "square":
        return np.ones((size, size), bool)
    if kind == "disc":
        y, x = np.mgrid[:size, :size] + 0.5
        r = size / 2
        return (x - r) ** 2 + (y - r) ** 2 <= r * r
    raise ConfigError(f"unknown shape kind {kind!r}", field="shape")


def _validate_spec(spec: SynthSpec):
    h, w = spec.canvas
    if spec.frames < 2:
        raise ConfigError("a clip needs at least 2 frames", field="frames")
    if spec.size < 1 or spec.size > min(h, w):
        raise ConfigError(f"object size {spec.size} does not fit canvas {h}x{w}", field="size")
    if spec.texture not in ("plain", "noise"):
        raise ConfigError(f"unknown texture {spec.texture!r}", field="texture")
    _shape_mask(spec.shape, 1)


def _fits(spec: SynthSpec, start) -> bool:
    h, w = spec.canvas
    return all(0 <= x <= w - spec.size and 0 <= y <= h - spec.size for x, y in spec.positions(start))


def synth_generate(spec: SynthSpec, name: str = "synth") -> SynthClip:
    """Render a clip: textured object moving over a smooth background.

    The optional distractor is a static copy of the object; it belongs to the
    background in the ground truth.
    """
    _validate_spec(spec)
    h, w = spec.canvas
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    vx, vy = spec.velocity
    span_x = abs(vx) * (spec.frames - 1)
    span_y = abs(vy) * (spec.frames - 1)
    if spec.start is None:
        if span_x > w - size or span_y > h - size:
            raise ConfigError("object leaves the canvas for every start position", field="velocity")
        x_lo = -min(0.0, vx) * (spec.frames - 1)
        y_lo = -min(0.0, vy) * (spec.frames - 1)
        start = (int(np.ceil(x_lo)) + int(rng.integers(0, int(w - size - span_x) + 1)),
                 int(np.ceil(y_lo)) + int(rng.integers(0, int(h - size - span_y) + 1)))
        if not _fits(spec, start):
            start = (int(np.ceil(x_lo)), int(np.ceil(y_lo)))
    else:
        start = tuple(spec.start)
    if not _fits(spec, start):
        raise ConfigError(f"object leaves the {h}x{w} canvas (start {start}, velocity {spec.velocity})",
                          field="start")
    positions = spec.positions(start)

    # smooth periodic background so panning can wrap around
    noise = rng.random((h, w, 3))
    background = ndimage.gaussian_filter(noise, sigma=(6, 6, 0), mode="wrap")
    background = (background - background.min()) / max(np.ptp(background), 1e-9)
    background = 0.25 + 0.5 * background
    base = rng.uniform(0.15, 0.85, 3)
    if spec.texture == "noise":
        obj = np.clip(base + rng.uniform(-0.35, 0.35, (size, size, 3)), 0, 1)
    else:
        obj = np.broadcast_to(base, (size, size, 3)).copy()
    shape = _shape_mask(spec.shape, size)

    distractor_at = None
    if spec.distractor:
        xs = [p[0] for p in positions]
        ys = [p[1] for p in positions]
        box = (min(xs), min(ys), max(xs) + size, max(ys) + size)
        for _ in range(200):
            dx, dy = int(rng.integers(0, w - size + 1)), int(rng.integers(0, h - size + 1))
            if dx + size <= box[0] or dx >= box[2] or dy + size <= box[1] or dy >= box[3]:
                distractor_at = (dx, dy)
                break
        if distractor_at is None:
            raise ConfigError("no room for a distractor that avoids the moving object's path", field="distractor")

    images, masks = [], []
    px, py = spec.camera_pan
    for t, (x, y) in enumerate(positions):
        frame = np.roll(background, (int(round(py * t)), int(round(px * t))), axis=(0, 1)).copy()
        if distractor_at is not None:
            dx, dy = distractor_at
            region = frame[dy:dy + size, dx:dx + size]
            region[shape] = obj[shape]
        region = frame[y:y + size, x:x + size]
        region[shape] = obj[shape]
        mask = np.zeros((h, w), np.uint8)
        mask[y:y + size, x:x + size][shape] = 1
        images.append(np.round(frame * 255).astype(np.uint8))
        masks.append(mask)
    moving = px != 0 or py != 0
    return SynthClip(name, images, masks, spec, "moving" if moving else "stationary")


def synth_suite(count: int, seed: int, canvas=(96, 96), frames=8, size=24, speed=(2.0, 4.0),
                distractor=True, camera_pan=(0.0, 0.0), texture="noise", prefix="clip") -> List[SynthClip]:
    """A deterministic set of clips with random directions and speeds."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(count):
        angle = rng.uniform(0, 2 * np.pi)
        s = rng.uniform(*speed)
        spec = SynthSpec(canvas=tuple(canvas), size=size, texture=texture,
                         velocity=(round(s * np.cos(angle), 3), round(s * np.sin(angle), 3)),
                         distractor=distractor, camera_pan=tuple(camera_pan), frames=frames,
                         seed=int(rng.integers(0, 2**31 - 1)), shape=str(rng.choice(["square", "disc"])))
        clips.append(synth_generate(spec, f"{prefix}{i:03d}"))
    return clips


def write_davis_layout(root, clips: Sequence[SynthClip]) -> Path:
    """Write clips as images/<name>/NNNNN.png and annotations/<name>/NNNNN.png (0/255)."""
    root = Path(root)
    for clip in clips:
        img_dir = root / "images" / clip.name
        ann_dir = root / "annotations" / clip.name
        img_dir.mkdir(parents=True, exist_ok=True)
        ann_dir.mkdir(parents=True, exist_ok=True)
        for t, (im, m) in enumerate(zip(clip.images, clip.masks)):
            Image.fromarray(im).save(img_dir / f"{t:05d}.png")
            Image.fromarray(m * 255).save(ann_dir / f"{t:05d}.png")
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"camera": {}}
    meta.setdefault("camera", {}).update({c.name: c.camera_tag for c in clips})
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return root


# ---------------------------------------------------------------- loading and samples


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_mask(path) -> np.ndarray:
    """Any nonzero label (palette index, gray level or RGB) becomes foreground."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr.any(axis=2)
    return (arr != 0).astype(np.uint8)


def resize_rgb(img: np.ndarray, resolution) -> np.ndarray:
    h, w = resolution
    if img.shape[:2] == (h, w):
        return img
    return np.asarray(Image.fromarray(img).resize((w, h), Image.BILINEAR))


def resize_mask(mask: np.ndarray, resolution) -> np.ndarray:
    h, w = resolution
    if mask.shape == (h, w):
        return mask
    return np.asarray(Image.fromarray(mask).resize((w, h), Image.NEAREST))


@dataclass
class SampleMeta:
    sequence: str
    t: int
    fold: int = -1


@dataclass
class Sample:
    frame: np.ndarray  # 3 x H x W float32 in [0, 1]
    cue: Optional[np.ndarray]  # 3 x H x W float32, None for the single variant
    mask: np.ndarray  # H x W uint8 in {0, 1}
    meta: SampleMeta


@dataclass
class Batch:
    frame: np.ndarray
    cue: Optional[np.ndarray]
    mask: np.ndarray
    meta: List[SampleMeta]

    def __len__(self):
        return len(self.meta)


def _cues(frames: List[np.ndarray], variant: str, hs_params: Optional[HornSchunckParams]):
    if variant == "single":
        return [None] * len(frames)
    if variant == "dual_diff":
        return sequence_diffs(frames)
    if variant == "dual_flow":
        if hs_params is None:
            raise ConfigError("variant dual_flow needs Horn-Schunck parameters", field="horn_schunck")
        return sequence_flow_cues(frames, hs_params)
    raise ConfigError(f"unknown variant {variant!r}", field="variant")


def _clip_samples(name, images, masks: Dict[int, np.ndarray], variant, hs_params, fold) -> List[Sample]:
    frames = [im.astype(np.float32) / 255 for im in images]
    cues = _cues(frames, variant, hs_params)
    out = []
    for t, (f, c) in enumerate(zip(frames, cues)):
        if t not in masks:
            continue
        cue = None if c is None else np.ascontiguousarray(c.transpose(2, 0, 1), dtype=np.float32)
        out.append(Sample(np.ascontiguousarray(f.transpose(2, 0, 1)), cue, masks[t].astype(np.uint8),
                          SampleMeta(name, t, fold)))
    return out


def build_samples(source, variant: str, hs_params: Optional[HornSchunckParams] = None,
                  resolution=None, fold: int = -1, with_masks_only: bool = True) -> List[Sample]:
    """Materialize samples from a DatasetIndex or a list of SynthClip.

    Frames are resized first; motion cues are computed from the resized
    neighbours so they stay aligned with the network input grid.
    """
    if variant == "dual_flow" and hs_params is None:
        raise ConfigError("variant dual_flow needs Horn-Schunck parameters", field="horn_schunck")
    samples: List[Sample] = []
    if isinstance(source, DatasetIndex):
        res = tuple(resolution or source.resolution)
        check_resolution(res)
        for seq in source.sequences:
            images = [resize_rgb(load_rgb(p), res) for p in seq.frames]
            ids = seq.frame_ids()
            masks = {ids.index(a.stem): resize_mask(load_mask(a), res) for a in seq.annotations}
            if not with_masks_only:
                masks = {t: masks.get(t, np.zeros(res, np.uint8)) for t in range(len(images))}
            samples.extend(_clip_samples(seq.name, images, masks, variant, hs_params, fold))
    else:
        for clip in source:
            res = tuple(resolution or clip.images[0].shape[:2])
            images = [resize_rgb(im, res) for im in clip.images]
            masks = {t: resize_mask(m, res) for t, m in enumerate(clip.masks)}
            samples.extend(_clip_samples(clip.name, images, masks, variant, hs_params, fold))
    return samples


def collate(samples: Sequence[Sample]) -> Batch:
    frame = np.stack([s.frame for s in samples])
    cue = None if samples[0].cue is None else np.stack([s.cue for s in samples])
    mask = np.stack([s.mask for s in samples])
    return Batch(frame, cue, mask, [s.meta for s in samples])


def batches(source, variant: str, batch_size: int, seed: int, epoch: int,
            hs_params: Optional[HornSchunckParams] = None, resolution=None,
            shuffle: bool = True) -> Iterator[Batch]:
    """Shuffled mini-batches; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}", field="batch_size")
    if variant == "dual_flow" and hs_params is None:
        raise ConfigError("variant dual_flow needs Horn-Schunck parameters", field="horn_schunck")
    if isinstance(source, (list, tuple)) and source and isinstance(source[0], Sample):
        samples = list(source)
    else:
        samples = build_samples(source, variant, hs_params, resolution)
    order = np.random.default_rng([seed, epoch]).permutation(len(samples)) if shuffle else np.arange(len(samples))
    for start in range(0, len(samples), batch_size):
        yield collate([samples[i] for i in order[start:start + batch_size]])

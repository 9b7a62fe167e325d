"""Motion cues: absolute frame differences and Horn-Schunck optical flow.

Images are float arrays in [0, 1], either H x W (grayscale) or H x W x 3.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, NumericalError, ShapeError

FLO_MAGIC = 202021.25  # "PIEH" read as a little-endian float32


@dataclass
class FrameSequence:
    frames: List[np.ndarray]
    indices: List[int]

    def __post_init__(self):
        if len(self.frames) != len(self.indices):
            raise ShapeError("frames and indices differ in length")
        if self.frames:
            shape = self.frames[0].shape[:2]
            for f in self.frames:
                if f.shape[:2] != shape:
                    raise ShapeError(f"frame shape {f.shape[:2]} differs from {shape}")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ShapeError("frame indices must be strictly increasing")

    def __len__(self):
        return len(self.frames)


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    # (sweep, mean squared brightness-constancy residual), filled by horn_schunck
    history: List[Tuple[int, float]] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ShapeError(f"u and v must be equal 2-D grids, got {self.u.shape} and {self.v.shape}")

    @property
    def shape(self):
        return self.u.shape


@dataclass(frozen=True)
class HornSchunckParams:
    alpha: float = 1.0
    iterations: int = 200
    early_stop_delta: float = 1e-4

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}", field="alpha")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError(f"iterations must be a positive integer, got {self.iterations}", field="iterations")
        if not self.early_stop_delta >= 0:
            raise ConfigError("early_stop_delta must be nonnegative", field="early_stop_delta")


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=2) if image.ndim == 3 else image


def frame_diff(x_t: np.ndarray, x_t1: np.ndarray) -> np.ndarray:
    if np.shape(x_t) != np.shape(x_t1):
        raise ShapeError(f"frame_diff: shapes differ {np.shape(x_t)} vs {np.shape(x_t1)}")
    return np.abs(np.asarray(x_t1) - np.asarray(x_t))


def sequence_diffs(frames: Sequence[np.ndarray]) -> List[np.ndarray]:
    """One difference image per frame; the last frame uses the backward difference."""
    if len(frames) < 2:
        raise ShapeError("need at least two frames for a difference cue")
    out = [frame_diff(frames[t], frames[t + 1]) for t in range(len(frames) - 1)]
    out.append(frame_diff(frames[-2], frames[-1]))
    return out


def image_gradients(x_t: np.ndarray, x_t1: np.ndarray):
    """Horn-Schunck derivative estimates averaged over the 2x2x2 cube.

    Returns ``(I_x, I_y, I_t)`` located between pixel centers; samples beyond
    the last row/column replicate the edge.
    """
    if np.shape(x_t) != np.shape(x_t1):
        raise ShapeError(f"image_gradients: shapes differ {np.shape(x_t)} vs {np.shape(x_t1)}")
    a = np.pad(to_gray(x_t), ((0, 1), (0, 1)), mode="edge")
    b = np.pad(to_gray(x_t1), ((0, 1), (0, 1)), mode="edge")
    a00, a01, a10, a11 = a[:-1, :-1], a[:-1, 1:], a[1:, :-1], a[1:, 1:]
    b00, b01, b10, b11 = b[:-1, :-1], b[:-1, 1:], b[1:, :-1], b[1:, 1:]
    ix = 0.25 * ((a01 - a00) + (a11 - a10) + (b01 - b00) + (b11 - b10))
    iy = 0.25 * ((a10 - a00) + (a11 - a01) + (b10 - b00) + (b11 - b01))
    it = 0.25 * ((b00 - a00) + (b01 - a01) + (b10 - a10) + (b11 - a11))
    return ix, iy, it


_AVG_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0


def brightness_residual(ix, iy, it, u, v) -> np.ndarray:
    return ix * u + iy * v + it


def horn_schunck(x_t: np.ndarray, x_t1: np.ndarray, params: Optional[HornSchunckParams] = None,
                 checkpoint_every: int = 0) -> FlowField:
    """Jacobi iteration of the Horn-Schunck flow equations from zero flow.

    Stops after ``params.iterations`` sweeps, or earlier once the largest
    per-pixel update falls below ``params.early_stop_delta``. With
    ``checkpoint_every > 0`` the mean squared residual is recorded in
    ``FlowField.history`` at sweep 0 and every ``checkpoint_every`` sweeps.
    """
    params = params or HornSchunckParams()
    with np.errstate(invalid="ignore"):
        ix, iy, it = image_gradients(x_t, x_t1)
    u = np.zeros_like(ix)
    v = np.zeros_like(ix)
    with np.errstate(invalid="ignore", over="ignore"):
        denom = params.alpha ** 2 + ix * ix + iy * iy
    history = []
    if checkpoint_every:
        history.append((0, float(np.mean(brightness_residual(ix, iy, it, u, v) ** 2))))
    for sweep in range(1, int(params.iterations) + 1):
        ubar = ndimage.correlate(u, _AVG_KERNEL, mode="nearest")
        vbar = ndimage.correlate(v, _AVG_KERNEL, mode="nearest")
        with np.errstate(invalid="ignore", over="ignore"):
            common = (ix * ubar + iy * vbar + it) / denom
            u_new = ubar - ix * common
            v_new = vbar - iy * common
        if not (np.isfinite(u_new).all() and np.isfinite(v_new).all()):
            raise NumericalError(f"Horn-Schunck produced non-finite flow at iteration {sweep}")
        change = max(np.abs(u_new - u).max(), np.abs(v_new - v).max())
        u, v = u_new, v_new
        if checkpoint_every and sweep % checkpoint_every == 0:
            history.append((sweep, float(np.mean(brightness_residual(ix, iy, it, u, v) ** 2))))
        if change < params.early_stop_delta:
            break
    return FlowField(u, v, history)


# ---------------------------------------------------------------- colorization


def _color_wheel() -> np.ndarray:
    # Middlebury wheel: red-yellow-green-cyan-blue-magenta segments
    segments = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)),
                (4, (0, 255, 0), (0, 255, 255)), (11, (0, 255, 255), (0, 0, 255)),
                (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, start, end in segments:
        t = np.arange(n)[:, None] / n
        rows.append(np.array(start) * (1 - t) + np.array(end) * t)
    return np.concatenate(rows) / 255.0


_WHEEL = _color_wheel()


def flow_to_rgb(flow: FlowField) -> np.ndarray:
    """Render flow as an H x W x 3 float image; hue from direction, saturation from magnitude."""
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise ShapeError("flow_to_rgb needs a finite flow field")
    mag = np.hypot(u, v)
    scale = np.percentile(mag, 99) if mag.size else 0.0
    if scale <= 0:
        scale = mag.max() if mag.size and mag.max() > 0 else 1.0
    rad = np.clip(mag / scale, 0, 1)
    ncols = len(_WHEEL)
    angle = np.arctan2(v, u)  # (-pi, pi]
    pos = (angle + np.pi) / (2 * np.pi) * ncols
    k0 = np.floor(pos).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    frac = (pos - np.floor(pos))[..., None]
    col = (1 - frac) * _WHEEL[k0] + frac * _WHEEL[k1]
    return 1 - rad[..., None] * (1 - col)


def hue_index(flow: FlowField) -> np.ndarray:
    """Position on the color wheel in [0, 1) for each pixel (direction only)."""
    angle = np.arctan2(flow.v.astype(np.float64), flow.u.astype(np.float64))
    return ((angle + np.pi) / (2 * np.pi)) % 1.0


def flow_cue_image(x_t: np.ndarray, x_t1: np.ndarray, params: HornSchunckParams) -> np.ndarray:
    return flow_to_rgb(horn_schunck(x_t, x_t1, params))


def sequence_flow_cues(frames: Sequence[np.ndarray], params: HornSchunckParams) -> List[np.ndarray]:
    """Flow renderings per frame; the last frame uses the flow from its predecessor."""
    if len(frames) < 2:
        raise ShapeError("need at least two frames for a flow cue")
    out = [flow_cue_image(frames[t], frames[t + 1], params) for t in range(len(frames) - 1)]
    out.append(flow_cue_image(frames[-2], frames[-1], params))
    return out


# ---------------------------------------------------------------- .flo files


def write_flo(flow: FlowField, path) -> None:
    if not (np.isfinite(flow.u).all() and np.isfinite(flow.v).all()):
        raise ShapeError("refusing to write a non-finite flow field")
    h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = flow.u
    data[..., 1] = flow.v
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(data.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header", offset=len(raw))
    magic, w, h = struct.unpack_from("<fii", raw, 0)
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad .flo magic {magic!r}", offset=0)
    if w < 0 or h < 0:
        raise FormatError(f"{path}: negative dimensions {w}x{h}", offset=4)
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise FormatError(f"{path}: truncated .flo payload, expected {need} bytes", offset=len(raw))
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(data[..., 0].astype(np.float32), data[..., 1].astype(np.float32))

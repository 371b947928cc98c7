"""Control-signal extraction, first-frame transform estimation and propagation.

Coordinates follow image convention: ``x`` is the column, ``y`` the row.
Boxes are inclusive on both ends.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateScaleError, DomainError, NoObjectError
from .guide import ControlSequence

ACTIVITY_THRESHOLD = 0.05
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise DomainError(f"invalid box {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    @property
    def area(self) -> int:
        return self.width * self.height

    def iou(self, other: "BBox") -> float:
        ix = min(self.x_max, other.x_max) - max(self.x_min, other.x_min) + 1
        iy = min(self.y_max, other.y_max) - max(self.y_min, other.y_min) + 1
        inter = max(ix, 0) * max(iy, 0)
        return inter / (self.area + other.area - inter)

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[max(self.y_min, 0):self.y_max + 1, max(self.x_min, 0):self.x_max + 1] = True
        return m


@dataclass(frozen=True)
class TransformParams:
    dx: float = 0.0
    dy: float = 0.0
    sx: float = 1.0
    sy: float = 1.0

    def __post_init__(self):
        if not (self.sx > 0 and self.sy > 0):
            raise DomainError("scale factors must be positive")

    def inverse(self) -> "TransformParams":
        return TransformParams(-self.dx, -self.dy, 1.0 / self.sx, 1.0 / self.sy)

    @property
    def is_identity(self) -> bool:
        return self == TransformParams()


@dataclass
class EditSpec:
    """Either ``params`` or an explicitly ``edited_frame`` for frame 0, never both."""

    params: Optional[TransformParams] = None
    edited_frame: Optional[np.ndarray] = None
    words: tuple[str, ...] = field(default_factory=tuple)
    target_prompt: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if (self.params is None) == (self.edited_frame is None):
            raise DomainError("an edit needs exactly one of params or edited_frame")


def luminance(frames: np.ndarray) -> np.ndarray:
    """``[F, 3, H, W]`` -> ``[F, H, W]``."""
    return np.tensordot(LUMA, np.asarray(frames, dtype=np.float64), axes=([0], [1]))


def segment(frames: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return luminance(frames) >= threshold


def _gradient_magnitude(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return np.hypot(gx, gy)


def extract_control(
    frames: np.ndarray,
    kind: str = "edge",
    threshold: float = 0.5,
    pose_dir: Optional[str | Path] = None,
) -> ControlSequence:
    """Segment the foreground by luminance and turn it into a per-frame control map.

    ``edge`` marks the inner boundary ring of the foreground mask, ``sketch``
    keeps the luminance gradients inside the foreground, and ``pose`` reads
    pre-rendered skeleton rasters from ``pose_dir``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] == 0 or frames.shape[1] != 3:
        raise DomainError(f"frames must be a non-empty [F, 3, H, W] array, got {frames.shape}")
    if kind == "pose":
        if pose_dir is None:
            raise DomainError("pose control needs a directory of skeleton rasters")
        from .io import read_control_dir

        ctrl = read_control_dir(pose_dir, kind="pose")
        if len(ctrl) != frames.shape[0]:
            raise DomainError(f"{len(ctrl)} pose rasters for {frames.shape[0]} frames")
        return ctrl
    if kind not in ("edge", "sketch"):
        raise DomainError(f"unknown control kind {kind!r}")

    fg = segment(frames, threshold)
    lum = luminance(frames)
    maps = np.zeros((frames.shape[0], 1) + frames.shape[2:])
    empty = []
    for i in range(frames.shape[0]):
        if not fg[i].any():
            empty.append(i)
            continue
        source = fg[i].astype(np.float64) if kind == "edge" else lum[i] * fg[i]
        g = _gradient_magnitude(source) * fg[i]
        peak = g.max()
        if peak > 0:
            maps[i, 0] = g / peak
    if empty:
        warnings.warn(f"no foreground in frames {empty}; emitting empty control maps", stacklevel=2)
    return ControlSequence(maps, kind, tuple(empty))


def detect_bbox(frame: np.ndarray, threshold: float = ACTIVITY_THRESHOLD) -> BBox:
    frame = np.asarray(frame)
    if frame.ndim == 3:
        frame = frame[0]
    rows, cols = np.nonzero(frame > threshold)
    if rows.size == 0:
        raise NoObjectError("control frame has no active pixels")
    return BBox(int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def estimate_transform(src: BBox, edited: BBox) -> TransformParams:
    (sx0, sy0), (ex, ey) = src.center, edited.center
    if (src.width == 1 and edited.width != 1) or (src.height == 1 and edited.height != 1):
        raise DegenerateScaleError(f"cannot scale a zero-extent box {src} to {edited}")
    return TransformParams(ex - sx0, ey - sy0, edited.width / src.width, edited.height / src.height)


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.int64)


def apply_transform(frame: np.ndarray, params: TransformParams, pivot: Optional[BBox] = None) -> np.ndarray:
    """Scale the active region about its box center, then translate it.

    Resampling is nearest-neighbour by inverse mapping; anything outside the
    pivot box is treated as background and vacated pixels become 0.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if params.is_identity:
        return frame.copy()
    if pivot is None:
        try:
            pivot = detect_bbox(frame)
        except NoObjectError:
            warnings.warn("empty control frame passed through unchanged", stacklevel=2)
            return frame.copy()
    h, w = frame.shape
    cx, cy = pivot.center
    xs = np.arange(w)
    ys = np.arange(h)
    src_x = _round_half_up(cx + (xs - cx - params.dx) / params.sx)
    src_y = _round_half_up(cy + (ys - cy - params.dy) / params.sy)
    valid_x = (src_x >= pivot.x_min) & (src_x <= pivot.x_max)
    valid_y = (src_y >= pivot.y_min) & (src_y <= pivot.y_max)
    out = np.zeros_like(frame)
    sel_y, sel_x = np.nonzero(valid_y)[0], np.nonzero(valid_x)[0]
    out[np.ix_(sel_y, sel_x)] = frame[np.ix_(src_y[sel_y], src_x[sel_x])]
    return out


def params_from_spec(ctrl: ControlSequence, spec: EditSpec) -> TransformParams:
    if spec.params is not None:
        return spec.params
    edited = np.asarray(spec.edited_frame, dtype=np.float64)
    return estimate_transform(detect_bbox(ctrl.frame(0)), detect_bbox(edited))


def propagate(ctrl: ControlSequence, spec: EditSpec) -> ControlSequence:
    """Apply the first-frame edit to every frame, each about its own box center.

    When ``spec`` carries an edited first frame, it is used verbatim as frame 0.
    """
    params = params_from_spec(ctrl, spec)
    out = np.empty_like(ctrl.maps)
    for i in range(len(ctrl)):
        out[i, 0] = apply_transform(ctrl.frame(i), params)
    if spec.edited_frame is not None:
        edited = np.asarray(spec.edited_frame, dtype=np.float64)
        out[0, 0] = edited[0] if edited.ndim == 3 else edited
    return ControlSequence(out, ctrl.kind, ctrl.empty_frames)


def bboxes(ctrl: ControlSequence | np.ndarray, threshold: float = ACTIVITY_THRESHOLD) -> list[BBox]:
    maps = ctrl.maps if isinstance(ctrl, ControlSequence) else np.asarray(ctrl)
    return [detect_bbox(m, threshold) for m in maps]


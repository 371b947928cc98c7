"""Synthetic clips with analytically known object boxes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .control import BBox

SQUARE_COLOR = (0.95, 0.85, 0.30)


def background(size: int = 32) -> np.ndarray:
    """Dim RGB gradient; luminance stays well below the segmentation threshold."""
    ramp = np.linspace(0.0, 1.0, size)
    bg = np.empty((3, size, size))
    bg[0] = 0.10 + 0.20 * ramp[None, :]
    bg[1] = 0.15 + 0.05 * ramp[:, None]
    bg[2] = 0.10 + 0.20 * ramp[:, None]
    return bg


def render_squares(boxes, size: int = 32, color=SQUARE_COLOR) -> np.ndarray:
    frames = np.repeat(background(size)[None], len(boxes), axis=0)
    for f, b in zip(frames, boxes):
        for c in range(3):
            f[c, b.y_min:b.y_max + 1, b.x_min:b.x_max + 1] = color[c]
    return frames


def moving_square_boxes(frames: int = 8, side: int = 8, x0: int = 4, y0: int = 12, step: int = 2) -> list[BBox]:
    return [BBox(x0 + step * i, y0, x0 + step * i + side - 1, y0 + side - 1) for i in range(frames)]


def moving_square_clip(frames: int = 8, size: int = 32, side: int = 8, step: int = 2):
    """8-frame, 32x32 clip of a square sliding right; returns ``(frames, boxes)``."""
    boxes = moving_square_boxes(frames, side, step=step)
    if boxes[-1].x_max >= size:
        raise ValueError("square leaves the frame")
    return render_squares(boxes, size), boxes


def square_ring(box: BBox, size: int = 32) -> np.ndarray:
    """Inner one-pixel boundary ring of a filled box, as a ``[H, W]`` 0/1 raster."""
    ring = np.zeros((size, size))
    inner = np.zeros((size, size), dtype=bool)
    ring[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1] = 1.0
    if box.width > 2 and box.height > 2:
        inner[box.y_min + 1:box.y_max, box.x_min + 1:box.x_max] = True
    ring[inner] = 0.0
    return ring


DEFAULT_CONFIG = """\
# moving-square toy project
frames_dir = frames
work_dir = work
edit_spec = move.edit
seed = 0
prompt.ids = 2 1 3
prompt.labels = a square gradient
prompt.custom_index = 1
"""


def write_project(root, dx: float = 5.0) -> Path:
    """Write the moving-square clip, a config and two edit specs; returns the config path."""
    from .io import write_frames

    root = Path(root)
    frames, _ = moving_square_clip()
    write_frames(root / "frames", frames, prefix="frame")
    (root / "run.cfg").write_text(DEFAULT_CONFIG)
    (root / "move.edit").write_text(f"# move the square right\ndx = {dx:g}\nword = square\n")
    (root / "identity.edit").write_text("# leave the control untouched\nword = square\n")
    return root / "run.cfg"

"""8-bit PNG frame sequences.

Sequences live in one directory as ``<prefix>_0000.png``, ``<prefix>_0001.png``
and so on, numbered contiguously from zero. Colour frames are RGB; control
maps are single-channel. Pixel values map to ``[0, 1]`` floats by ``v / 255``
and back by rounding ``x * 255``.
"""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import atomic_write_bytes
from .errors import DomainError
from .guide import ControlSequence

FRAME_PREFIX = "frame"
CONTROL_PREFIX = "ctrl"
OUTPUT_PREFIX = "out"


def sequence_name(prefix: str, i: int) -> str:
    return f"{prefix}_{i:04d}.png"


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def png_bytes(image: np.ndarray) -> bytes:
    """Encode ``[H, W]``, ``[1, H, W]`` or ``[3, H, W]`` floats in [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim == 3 and image.shape[0] == 3:
        pil = Image.fromarray(to_uint8(image.transpose(1, 2, 0)))
    elif image.ndim == 2:
        pil = Image.fromarray(to_uint8(image))
    else:
        raise DomainError(f"cannot write an image of shape {image.shape}")
    buf = io.BytesIO()
    pil.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def read_image(path: str | Path, mode: str = "RGB") -> np.ndarray:
    """``[3, H, W]`` for ``mode="RGB"``, ``[H, W]`` for ``mode="L"``."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert(mode), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1) if arr.ndim == 3 else arr


def sequence_paths(directory: str | Path, prefix: str) -> list[Path]:
    """Contiguously numbered files from ``<prefix>_0000.png``; errors name what is missing."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(
            f"{directory} is not a directory; expected {sequence_name(prefix, 0)}, {sequence_name(prefix, 1)}, ..."
        )
    pattern = re.compile(rf"^{re.escape(prefix)}_(\d{{4}})\.png$")
    found = sorted(int(m.group(1)) for p in directory.iterdir() if (m := pattern.match(p.name)))
    if not found:
        raise FileNotFoundError(
            f"no frames in {directory}; expected {sequence_name(prefix, 0)}, {sequence_name(prefix, 1)}, ..."
        )
    missing = sorted(set(range(found[-1] + 1)) - set(found))
    if missing:
        names = ", ".join(sequence_name(prefix, i) for i in missing)
        raise FileNotFoundError(f"{directory} is missing {names}")
    return [directory / sequence_name(prefix, i) for i in range(found[-1] + 1)]


def read_frames(directory: str | Path, prefix: str = FRAME_PREFIX) -> np.ndarray:
    images = [read_image(p, "RGB") for p in sequence_paths(directory, prefix)]
    if len({im.shape for im in images}) > 1:
        raise DomainError(f"frames in {directory} differ in size")
    return np.stack(images)


def read_control_dir(directory: str | Path, kind: str = "edge", prefix: str = CONTROL_PREFIX) -> ControlSequence:
    images = [read_image(p, "L") for p in sequence_paths(directory, prefix)]
    if len({im.shape for im in images}) > 1:
        raise DomainError(f"control maps in {directory} differ in size")
    maps = np.stack(images)[:, None]
    empty = tuple(int(i) for i in np.nonzero(maps.reshape(len(maps), -1).max(axis=1) == 0)[0])
    return ControlSequence(maps, kind, empty)


def write_sequence(directory: str | Path, images, prefix: str) -> list[Path]:
    """Encode every image first, then write each file atomically.

    Stale files of the same prefix beyond the new length are removed so the
    directory always holds exactly one contiguous sequence.
    """
    directory = Path(directory)
    encoded = [png_bytes(img) for img in images]
    paths = []
    for i, data in enumerate(encoded):
        path = directory / sequence_name(prefix, i)
        atomic_write_bytes(path, data)
        paths.append(path)
    for stale in directory.glob(f"{prefix}_*.png"):
        if stale not in paths:
            stale.unlink()
    return paths


def write_frames(directory: str | Path, frames: np.ndarray, prefix: str = OUTPUT_PREFIX) -> list[Path]:
    return write_sequence(directory, np.asarray(frames), prefix)


def write_control(directory: str | Path, ctrl: ControlSequence, prefix: str = CONTROL_PREFIX) -> list[Path]:
    return write_sequence(directory, ctrl.maps, prefix)


def quantize(x: np.ndarray) -> np.ndarray:
    """What a float image becomes after an 8-bit round trip."""
    return to_uint8(x).astype(np.float64) / 255.0


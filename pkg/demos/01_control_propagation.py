"""
Editing a control sequence
==========================

Extract edge maps from the moving-square clip, move and shrink the square in
frame 0, and watch the same edit spread to every frame.
"""

import sys
from pathlib import Path

import numpy as np

from ctrledit.control import EditSpec, TransformParams, bboxes, extract_control, propagate
from ctrledit.fixtures import moving_square_clip
from ctrledit.checkpoint import atomic_write_bytes
from ctrledit.io import png_bytes, write_control

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "propagation"

# 8 frames of a bright square sliding right over a dim gradient
frames, boxes = moving_square_clip()
print("frames:", frames.shape)

# the edge control is the one-pixel boundary ring of the segmented square
ctrl = extract_control(frames)
print("source boxes:", [(b.x_min, b.y_min) for b in bboxes(ctrl)])

# an edit is defined once, on frame 0, and applied to each frame about its own box center
spec = EditSpec(params=TransformParams(dx=3, dy=-4, sx=0.5, sy=0.5))
edited = propagate(ctrl, spec)
for src, dst in zip(bboxes(ctrl), bboxes(edited)):
    print(f"  {src.center} w={src.width} -> {dst.center} w={dst.width}")

# the side-by-side strip makes the motion easy to eyeball
write_control(out / "source", ctrl)
write_control(out / "edited", edited)
strip = np.concatenate([np.concatenate(list(ctrl.maps[:, 0]), axis=1),
                        np.concatenate(list(edited.maps[:, 0]), axis=1)], axis=0)
atomic_write_bytes(out / "strip.png", png_bytes(strip))
print("strip", strip.shape, "written to", out / "strip.png")

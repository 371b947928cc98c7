"""
Moving the square
=================

Run the staged pipeline on a scratch project: extract, edit the control with
a 5 pixel shift, customize, invert, edit and score. With an untrained base
model the output keeps the source layout; the printed box centers show it.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from ctrledit.cli import main
from ctrledit.control import bboxes, detect_bbox, segment
from ctrledit.fixtures import write_project
from ctrledit.io import read_control_dir, read_frames

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="ctrledit-"))
cfg = write_project(root, dx=5)
print("project:", root)

for stage in ("extract", "edit-control", "customize", "invert", "edit", "metrics"):
    code = main([stage, "--config", str(cfg)])
    assert code == 0, f"{stage} exited with {code}"

work = root / "work"
targets = bboxes(read_control_dir(work / "control_edit"))
output = read_frames(work / "output", prefix="out")
for i, (fg, target) in enumerate(zip(segment(output), targets)):
    got = detect_bbox(fg.astype(float)).center
    print(f"frame {i}: square at {got}, control asks for {target.center}")

source = read_frames(root / "frames")
print("max pixel change:", float(np.abs(output - source).max()))

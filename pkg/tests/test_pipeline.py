import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from ctrledit import pipeline
from ctrledit.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from ctrledit.control import bboxes
from ctrledit.errors import ConfigError, StageOrderError
from ctrledit.fixtures import moving_square_boxes, write_project
from ctrledit.io import read_control_dir

FAST = "schedule.steps = 4\ntrain.iterations = 2\ninversion.refine_steps = 1\n"


def _project(root: Path, extra: str = FAST) -> Path:
    cfg = write_project(root)
    cfg.write_text(cfg.read_text() + extra)
    return cfg


def _cli(cfg: Path, *stages: str, **flags) -> list[int]:
    codes = []
    for stage in stages:
        argv = [stage, "--config", str(cfg)]
        for k, v in flags.items():
            argv += [f"--{k}", str(v)]
        codes.append(main(argv))
    return codes


# -- config parsing ---------------------------------------------------------------

def test_parse_example_config(tmp_path):
    cfg = pipeline.load_config(_project(tmp_path))
    assert cfg.frames_dir == tmp_path / "frames"
    assert cfg.prompt_spec().labels == ("a", "square", "gradient")
    assert cfg.schedule().T == 4 and cfg.train.iterations == 2 and cfg.train.seed == 0
    assert cfg.refine_steps == 1


@pytest.mark.parametrize(
    "text, line, match",
    [
        ("frames_dir = f\nprompt.ids = 1\nprompt.labels = a\nbogus = 3\n", 4, "unknown key"),
        ("frames_dir = f\n\n# note\nprompt.ids = x\n", 4, "bad value"),
        ("frames_dir = f\nframes_dir = g\n", 2, "duplicate"),
        ("frames_dir f\n", 1, "key = value"),
        ("frames_dir = f\nprompt.ids = 1\nprompt.labels = a\nmodel.hidden = 1.5\n", 4, "bad value"),
        ("frames_dir = f\nprompt.ids = 1\nprompt.labels = a\nremix.nope = 1\n", 4, "unknown key"),
    ],
)
def test_config_errors_carry_line_numbers(text, line, match):
    with pytest.raises(ConfigError, match=match) as info:
        pipeline.parse_config(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_config_semantic_errors():
    with pytest.raises(ConfigError, match="prompt.ids"):
        pipeline.parse_config("frames_dir = f\n")
    with pytest.raises(ConfigError, match="same length"):
        pipeline.parse_config("frames_dir = f\nprompt.ids = 1 2\nprompt.labels = a\n")
    with pytest.raises(ConfigError, match="tau"):
        pipeline.parse_config("frames_dir = f\nprompt.ids = 1\nprompt.labels = a\nremix.tau = 2\n")


def test_every_documented_key_parses():
    keys = pipeline.config_keys()
    assert "train.learning_rate" in keys and "model.hidden" in keys and "train.seed" not in keys
    readme = (Path(__file__).parents[1] / "README.md").read_text()
    missing = [k for k in keys if f"`{k}`" not in readme]
    assert not missing, f"README does not document {missing}"


def test_edit_spec_parsing(tmp_path):
    spec = pipeline.parse_edit_spec("dx = 5\nsy = 0.5\nword = cat\nword = hat\ntarget.ids = 1 7\ntarget.labels = a dog\n")
    assert spec.params.dx == 5 and spec.params.sy == 0.5
    assert spec.words == ("cat", "hat")
    assert spec.target_prompt == ((1, 7), ("a", "dog"))
    with pytest.raises(ConfigError) as info:
        pipeline.parse_edit_spec("dx = 1\n\nsx = 0\n")
    assert info.value.line == 3 and "sx" in str(info.value)
    with pytest.raises(ConfigError) as info:
        pipeline.parse_edit_spec("dx = 1\nshear = 2\n")
    assert info.value.line == 2
    with pytest.raises(ConfigError, match="does not exist"):
        pipeline.parse_edit_spec("frame = missing.png\n", tmp_path)
    with pytest.raises(ConfigError, match="go together"):
        pipeline.parse_edit_spec("target.ids = 1\n")


def test_generation_spec_round_trips():
    spec = pipeline.parse_edit_spec("dx = 2\nword = cat\ntarget.ids = 1 7\ntarget.labels = a dog\n")
    again = pipeline.parse_edit_spec(pipeline.format_generation_spec(spec))
    assert again.words == spec.words and again.target_prompt == spec.target_prompt


def test_target_prompt_and_remix_words(tmp_path):
    cfg = pipeline.load_config(_project(tmp_path))
    plain = pipeline.parse_edit_spec("dx = 1\n")
    assert pipeline.target_prompt_spec(cfg, plain) == cfg.prompt_spec()
    assert pipeline.remix_words(cfg, plain) == ("square",)
    swap = pipeline.parse_edit_spec("word = square\ntarget.ids = 2 1 9\ntarget.labels = a square stripe\n")
    target = pipeline.target_prompt_spec(cfg, swap)
    assert target.custom_index == 1
    assert target.retained_positions(cfg.prompt_spec()) == [(0, 0), (1, 1)]


# -- stages through the CLI ----------------------------------------------------------

def test_extract_is_idempotent_and_exact(tmp_path):
    cfg_path = _project(tmp_path)
    assert _cli(cfg_path, "extract") == [EXIT_OK]
    first = {p.name: p.read_bytes() for p in (tmp_path / "work" / "control").iterdir()}
    assert _cli(cfg_path, "extract") == [EXIT_OK]
    second = {p.name: p.read_bytes() for p in (tmp_path / "work" / "control").iterdir()}
    assert first == second and len(first) == 8
    assert bboxes(read_control_dir(tmp_path / "work" / "control")) == moving_square_boxes()


def test_constant_frames_give_zero_control(tmp_path):
    cfg_path = _project(tmp_path)
    from ctrledit.io import write_frames

    write_frames(tmp_path / "frames", np.full((8, 3, 32, 32), 0.4), prefix="frame")
    with pytest.warns(UserWarning):
        assert _cli(cfg_path, "extract") == [EXIT_OK]
    assert np.count_nonzero(read_control_dir(tmp_path / "work" / "control").maps) == 0


def test_identity_and_shift_edits(tmp_path):
    cfg_path = _project(tmp_path)
    work = tmp_path / "work"
    assert _cli(cfg_path, "extract") == [EXIT_OK]
    assert main(["edit-control", "--config", str(cfg_path), "--spec", str(tmp_path / "identity.edit")]) == EXIT_OK
    for src in sorted((work / "control").iterdir()):
        assert (work / "control_edit" / src.name).read_bytes() == src.read_bytes()
    assert _cli(cfg_path, "edit-control") == [EXIT_OK]
    moved = bboxes(read_control_dir(work / "control_edit"))
    assert [(b.x_min - a.x_min, b.y_min - a.y_min) for a, b in zip(moving_square_boxes(), moved)] == [(5, 0)] * 8
    assert "word = square" in (work / "edit_words.txt").read_text()


def test_malformed_edit_spec_reports_line(tmp_path, capsys):
    cfg_path = _project(tmp_path)
    (tmp_path / "bad.edit").write_text("# comment\ndx = 1\ndy = up\n")
    assert _cli(cfg_path, "extract") == [EXIT_OK]
    code = main(["edit-control", "--config", str(cfg_path), "--spec", str(tmp_path / "bad.edit")])
    assert code == EXIT_VALIDATION
    assert "line 3" in capsys.readouterr().err


def test_missing_frames_lists_expected_names(tmp_path, capsys):
    cfg_path = _project(tmp_path)
    shutil.rmtree(tmp_path / "frames")
    assert _cli(cfg_path, "extract") == [EXIT_VALIDATION]
    assert "frame_0000.png" in capsys.readouterr().err


@pytest.mark.parametrize("stage, needs", [("customize", "extract"), ("invert", "edit-control"),
                                          ("edit", "edit-control"), ("metrics", "edit")])
def test_stage_order_is_enforced(tmp_path, stage, needs, capsys):
    cfg_path = _project(tmp_path)
    assert _cli(cfg_path, stage) == [EXIT_VALIDATION]
    assert f"run '{needs}' first" in capsys.readouterr().err
    with pytest.raises(StageOrderError):
        getattr(pipeline, "cmd_" + stage)(pipeline.load_config(cfg_path))


def test_exit_codes_for_bad_invocations(tmp_path, capsys):
    assert main([]) == EXIT_VALIDATION
    assert main(["extract"]) == EXIT_VALIDATION
    assert main(["extract", "--config", str(tmp_path / "none.cfg")]) == EXIT_VALIDATION
    assert main(["fly", "--config", "x"]) == EXIT_VALIDATION
    capsys.readouterr()


def test_runtime_failure_exits_one(tmp_path, monkeypatch, capsys):
    cfg_path = _project(tmp_path)

    def boom(cfg):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pipeline, "cmd_extract", boom)
    assert _cli(cfg_path, "extract") == [EXIT_RUNTIME]
    assert "disk on fire" in capsys.readouterr().err


def test_full_run_with_overrides(tmp_path, capsys):
    cfg_path = _project(tmp_path)
    out = tmp_path / "elsewhere"
    stages = ("extract", "edit-control", "customize", "invert", "edit", "metrics")
    assert _cli(cfg_path, *stages, out=out, seed=3) == [EXIT_OK] * 6
    assert not (tmp_path / "work").exists()
    for name in ("checkpoint.npz", "store.npz", "train_log.csv", "metrics.json", "edit_words.txt"):
        assert (out / name).is_file()
    assert len(list((out / "output").glob("out_*.png"))) == 8
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["frame_accuracy"] == "unavailable"
    assert 0 <= metrics["relative_l2_to_source"] and -1 <= metrics["temporal_consistency"] <= 1
    assert '"temporal_consistency"' in capsys.readouterr().out


def test_frame_shape_mismatch_is_a_validation_error(tmp_path):
    cfg_path = _project(tmp_path, FAST + "model.frames = 4\n")
    assert _cli(cfg_path, "extract", "customize") == [EXIT_OK, EXIT_VALIDATION]

"""Configuration files and the staged editing pipeline.

Stages and the artifacts they read and write, all under the work directory::

    extract       frames_dir/frame_*.png   -> control/ctrl_*.png
    edit-control  control/ + edit spec     -> control_edit/ctrl_*.png, edit_words.txt
    customize     frames + control/        -> checkpoint.npz, train_log.csv
    invert        checkpoint + control_edit/ -> store.npz
    edit          checkpoint + store + control_edit/ -> output/out_*.png
    metrics       frames + output/         -> metrics.json

Both the pipeline config and edit specs are flat ``key = value`` text.
Blank lines and ``#`` comments are ignored; list values are whitespace
separated; relative paths resolve against the file's directory.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import atomic_write_bytes
from .control import EditSpec, TransformParams, extract_control, propagate
from .customize import Checkpoint, TrainConfig, customize
from .denoiser import DenoiserConfig
from .errors import ConfigError, DomainError, StageOrderError
from .io import read_control_dir, read_frames, read_image, write_control, write_frames
from .metrics import frame_accuracy, temporal_consistency
from .model import PromptSpec, VideoEditModel
from .remix import AttentionStore, RemixConfig, generate_with_remix, invert_with_guidance, relative_l2
from .schedule import NoiseSchedule, default_schedule, make_schedule

logger = logging.getLogger(__name__)


# -- key=value parsing ----------------------------------------------------------

def parse_kv(text: str, repeatable: tuple[str, ...] = ()) -> list[tuple[int, str, str]]:
    """``(line_number, key, value)`` for every setting; line numbers start at 1."""
    entries = []
    seen: set[str] = set()
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", no)
        if key in seen and key not in repeatable:
            raise ConfigError(f"duplicate key {key!r}", no)
        seen.add(key)
        entries.append((no, key, value))
    return entries


def _bool(value: str) -> bool:
    low = value.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split())


def _words(value: str) -> tuple[str, ...]:
    return tuple(value.split())


def _optional_int(value: str) -> Optional[int]:
    return None if value.lower() == "none" else int(value)


def _converter(ftype) -> Callable[[str], object]:
    return {bool: _bool, int: int, float: float, str: str}[ftype]


def _field_types(cls) -> dict[str, type]:
    hints = {"bool": bool, "int": int, "float": float, "str": str}
    return {f.name: hints[f.type] for f in dataclasses.fields(cls) if f.type in hints}


# -- pipeline configuration ---------------------------------------------------------

@dataclass
class PipelineConfig:
    """Everything one run of the pipeline needs; ``seed`` seeds the base weights and training."""

    frames_dir: Path
    work_dir: Path
    prompt_ids: tuple[int, ...]
    prompt_labels: tuple[str, ...]
    custom_index: Optional[int] = None
    base_word_id: Optional[int] = None
    seed: int = 0
    edit_spec: Optional[Path] = None
    control_kind: str = "edge"
    segment_threshold: float = 0.5
    pose_dir: Optional[Path] = None
    schedule_steps: int = 50
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    guidance_scale: float = 1.0
    refine_steps: int = 5
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    remix: RemixConfig = field(default_factory=RemixConfig)

    def __post_init__(self):
        if len(self.prompt_ids) != len(self.prompt_labels):
            raise DomainError("prompt.ids and prompt.labels must have the same length")
        if not self.prompt_ids:
            raise DomainError("the prompt needs at least one word")
        if self.custom_index is not None and not 0 <= self.custom_index < len(self.prompt_ids):
            raise DomainError("prompt.custom_index is outside the prompt")
        if (self.beta_start is None) != (self.beta_end is None):
            raise DomainError("set both schedule.beta_start and schedule.beta_end, or neither")
        self.train = dataclasses.replace(self.train, seed=self.seed)

    # artifact locations
    @property
    def control_dir(self) -> Path:
        return self.work_dir / "control"

    @property
    def control_edit_dir(self) -> Path:
        return self.work_dir / "control_edit"

    @property
    def edit_words_path(self) -> Path:
        return self.work_dir / "edit_words.txt"

    @property
    def checkpoint_path(self) -> Path:
        return self.work_dir / "checkpoint.npz"

    @property
    def store_path(self) -> Path:
        return self.work_dir / "store.npz"

    @property
    def output_dir(self) -> Path:
        return self.work_dir / "output"

    @property
    def log_path(self) -> Path:
        return self.work_dir / "train_log.csv"

    @property
    def metrics_path(self) -> Path:
        return self.work_dir / "metrics.json"

    def schedule(self) -> NoiseSchedule:
        if self.beta_start is None:
            return default_schedule(self.schedule_steps)
        return make_schedule(self.schedule_steps, self.beta_start, self.beta_end)

    def prompt_spec(self) -> PromptSpec:
        return PromptSpec(tuple(self.prompt_ids), tuple(self.prompt_labels), self.custom_index)

    def with_overrides(self, seed: Optional[int] = None, work_dir: Optional[Path] = None) -> "PipelineConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if work_dir is not None:
            changes["work_dir"] = Path(work_dir)
        return dataclasses.replace(self, **changes) if changes else self


_PATH_KEYS = {"frames_dir", "work_dir", "edit_spec", "pose_dir"}
_TOP_KEYS = {
    "seed": int,
    "prompt.ids": _ints,
    "prompt.labels": _words,
    "prompt.custom_index": _optional_int,
    "prompt.base_word_id": _optional_int,
    "control.kind": str,
    "control.threshold": float,
    "schedule.steps": int,
    "schedule.beta_start": float,
    "schedule.beta_end": float,
    "guidance_scale": float,
    "inversion.refine_steps": int,
    "remix.tau": float,
    "remix.fusion_fraction": float,
    "remix.window_start": _optional_int,
    "remix.words": _words,
}
_TOP_FIELDS = {
    "prompt.ids": "prompt_ids",
    "prompt.labels": "prompt_labels",
    "prompt.custom_index": "custom_index",
    "prompt.base_word_id": "base_word_id",
    "control.kind": "control_kind",
    "control.threshold": "segment_threshold",
    "schedule.steps": "schedule_steps",
    "schedule.beta_start": "beta_start",
    "schedule.beta_end": "beta_end",
    "inversion.refine_steps": "refine_steps",
}


def config_keys() -> list[str]:
    keys = sorted(_PATH_KEYS) + sorted(_TOP_KEYS)
    keys += [f"model.{k}" for k in _field_types(DenoiserConfig)]
    keys += [f"train.{k}" for k in _field_types(TrainConfig) if k != "seed"]
    return keys


def parse_config(text: str, base_dir: Path | str = ".") -> PipelineConfig:
    base_dir = Path(base_dir)
    top: dict[str, object] = {}
    model: dict[str, object] = {}
    train: dict[str, object] = {}
    remix: dict[str, object] = {}
    model_types = _field_types(DenoiserConfig)
    train_types = {k: v for k, v in _field_types(TrainConfig).items() if k != "seed"}
    for no, key, value in parse_kv(text):
        try:
            if key in _PATH_KEYS:
                top[key] = base_dir / value
            elif key.startswith("remix."):
                if key not in _TOP_KEYS:
                    raise KeyError(key)
                remix[key[6:]] = _TOP_KEYS[key](value)
            elif key in _TOP_KEYS:
                top[_TOP_FIELDS.get(key, key)] = _TOP_KEYS[key](value)
            elif key.startswith("model.") and key[6:] in model_types:
                model[key[6:]] = _converter(model_types[key[6:]])(value)
            elif key.startswith("train.") and key[6:] in train_types:
                train[key[6:]] = _converter(train_types[key[6:]])(value)
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigError(f"unknown key {key!r}", no) from None
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", no) from None
    for required in ("frames_dir", "prompt_ids", "prompt_labels"):
        if required not in top:
            name = {"prompt_ids": "prompt.ids", "prompt_labels": "prompt.labels"}.get(required, required)
            raise ConfigError(f"missing required key {name!r}")
    top.setdefault("work_dir", base_dir / "work")
    try:
        return PipelineConfig(
            model=DenoiserConfig(**model), train=TrainConfig(**train), remix=RemixConfig(**remix), **top
        )
    except DomainError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), path.parent)


# -- edit specs ---------------------------------------------------------------------

_EDIT_FLOATS = ("dx", "dy", "sx", "sy")


def parse_edit_spec(text: str, base_dir: Path | str = ".") -> EditSpec:
    """Keys: ``dx dy sx sy`` (floats), ``frame`` (edited frame-0 control image),
    ``word`` (repeatable target word label), ``target.ids`` and ``target.labels``."""
    base_dir = Path(base_dir)
    numbers: dict[str, float] = {}
    frame_path = None
    words: list[str] = []
    target_ids = target_labels = None
    for no, key, value in parse_kv(text, repeatable=("word",)):
        try:
            if key in _EDIT_FLOATS:
                numbers[key] = float(value)
                if key in ("sx", "sy") and not numbers[key] > 0:
                    raise ConfigError(f"scale {key} must be positive, got {value}", no)
            elif key == "frame":
                frame_path = (no, base_dir / value)
            elif key == "word":
                words.extend(_words(value))
            elif key == "target.ids":
                target_ids = _ints(value)
            elif key == "target.labels":
                target_labels = _words(value)
            else:
                raise ConfigError(f"unknown edit key {key!r}", no)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {exc}", no) from None
    if frame_path is not None and numbers:
        raise ConfigError("give either transform numbers or an edited frame, not both", frame_path[0])
    if (target_ids is None) != (target_labels is None):
        raise ConfigError("target.ids and target.labels go together")
    if target_ids is not None and len(target_ids) != len(target_labels):
        raise ConfigError("target.ids and target.labels must have the same length")
    target = None if target_ids is None else (tuple(target_ids), tuple(target_labels))
    if frame_path is not None:
        no, path = frame_path
        if not path.is_file():
            raise ConfigError(f"edited frame {path} does not exist", no)
        return EditSpec(edited_frame=read_image(path, "L"), words=tuple(words), target_prompt=target)
    try:
        params = TransformParams(**numbers)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    return EditSpec(params=params, words=tuple(words), target_prompt=target)


def load_edit_spec(path: str | Path) -> EditSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"edit spec {path} does not exist")
    return parse_edit_spec(path.read_text(), path.parent)


# -- stages -------------------------------------------------------------------------

def _require(path: Path, stage: str) -> None:
    if not path.exists():
        raise StageOrderError(f"{path} is missing; run '{stage}' first")


def build_model(cfg: PipelineConfig) -> VideoEditModel:
    base = cfg.base_word_id
    if base is None:
        base = cfg.prompt_ids[cfg.custom_index] if cfg.custom_index is not None else 0
    return VideoEditModel(cfg.model, seed=cfg.seed, base_word_id=base)


def load_source(cfg: PipelineConfig) -> np.ndarray:
    frames = read_frames(cfg.frames_dir)
    expected = (cfg.model.frames, 3) + cfg.model.pixel_size
    if frames.shape != expected:
        raise DomainError(f"frames are {frames.shape} but the model expects {expected}")
    return frames


def load_tuned_model(cfg: PipelineConfig) -> VideoEditModel:
    _require(cfg.checkpoint_path, "customize")
    model = build_model(cfg)
    Checkpoint.load(cfg.checkpoint_path).apply_to(model)
    model.eval()
    return model


def cmd_extract(cfg: PipelineConfig) -> list[Path]:
    frames = read_frames(cfg.frames_dir)
    ctrl = extract_control(frames, cfg.control_kind, cfg.segment_threshold, cfg.pose_dir)
    return write_control(cfg.control_dir, ctrl)


def cmd_edit_control(cfg: PipelineConfig, spec_path: Optional[str | Path] = None) -> list[Path]:
    spec_path = Path(spec_path) if spec_path is not None else cfg.edit_spec
    if spec_path is None:
        raise ConfigError("no edit spec given; set 'edit_spec' or pass --spec")
    spec = load_edit_spec(spec_path)
    _require(cfg.control_dir, "extract")
    ctrl = read_control_dir(cfg.control_dir, cfg.control_kind)
    edited = propagate(ctrl, spec)
    paths = write_control(cfg.control_edit_dir, edited)
    atomic_write_bytes(cfg.edit_words_path, format_generation_spec(spec).encode())
    return paths


def format_generation_spec(spec: EditSpec) -> str:
    """The parts of an edit spec that generation still needs, as edit-spec text."""
    lines = ["# target words and prompt of the last control edit"]
    lines += [f"word = {w}" for w in spec.words]
    if spec.target_prompt is not None:
        ids, labels = spec.target_prompt
        lines.append("target.ids = " + " ".join(str(i) for i in ids))
        lines.append("target.labels = " + " ".join(labels))
    return "\n".join(lines) + "\n"


def _edit_spec_for_generation(cfg: PipelineConfig) -> EditSpec:
    _require(cfg.edit_words_path, "edit-control")
    return parse_edit_spec(cfg.edit_words_path.read_text())


def cmd_customize(cfg: PipelineConfig) -> Path:
    frames = load_source(cfg)
    _require(cfg.control_dir, "extract")
    ctrl = read_control_dir(cfg.control_dir, cfg.control_kind)
    model = build_model(cfg)
    checkpoint, losses = customize(
        model, frames, cfg.prompt_spec(), ctrl, cfg.train, cfg.schedule(), log_path=cfg.log_path
    )
    checkpoint.save(cfg.checkpoint_path)
    logger.info("customized: loss %.5f -> %.5f", losses[0], losses[-1])
    return cfg.checkpoint_path


def cmd_invert(cfg: PipelineConfig) -> Path:
    frames = load_source(cfg)
    _require(cfg.control_edit_dir, "edit-control")
    ctrl_edit = read_control_dir(cfg.control_edit_dir, cfg.control_kind)
    model = load_tuned_model(cfg)
    z0 = model.encode(torch.as_tensor(frames, dtype=torch.float32))
    _, store = invert_with_guidance(
        model, z0, ctrl_edit, model.prompt(cfg.prompt_spec()), cfg.schedule(), cfg.guidance_scale, cfg.refine_steps
    )
    store.save(cfg.store_path)
    return cfg.store_path


def target_prompt_spec(cfg: PipelineConfig, spec: EditSpec) -> PromptSpec:
    source = cfg.prompt_spec()
    if spec.target_prompt is None:
        return source
    ids, labels = spec.target_prompt
    custom = None
    if source.custom_index is not None:
        label = source.labels[source.custom_index]
        custom = labels.index(label) if label in labels else None
    return PromptSpec(ids, labels, custom)


def remix_words(cfg: PipelineConfig, spec: EditSpec) -> tuple[str, ...]:
    """Edit-spec words, else config words, else the tuned token's label."""
    if spec.words:
        return spec.words
    if cfg.remix.words:
        return cfg.remix.words
    if cfg.custom_index is not None:
        return (cfg.prompt_labels[cfg.custom_index],)
    return ()


def cmd_edit(cfg: PipelineConfig) -> list[Path]:
    _require(cfg.control_edit_dir, "edit-control")
    _require(cfg.store_path, "invert")
    spec = _edit_spec_for_generation(cfg)
    ctrl_edit = read_control_dir(cfg.control_edit_dir, cfg.control_kind)
    model = load_tuned_model(cfg)
    store = AttentionStore.load(cfg.store_path)
    source, target = cfg.prompt_spec(), target_prompt_spec(cfg, spec)
    remix = dataclasses.replace(cfg.remix, words=remix_words(cfg, spec))
    z = generate_with_remix(
        model,
        store.z_T,
        store,
        ctrl_edit,
        model.prompt(target),
        remix,
        cfg.schedule(),
        prompt_source=model.prompt(source),
        retained=target.retained_positions(source),
        guidance_scale=cfg.guidance_scale,
    )
    frames = model.decode(z).numpy()
    return write_frames(cfg.output_dir, np.clip(frames, 0.0, 1.0))


def cmd_metrics(cfg: PipelineConfig) -> dict:
    source = read_frames(cfg.frames_dir)
    _require(cfg.output_dir, "edit")
    output = read_frames(cfg.output_dir, prefix="out")
    if output.shape != source.shape:
        raise DomainError(f"output {output.shape} and source {source.shape} differ in shape")
    result = {
        "temporal_consistency": temporal_consistency(output),
        "temporal_consistency_source": temporal_consistency(source),
        "relative_l2_to_source": relative_l2(output, source),
        "frame_accuracy": frame_accuracy(output, None, None),
    }
    atomic_write_bytes(cfg.metrics_path, (json.dumps(result, indent=1, sort_keys=True) + "\n").encode())
    return result

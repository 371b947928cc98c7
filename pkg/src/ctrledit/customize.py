"""One-video customization of LoRA factors, the custom token and guide trainables.

RNG draw order per iteration, from a single seeded ``torch.Generator``: for
each of the ``timesteps_per_iteration`` draws, first ``t`` (one integer in
``[1, T]``), then ``eps`` (a standard normal array shaped like the latent).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import load_archive, save_archive
from .errors import DomainError, TrainingDiverged
from .model import PromptSpec, VideoEditModel
from .schedule import NoiseSchedule, q_sample

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 10


@dataclass
class TrainConfig:
    iterations: int = 100
    learning_rate: float = 3e-5
    timesteps_per_iteration: int = 1
    seed: int = 0
    train_lora: bool = True
    train_token_embedding: bool = True
    train_guide_temporal: bool = True
    train_guide_full: bool = True
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise DomainError("learning rate must be positive")
        if self.timesteps_per_iteration < 1:
            raise DomainError("timesteps_per_iteration must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")

    @property
    def groups(self) -> tuple[str, ...]:
        flags = [
            ("lora", self.train_lora),
            ("token_embedding", self.train_token_embedding),
            ("guide_temporal", self.train_guide_temporal),
            ("guide_full", self.train_guide_full),
        ]
        return tuple(name for name, on in flags if on)


def noise_prediction_loss(predict: Callable, z0, t: int, eps, schedule: NoiseSchedule):
    """Per-entry mean of ``(eps - predict(z_t, t))**2`` with ``z_t = q_sample(z0, t, eps)``."""
    z_t = q_sample(z0, t, eps, schedule)
    return ((eps - predict(z_t, t)) ** 2).mean()


def draw_timestep_and_noise(generator: torch.Generator, shape, schedule: NoiseSchedule, dtype=torch.float32):
    t = int(torch.randint(1, schedule.T + 1, (1,), generator=generator))
    eps = torch.randn(shape, generator=generator, dtype=torch.float32).to(dtype)
    return t, eps


class Customizer:
    """Owns the optimizer; each :meth:`step` is one gradient update.

    The update follows the squared L2 noise-prediction error summed over the
    latent, while the reported loss is its per-entry mean.
    """

    def __init__(self, model: VideoEditModel, schedule: NoiseSchedule, cfg: TrainConfig):
        self.model = model
        self.schedule = schedule
        self.cfg = cfg
        self.params = model.set_trainable(cfg.groups)
        if not self.params:
            raise DomainError("no trainable parameter groups enabled")
        if cfg.optimizer == "adam":
            self.optimizer = torch.optim.Adam(self.params, lr=cfg.learning_rate)
        else:
            self.optimizer = torch.optim.SGD(self.params, lr=cfg.learning_rate)
        self.steps_taken = 0

    def loss(self, z0, prompt_spec: PromptSpec, ctrl, t: int, eps) -> torch.Tensor:
        prompt = self.model.prompt(prompt_spec)

        def predict(z_t, step):
            return self.model.guide_denoise(z_t, step, prompt, ctrl)[0]

        return noise_prediction_loss(predict, z0, t, eps, self.schedule)

    def step(self, z0, prompt_spec: PromptSpec, ctrl, generator: torch.Generator) -> float:
        self.optimizer.zero_grad(set_to_none=True)
        total = 0.0
        for _ in range(self.cfg.timesteps_per_iteration):
            t, eps = draw_timestep_and_noise(generator, z0.shape, self.schedule, z0.dtype)
            mean_sq = self.loss(z0, prompt_spec, ctrl, t, eps)
            if not torch.isfinite(mean_sq):
                raise TrainingDiverged(f"non-finite loss at step {self.steps_taken} (t={t})")
            objective = mean_sq * (z0.numel() / self.cfg.timesteps_per_iteration)
            objective.backward()
            total += float(mean_sq.detach())
        self.optimizer.step()
        self.steps_taken += 1
        return total / self.cfg.timesteps_per_iteration


@dataclass
class Checkpoint:
    """Trainable parameters only, plus the hash of the frozen base they extend."""

    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        save_archive(path, self.arrays, self.meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = load_archive(path)
        return cls(arrays, meta)

    def apply_to(self, model: VideoEditModel) -> None:
        groups = tuple(self.meta.get("groups", ()))
        expected = self.meta.get("frozen_hash")
        if expected and model.frozen_hash(groups) != expected:
            raise DomainError("checkpoint was tuned from a different frozen base model")
        named = dict(model.named_trainables(groups))
        missing = set(named) - set(self.arrays)
        if missing:
            raise DomainError(f"checkpoint lacks parameters {sorted(missing)}")
        with torch.no_grad():
            for name, p in named.items():
                p.copy_(torch.from_numpy(self.arrays[name]).to(p.dtype))
        if "base_word_id" in self.meta:
            model.text.base_word_id = int(self.meta["base_word_id"])


def make_checkpoint(model: VideoEditModel, cfg: TrainConfig, losses) -> Checkpoint:
    arrays = {name: p.detach().cpu().numpy().astype("<f4") for name, p in model.named_trainables(cfg.groups)}
    meta = {
        "frozen_hash": model.frozen_hash(cfg.groups),
        "groups": list(cfg.groups),
        "model_seed": model.seed,
        "base_word_id": model.text.base_word_id,
        "iterations": cfg.iterations,
        "learning_rate": cfg.learning_rate,
        "train_seed": cfg.seed,
        "final_loss": float(losses[-1]),
    }
    return Checkpoint(arrays, meta)


def window_means(losses, fraction: float = 0.2) -> tuple[float, float]:
    k = max(1, int(round(len(losses) * fraction)))
    return float(np.mean(losses[:k])), float(np.mean(losses[-k:]))


def customize(
    model: VideoEditModel,
    frames,
    prompt_spec: PromptSpec,
    ctrl,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    log_path: Optional[str | Path] = None,
) -> tuple[Checkpoint, list[float]]:
    """Run ``cfg.iterations`` customization steps on one clip."""
    frames = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    n_ctrl = ctrl.maps.shape[0] if hasattr(ctrl, "maps") else len(ctrl)
    if frames.shape[0] != n_ctrl:
        raise DomainError(f"{frames.shape[0]} frames but {n_ctrl} control maps")
    z0 = model.encode(frames).detach()
    trainer = Customizer(model, schedule, cfg)
    generator = torch.Generator().manual_seed(cfg.seed)
    losses: list[float] = []
    log_rows = []
    start = time.perf_counter()
    over = 0
    for it in range(cfg.iterations):
        loss = trainer.step(z0, prompt_spec, ctrl, generator)
        losses.append(loss)
        log_rows.append((it, loss, time.perf_counter() - start))
        over = over + 1 if loss > DIVERGENCE_FACTOR * losses[0] else 0
        if over >= DIVERGENCE_PATIENCE:
            raise TrainingDiverged(
                f"loss above {DIVERGENCE_FACTOR}x the initial {losses[0]:.4g} for {over} steps (iteration {it})"
            )
        if it % 20 == 0:
            logger.info("iteration %d loss %.5f", it, loss)
    model.set_trainable(())
    if log_path is not None:
        _append_log(log_path, log_rows)
    return make_checkpoint(model, cfg, losses), losses


def _append_log(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["iteration", "loss", "wall_time"])
        for it, loss, wall in rows:
            writer.writerow([it, f"{loss:.8g}", f"{wall:.4f}"])


__all__ = [
    "TrainConfig",
    "Customizer",
    "Checkpoint",
    "customize",
    "noise_prediction_loss",
    "window_means",
    "draw_timestep_and_noise",
]

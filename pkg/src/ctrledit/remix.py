"""Guided inversion that records attention, and remixed guided generation.

During inversion every denoiser attention map is recorded per timestep.
During generation, inside the fusion window, each self-attention map becomes
``M * live + (1 - M) * source`` where ``M`` thresholds the inversion-time
cross-attention of the edited word(s); cross-attention columns of words shared
by both prompts are taken from the source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_archive, save_archive
from .denoiser import PromptEmbedding
from .errors import DomainError
from .model import VideoEditModel
from .schedule import NoiseSchedule, ddim_denoise_step, ddim_invert_step


@dataclass
class RemixConfig:
    tau: float = 0.3
    fusion_fraction: float = 0.5
    words: tuple[str, ...] = ()
    window_start: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise DomainError("tau must lie in (0, 1)")
        if self.window_start is not None and self.window_start < 1:
            raise DomainError("window_start must be >= 1")

    def t_lo(self, T: int) -> int:
        """First timestep of the fusion window ``[t_lo, T]``; ``T + 1`` or more disables fusion."""
        if self.window_start is not None:
            return self.window_start
        return max(1, math.ceil(self.fusion_fraction * T))

    def in_window(self, t: int, T: int) -> bool:
        return self.t_lo(T) <= t <= T


@dataclass
class AttentionStore:
    """Source attention per timestep ``1..T`` and the final inverted latent."""

    T: int
    self_maps: dict[int, dict[str, torch.Tensor]] = field(default_factory=dict)
    cross_maps: dict[int, dict[str, torch.Tensor]] = field(default_factory=dict)
    z_T: Optional[torch.Tensor] = None

    def record(self, t: int, self_maps: Mapping[str, torch.Tensor], cross_maps: Mapping[str, torch.Tensor]) -> None:
        if t in self.self_maps:
            raise DomainError(f"timestep {t} already recorded")
        self.self_maps[t] = {k: v.detach().clone() for k, v in self_maps.items()}
        self.cross_maps[t] = {k: v.detach().clone() for k, v in cross_maps.items()}

    def validate(self) -> None:
        if sorted(self.self_maps) != list(range(1, self.T + 1)) or sorted(self.cross_maps) != list(range(1, self.T + 1)):
            raise DomainError(f"store must hold exactly timesteps 1..{self.T}")
        layers = (set(self.self_maps[1]), set(self.cross_maps[1]))
        for t in range(1, self.T + 1):
            if (set(self.self_maps[t]), set(self.cross_maps[t])) != layers:
                raise DomainError(f"layer set at t={t} differs from t=1")
        if self.z_T is None:
            raise DomainError("store has no inverted latent")

    def save(self, path) -> None:
        self.validate()
        arrays = {"z_T": self.z_T.cpu().numpy()}
        for kind, maps in (("self", self.self_maps), ("cross", self.cross_maps)):
            for t, layers in maps.items():
                for name, m in layers.items():
                    arrays[f"t{t:04d}/{name}/{kind}"] = m.cpu().numpy()
        save_archive(path, arrays, {"T": self.T, "kind": "attention_store"})

    @classmethod
    def load(cls, path) -> "AttentionStore":
        arrays, meta = load_archive(path)
        if meta.get("kind") != "attention_store":
            raise DomainError(f"{path} is not an attention store")
        store = cls(int(meta["T"]))
        store.z_T = torch.from_numpy(arrays.pop("z_T"))
        for key, arr in arrays.items():
            tag, name, kind = key.split("/")
            t = int(tag[1:])
            target = store.self_maps if kind == "self" else store.cross_maps
            target.setdefault(t, {})[name] = torch.from_numpy(arr)
        store.validate()
        return store


class AttentionRecorder:
    """Hook that passes attention through unchanged."""

    def __call__(self, name: str, probs: torch.Tensor) -> torch.Tensor:
        return probs


def renormalize_rows(p: torch.Tensor) -> torch.Tensor:
    return p / p.sum(dim=-1, keepdim=True)


def normalize_per_frame(maps: torch.Tensor) -> torch.Tensor:
    """Scale each frame's ``[N]`` map so its peak is 1."""
    peak = maps.amax(dim=-1, keepdim=True)
    return maps / torch.where(peak > 0, peak, torch.ones_like(peak))


def word_activation(cross_maps: Mapping[str, torch.Tensor] | Sequence[torch.Tensor], token_index: int) -> torch.Tensor:
    """Layer- and head-averaged attention to one token: ``[F, N]``."""
    layers = list(cross_maps.values()) if isinstance(cross_maps, Mapping) else list(cross_maps)
    stacked = torch.stack([m[..., token_index].mean(dim=1) for m in layers])
    return stacked.mean(dim=0)


def threshold_mask(normalized: torch.Tensor, tau: float) -> torch.Tensor:
    return (normalized >= tau).to(normalized.dtype)


def get_mask(cross_maps, token_indices: Sequence[int], tau: float) -> torch.Tensor:
    """Binary ``[F, N]`` mask: union over words of the normalized activation ``>= tau``."""
    if not token_indices:
        raise DomainError("need at least one target word")
    mask = None
    for idx in token_indices:
        m = threshold_mask(normalize_per_frame(word_activation(cross_maps, idx)), tau)
        mask = m if mask is None else torch.maximum(mask, m)
    return mask


def mask_for_words(cross_maps, prompt: PromptEmbedding, words: Sequence[str], tau: float) -> torch.Tensor:
    indices = []
    for w in words:
        indices.extend(prompt.index_of(w))
    return get_mask(cross_maps, indices, tau)


def remix_self_attention(s_src: torch.Tensor, s_edit: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Blend per query position.

    ``mask`` is ``[F, N]`` over query positions and broadcasts over heads and
    keys, so each binary-masked row is copied whole from one input and stays
    row-stochastic without renormalizing.
    """
    if s_src.shape != s_edit.shape:
        raise DomainError(f"self-attention shapes differ: {tuple(s_src.shape)} vs {tuple(s_edit.shape)}")
    f, _, n, _ = s_src.shape
    if tuple(mask.shape) != (f, n):
        raise DomainError(f"mask must be [{f}, {n}], got {tuple(mask.shape)}")
    m = mask.to(s_src.dtype)[:, None, :, None]
    return m * s_edit + (1 - m) * s_src


class RemixHook:
    """Attention hook for one generation step inside the fusion window."""

    def __init__(
        self,
        src_self: Mapping[str, torch.Tensor],
        src_cross: Mapping[str, torch.Tensor],
        mask: Optional[torch.Tensor],
        retained: Sequence[tuple[int, int]] = (),
    ):
        self.src_self = src_self
        self.src_cross = src_cross
        self.mask = mask
        self.retained = tuple(retained)

    def __call__(self, name: str, probs: torch.Tensor) -> torch.Tensor:
        if name.endswith(".self") and self.mask is not None:
            return remix_self_attention(self.src_self[name].to(probs.dtype), probs, self.mask)
        if name.endswith(".cross") and self.retained:
            src = self.src_cross[name].to(probs.dtype)
            out = probs.clone()
            for tgt_pos, src_pos in self.retained:
                out[..., tgt_pos] = src[..., src_pos]
            return renormalize_rows(out)
        return probs


@torch.no_grad()
def invert_with_guidance(
    model: VideoEditModel,
    z0: torch.Tensor,
    ctrl_edit,
    prompt: PromptEmbedding,
    schedule: NoiseSchedule,
    guidance_scale: float = 1.0,
    refine_steps: int = 5,
) -> tuple[torch.Tensor, AttentionStore]:
    """DDIM-invert ``z0`` for ``t = 1..T`` under control guidance, recording attention.

    Each step first predicts noise at ``z_{t-1}``, then re-predicts it at the
    current estimate of ``z_t`` ``refine_steps`` times, so the result is a
    fixed point of the matching denoise step. The attention recorded for ``t``
    comes from the last prediction. ``refine_steps=0`` is plain DDIM inversion.
    """
    if refine_steps < 0:
        raise DomainError("refine_steps must be >= 0")
    store = AttentionStore(schedule.T)
    z = z0
    recorder = AttentionRecorder()
    for t in range(1, schedule.T + 1):
        eps, maps = model.predict_noise(z, t, prompt, ctrl_edit, recorder, guidance_scale)
        z_t = ddim_invert_step(z, eps, t, schedule)
        for _ in range(refine_steps):
            eps, maps = model.predict_noise(z_t, t, prompt, ctrl_edit, recorder, guidance_scale)
            z_t = ddim_invert_step(z, eps, t, schedule)
        if not torch.isfinite(z_t).all():
            raise FloatingPointError(f"non-finite latent during inversion at t={t}")
        store.record(t, maps.self_maps, maps.cross_maps)
        z = z_t
    store.z_T = z.detach().clone()
    return z, store


@torch.no_grad()
def generate_with_remix(
    model: VideoEditModel,
    z_T: torch.Tensor,
    store: AttentionStore,
    ctrl_edit,
    prompt_target: PromptEmbedding,
    cfg: RemixConfig,
    schedule: NoiseSchedule,
    prompt_source: Optional[PromptEmbedding] = None,
    retained: Optional[Sequence[tuple[int, int]]] = None,
    guidance_scale: float = 1.0,
) -> torch.Tensor:
    """Guided DDIM generation ``t = T..1`` with attention remixing inside the fusion window.

    Masks come from the source prompt's word(s) ``cfg.words``; with no words,
    self-attention is not blended. ``retained`` lists ``(target, source)``
    token positions whose cross-attention is copied from the source; by
    default every position of identical prompts is retained.
    """
    if store.T != schedule.T:
        raise DomainError(f"store has T={store.T} but schedule has T={schedule.T}")
    prompt_source = prompt_source or prompt_target
    if retained is None:
        same = prompt_source.token_labels == prompt_target.token_labels
        retained = [(i, i) for i in range(len(prompt_target))] if same else []
    z = z_T
    for t in range(schedule.T, 0, -1):
        hook = None
        if cfg.in_window(t, schedule.T):
            mask = mask_for_words(store.cross_maps[t], prompt_source, cfg.words, cfg.tau) if cfg.words else None
            hook = RemixHook(store.self_maps[t], store.cross_maps[t], mask, retained)
        eps, _ = model.predict_noise(z, t, prompt_target, ctrl_edit, hook, guidance_scale)
        z = ddim_denoise_step(z, eps, t, schedule)
        if not torch.isfinite(z).all():
            raise FloatingPointError(f"non-finite latent during generation at t={t}")
    return z


def relative_l2(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))

"""Assembles encoder, text embedding, denoiser and structure guide into one editable model."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .autoencoder import PatchAutoencoder
from .denoiser import AttentionHook, AttentionMaps, Denoiser, DenoiserConfig, PromptEmbedding, TextEncoder
from .guide import StructureGuide, as_control_tensor
from .errors import DomainError
from .schedule import cfg_combine

TRAINABLE_GROUPS = ("lora", "token_embedding", "guide_temporal", "guide_full")


@dataclass(frozen=True)
class PromptSpec:
    """A prompt as word ids, one label per word, and the slot of the tuned token."""

    word_ids: tuple[int, ...]
    labels: tuple[str, ...]
    custom_index: Optional[int] = None

    def __post_init__(self):
        if len(self.word_ids) != len(self.labels):
            raise DomainError("need one label per word id")

    def retained_positions(self, source: "PromptSpec") -> list[tuple[int, int]]:
        """``(target_pos, source_pos)`` pairs for words present, with the same id, in both prompts."""
        pairs = []
        used = set()
        for i, (wid, lab) in enumerate(zip(self.word_ids, self.labels)):
            for j, (swid, slab) in enumerate(zip(source.word_ids, source.labels)):
                if j not in used and swid == wid and slab == lab:
                    pairs.append((i, j))
                    used.add(j)
                    break
        return pairs


class VideoEditModel(nn.Module):
    """Frozen base weights are a pure function of ``(cfg, seed)``."""

    def __init__(self, cfg: Optional[DenoiserConfig] = None, seed: int = 0, base_word_id: int = 1):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.text = TextEncoder(self.cfg.vocab_size, self.cfg.embed_dim, base_word_id)
            self.denoiser = Denoiser(self.cfg)
            self.guide = StructureGuide(self.cfg)
        self.autoencoder = PatchAutoencoder(self.cfg.patch)
        # everything starts frozen; customization unfreezes the groups it tunes
        self.set_trainable(())

    # -- parameter groups ------------------------------------------------
    def parameter_group(self, group: str) -> list[nn.Parameter]:
        if group == "lora":
            return [p for layer in self.denoiser.lora_layers() for p in (layer.lora_A, layer.lora_B)]
        if group == "token_embedding":
            return [self.text.custom_token]
        if group == "guide_temporal":
            return list(self.guide.temporal_parameters())
        if group == "guide_full":
            return list(self.guide.parameters())
        raise KeyError(f"unknown parameter group {group!r}; choose from {TRAINABLE_GROUPS}")

    def set_trainable(self, groups: Sequence[str]) -> list[nn.Parameter]:
        for p in self.parameters():
            p.requires_grad_(False)
        chosen: dict[int, nn.Parameter] = {}
        for g in groups:
            for p in self.parameter_group(g):
                chosen[id(p)] = p
        for p in chosen.values():
            p.requires_grad_(True)
        # stable order: model registration order
        return [p for p in self.parameters() if id(p) in chosen]

    def named_trainables(self, groups: Sequence[str]) -> Iterator[tuple[str, nn.Parameter]]:
        ids = {id(p) for g in groups for p in self.parameter_group(g)}
        for name, p in self.named_parameters():
            if id(p) in ids:
                yield name, p

    def frozen_hash(self, groups: Sequence[str]) -> str:
        """SHA-256 over every parameter and buffer outside the trainable groups."""
        ids = {id(p) for g in groups for p in self.parameter_group(g)}
        h = hashlib.sha256()
        for name, tensor in list(self.named_parameters()) + list(self.named_buffers()):
            if id(tensor) in ids:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(tensor.detach().cpu().numpy().astype("<f4")).tobytes())
        return h.hexdigest()

    # -- inference -------------------------------------------------------
    def prompt(self, spec: PromptSpec) -> PromptEmbedding:
        return self.text(spec.word_ids, spec.labels, spec.custom_index)

    def null_prompt(self) -> PromptEmbedding:
        return PromptEmbedding(self.text.table[:1].to(self.text.custom_token.dtype), ("<null>",))

    def control_residuals(self, z_t, t, prompt, ctrl) -> list[torch.Tensor]:
        return self.guide(as_control_tensor(ctrl, z_t.dtype), z_t, t, prompt)

    def guide_denoise(
        self,
        z_t: torch.Tensor,
        t: int,
        prompt: PromptEmbedding,
        ctrl=None,
        hook: Optional[AttentionHook] = None,
    ) -> tuple[torch.Tensor, AttentionMaps]:
        residuals = None if ctrl is None else self.control_residuals(z_t, t, prompt, ctrl)
        return self.denoiser(z_t, t, prompt, residuals, hook)

    def predict_noise(self, z_t, t, prompt, ctrl=None, hook=None, guidance_scale: float = 1.0):
        """Guided noise prediction, with classifier-free guidance when ``guidance_scale != 1``.

        The attention hook only sees the conditional pass.
        """
        eps, maps = self.guide_denoise(z_t, t, prompt, ctrl, hook)
        if guidance_scale != 1.0:
            eps_u, _ = self.guide_denoise(z_t, t, self.null_prompt(), ctrl)
            eps = cfg_combine(eps_u, eps, guidance_scale)
        return eps, maps

    def encode(self, frames):
        return self.autoencoder.encode(frames).to(self.denoiser.in_proj.weight.dtype)

    def decode(self, latent):
        return self.autoencoder.decode(latent)

"""Structure-guide branch: encodes control maps into per-block denoiser residuals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch
from torch import nn

from .denoiser import (
    CrossAttention,
    DenoiserConfig,
    FeedForward,
    PromptEmbedding,
    SpatioTemporalSelfAttention,
    TimeEmbedding,
    latent_to_tokens,
    multihead_attention,
)
from .errors import DomainError

CONTROL_KINDS = ("edge", "sketch", "pose")


@dataclass
class ControlSequence:
    """``[F, 1, H', W']`` control maps in [0, 1]."""

    maps: np.ndarray
    kind: str = "edge"
    empty_frames: tuple[int, ...] = ()

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.float64)
        if m.ndim != 4 or m.shape[1] != 1:
            raise DomainError(f"control maps must be [F, 1, H, W], got {m.shape}")
        if self.kind not in CONTROL_KINDS:
            raise DomainError(f"unknown control kind {self.kind!r}")
        self.maps = np.clip(m, 0.0, 1.0)

    def __len__(self) -> int:
        return self.maps.shape[0]

    def frame(self, i: int) -> np.ndarray:
        return self.maps[i, 0]


def as_control_tensor(ctrl, dtype=torch.float32) -> torch.Tensor:
    if isinstance(ctrl, ControlSequence):
        ctrl = ctrl.maps
    return torch.as_tensor(np.asarray(ctrl), dtype=dtype) if not torch.is_tensor(ctrl) else ctrl.to(dtype)


class TemporalAttention(nn.Module):
    """Full attention across frames at each spatial position; output starts at zero."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def forward(self, x):
        xt = x.transpose(0, 1)  # [N, F, d]
        out, _ = multihead_attention(self.to_q(xt), self.to_k(xt), self.to_v(xt), self.heads)
        return self.to_out(out).transpose(0, 1)


class GuideBlock(nn.Module):
    def __init__(self, dim: int, cfg: DenoiserConfig):
        super().__init__()
        self.time_proj = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = SpatioTemporalSelfAttention(dim, cfg.heads)
        self.norm_t = nn.LayerNorm(dim)
        self.attn_temp = TemporalAttention(dim, cfg.heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = CrossAttention(dim, cfg.embed_dim, cfg.heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, h, temb, context):
        h = h + self.time_proj(temb)
        h = h + self.attn1(self.norm1(h))[0]
        h = h + self.attn_temp(self.norm_t(h))
        h = h + self.attn2(self.norm2(h), context)[0]
        return h + self.ff(self.norm3(h))


class StructureGuide(nn.Module):
    """Half-width mirror of the denoiser blocks with a convolutional control stem.

    Every residual leaves through a zero-initialized projection, so a freshly
    built guide is exactly transparent.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.hidden // 2
        self.width = g
        self.stem = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, g, kernel_size=cfg.patch, stride=cfg.patch),
        )
        self.z_in = nn.Linear(cfg.channels, g)
        self.time = TimeEmbedding(g)
        self.blocks = nn.ModuleList(GuideBlock(g, cfg) for _ in range(cfg.blocks))
        self.zero_projs = nn.ModuleList(nn.Linear(g, cfg.hidden) for _ in range(cfg.blocks))
        for proj in self.zero_projs:
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)

    def temporal_parameters(self) -> Iterator[nn.Parameter]:
        for block in self.blocks:
            yield from block.norm_t.parameters()
            yield from block.attn_temp.parameters()
        yield from self.zero_projs.parameters()

    def forward(self, ctrl: torch.Tensor, z_t: torch.Tensor, t: int, prompt: PromptEmbedding) -> list[torch.Tensor]:
        c = self.cfg
        if ctrl.shape[0] != z_t.shape[0]:
            raise DomainError(f"control has {ctrl.shape[0]} frames but latent has {z_t.shape[0]}")
        if tuple(ctrl.shape[1:]) != (1, *c.pixel_size):
            raise DomainError(f"control maps must be [F, 1, {c.pixel_size[0]}, {c.pixel_size[1]}], got {tuple(ctrl.shape)}")
        hint = latent_to_tokens(self.stem(ctrl.to(z_t.dtype)))
        h = self.z_in(latent_to_tokens(z_t)) + hint
        temb = self.time(t, h.dtype)
        residuals = []
        for block, proj in zip(self.blocks, self.zero_projs):
            h = block(h, temb, prompt.tokens)
            residuals.append(proj(h))
        return residuals


def encode_control(guide: StructureGuide, ctrl, z_t: torch.Tensor, t: int, prompt: PromptEmbedding) -> list[torch.Tensor]:
    return guide(as_control_tensor(ctrl, z_t.dtype), z_t, t, prompt)

"""Tiny latent video denoiser with sparse-causal self-attention and LoRA cross-attention.

Latents are ``[F, C, H, W]``; internally every frame is flattened to ``N = H*W``
tokens of width ``hidden``. With ``positional=True`` a fixed sinusoidal
position table is added to the input tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError

# (layer name, attention probabilities) -> attention probabilities
AttentionHook = Callable[[str, torch.Tensor], torch.Tensor]


@dataclass
class DenoiserConfig:
    frames: int = 8
    channels: int = 48
    height: int = 8
    width: int = 8
    hidden: int = 64
    heads: int = 2
    blocks: int = 2
    embed_dim: int = 32
    vocab_size: int = 32
    lora_rank: int = 4
    patch: int = 4
    positional: bool = False

    def __post_init__(self):
        for name in ("frames", "channels", "height", "width", "hidden", "heads", "blocks",
                     "embed_dim", "vocab_size", "lora_rank", "patch"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise DomainError("hidden must be divisible by heads")
        if self.channels != 3 * self.patch ** 2:
            raise DomainError(f"channels must equal 3 * patch^2 = {3 * self.patch ** 2}")
        if self.lora_rank >= min(self.hidden, self.embed_dim):
            raise DomainError("lora_rank must be smaller than the projection dimensions")

    @property
    def positions(self) -> int:
        return self.height * self.width

    @property
    def pixel_size(self) -> tuple[int, int]:
        return self.height * self.patch, self.width * self.patch

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return self.frames, self.channels, self.height, self.width


@dataclass
class PromptEmbedding:
    """``L`` token vectors plus the word label of each token."""

    tokens: torch.Tensor
    token_labels: tuple[str, ...]
    custom_token_index: Optional[int] = None

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DomainError("tokens must be a non-empty [L, k] array")
        if len(self.token_labels) != self.tokens.shape[0]:
            raise DomainError("need one label per token")
        if not torch.isfinite(self.tokens).all():
            raise DomainError("token vectors must be finite")
        if self.custom_token_index is not None and not 0 <= self.custom_token_index < len(self.token_labels):
            raise DomainError("custom_token_index out of range")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def index_of(self, label: str) -> list[int]:
        idx = [i for i, lab in enumerate(self.token_labels) if lab == label]
        if not idx:
            raise KeyError(f"unknown word {label!r}; available: {list(self.token_labels)}")
        return idx


@dataclass
class AttentionMaps:
    """Attention probabilities of one denoiser call, keyed by layer name.

    Self maps are ``[F, heads, N, 2N]`` (keys: frame 0 then frame f-1); cross
    maps are ``[F, heads, N, L]``.
    """

    self_maps: dict[str, torch.Tensor] = field(default_factory=dict)
    cross_maps: dict[str, torch.Tensor] = field(default_factory=dict)


def lora_linear(x, W0, A, B):
    """``(W0 + B @ A) @ x`` for vectors or row-batches ``x[..., k]``."""
    if W0.shape[1] != x.shape[-1] or A.shape[1] != x.shape[-1] or B.shape[0] != W0.shape[0] \
            or B.shape[1] != A.shape[0]:
        raise DomainError(
            f"lora_linear shapes disagree: x{tuple(x.shape)} W0{tuple(W0.shape)} "
            f"A{tuple(A.shape)} B{tuple(B.shape)}"
        )
    # B = 0 contributes an exact zero, so the frozen output is reproduced bitwise.
    return x @ W0.T + (x @ A.T) @ B.T


class LoRALinear(nn.Module):
    """Bias-free frozen projection with a rank-``r`` additive update ``B @ A``."""

    def __init__(self, in_features: int, out_features: int, rank: int):
        super().__init__()
        base = nn.Linear(in_features, out_features, bias=False)
        self.weight = nn.Parameter(base.weight.detach().clone(), requires_grad=False)
        self.lora_A = nn.Parameter(torch.empty(rank, in_features))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.lora_B = nn.Parameter(torch.zeros(out_features, rank))
        self.enabled = True

    def forward(self, x):
        if not self.enabled:
            return x @ self.weight.T
        return lora_linear(x, self.weight, self.lora_A, self.lora_B)


def sinusoidal_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = float(t) * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=torch.float64)])
    return emb.to(dtype)


def positional_embedding(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal table ``[h*w, dim]``: half the channels encode the row, half the column."""
    quarter = dim // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float64) / max(quarter, 1))
    rows = torch.arange(h, dtype=torch.float64)[:, None] * freqs
    cols = torch.arange(w, dtype=torch.float64)[:, None] * freqs
    row_emb = torch.cat([torch.sin(rows), torch.cos(rows)], dim=1)[:, None, :].expand(h, w, 2 * quarter)
    col_emb = torch.cat([torch.sin(cols), torch.cos(cols)], dim=1)[None, :, :].expand(h, w, 2 * quarter)
    table = torch.zeros(h, w, dim, dtype=torch.float64)
    table[..., : 4 * quarter] = torch.cat([row_emb, col_emb], dim=-1)
    return table.reshape(h * w, dim).to(dtype)


def _split_heads(x, heads):
    *lead, n, w = x.shape
    return x.reshape(*lead, n, heads, w // heads).transpose(-3, -2)


def _merge_heads(x):
    *lead, h, n, d = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * d)


def multihead_attention(q, k, v, heads: int, name: str = "", hook: Optional[AttentionHook] = None):
    qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    probs = torch.softmax(scores, dim=-1)
    if hook is not None:
        probs = hook(name, probs)
    return _merge_heads(probs @ vh), probs


def sparse_causal_keys(x: torch.Tensor) -> torch.Tensor:
    """Key/value tokens for every frame: frame 0 followed by frame ``f-1``.

    Frame 0 sees itself twice, which leaves its attention output identical to
    plain spatial self-attention.
    """
    prev = torch.clamp(torch.arange(x.shape[0]) - 1, min=0)
    first = x[:1].expand_as(x)
    return torch.cat([first, x[prev]], dim=1)


class SpatioTemporalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, name="", hook=None):
        kv = sparse_causal_keys(x)
        out, probs = multihead_attention(self.to_q(x), self.to_k(kv), self.to_v(kv), self.heads, name, hook)
        return self.to_out(out), probs


def spatio_temporal_self_attention(layer: SpatioTemporalSelfAttention, features: torch.Tensor):
    """Functional entry point: ``[F, N, width]`` -> (features', attention probs)."""
    if features.ndim != 3 or features.shape[0] < 1:
        raise DomainError("features must be [F, N, width] with F >= 1")
    return layer(features)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, context_dim: int, heads: int, rank: Optional[int] = None):
        super().__init__()
        self.heads = heads
        self.context_dim = context_dim
        if rank is None:
            self.to_q = nn.Linear(dim, dim, bias=False)
            self.to_k = nn.Linear(context_dim, dim, bias=False)
            self.to_v = nn.Linear(context_dim, dim, bias=False)
        else:
            self.to_q = LoRALinear(dim, dim, rank)
            self.to_k = LoRALinear(context_dim, dim, rank)
            self.to_v = LoRALinear(context_dim, dim, rank)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context, name="", hook=None):
        if context.shape[-1] != self.context_dim:
            raise DomainError(f"prompt embedding dim {context.shape[-1]} != {self.context_dim}")
        q = self.to_q(x)
        ctx = context.unsqueeze(0).expand(x.shape[0], -1, -1)
        out, probs = multihead_attention(q, self.to_k(ctx), self.to_v(ctx), self.heads, name, hook)
        return self.to_out(out), probs


def cross_attention(layer: CrossAttention, features: torch.Tensor, prompt: PromptEmbedding):
    return layer(features, prompt.tokens)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class DenoiserBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.hidden
        self.time_proj = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.attn1 = SpatioTemporalSelfAttention(d, cfg.heads)
        self.norm2 = nn.LayerNorm(d)
        self.attn2 = CrossAttention(d, cfg.embed_dim, cfg.heads, rank=cfg.lora_rank)
        self.norm3 = nn.LayerNorm(d)
        self.ff = FeedForward(d)

    def forward(self, h, temb, context, name, maps: AttentionMaps, hook=None):
        h = h + self.time_proj(temb)
        a, p = self.attn1(self.norm1(h), f"{name}.self", hook)
        maps.self_maps[f"{name}.self"] = p
        h = h + a
        a, p = self.attn2(self.norm2(h), context, f"{name}.cross", hook)
        maps.cross_maps[f"{name}.cross"] = p
        h = h + a
        return h + self.ff(self.norm3(h))


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: int, dtype):
        return self.mlp(sinusoidal_embedding(t, self.dim, dtype))


def latent_to_tokens(z: torch.Tensor) -> torch.Tensor:
    f, c, h, w = z.shape
    return z.reshape(f, c, h * w).transpose(1, 2)


def tokens_to_latent(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    f, n, c = x.shape
    return x.transpose(1, 2).reshape(f, c, h, w)


class Denoiser(nn.Module):
    """Noise predictor ``eps(z_t, t, prompt, residuals)``."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.channels, cfg.hidden)
        if cfg.positional:
            self.register_buffer("pos", positional_embedding(cfg.height, cfg.width, cfg.hidden))
        else:
            self.pos = None
        self.time = TimeEmbedding(cfg.hidden)
        self.blocks = nn.ModuleList(DenoiserBlock(cfg) for _ in range(cfg.blocks))
        self.norm_out = nn.LayerNorm(cfg.hidden)
        self.out_proj = nn.Linear(cfg.hidden, cfg.channels)

    def block_shapes(self) -> list[tuple[int, int, int]]:
        c = self.cfg
        return [(c.frames, c.positions, c.hidden)] * c.blocks

    def lora_layers(self) -> list[LoRALinear]:
        return [m for m in self.modules() if isinstance(m, LoRALinear)]

    def forward(
        self,
        z_t: torch.Tensor,
        t: int,
        prompt: PromptEmbedding,
        residuals: Optional[Sequence[torch.Tensor]] = None,
        hook: Optional[AttentionHook] = None,
    ) -> tuple[torch.Tensor, AttentionMaps]:
        c = self.cfg
        if tuple(z_t.shape[1:]) != c.latent_shape[1:]:
            raise DomainError(f"latent shape {tuple(z_t.shape)} does not match config {c.latent_shape}")
        if residuals is not None:
            if len(residuals) != len(self.blocks):
                raise DomainError(f"expected {len(self.blocks)} residuals, got {len(residuals)}")
            want = (z_t.shape[0], c.positions, c.hidden)
            for i, r in enumerate(residuals):
                if tuple(r.shape) != want:
                    raise DomainError(f"residual {i} has shape {tuple(r.shape)}, expected {want}")
        maps = AttentionMaps()
        h = self.in_proj(latent_to_tokens(z_t))
        if self.pos is not None:
            h = h + self.pos.to(h.dtype)
        temb = self.time(t, h.dtype)
        for i, block in enumerate(self.blocks):
            h = block(h, temb, prompt.tokens, f"block{i}", maps, hook)
            if residuals is not None:
                h = h + residuals[i]
        eps = self.out_proj(self.norm_out(h))
        return tokens_to_latent(eps, c.height, c.width), maps


class TextEncoder(nn.Module):
    """Frozen word-ID embedding table plus one tunable custom-token vector."""

    def __init__(self, vocab_size: int, dim: int, base_word_id: int = 1):
        super().__init__()
        table = torch.randn(vocab_size, dim) / math.sqrt(dim)
        self.register_buffer("table", table)
        self.base_word_id = base_word_id
        self.custom_token = nn.Parameter(table[base_word_id].clone())

    def set_base_word(self, word_id: int) -> None:
        self.base_word_id = int(word_id)
        with torch.no_grad():
            self.custom_token.copy_(self.table[word_id])

    def forward(
        self,
        word_ids: Sequence[int],
        labels: Optional[Sequence[str]] = None,
        custom_index: Optional[int] = None,
    ) -> PromptEmbedding:
        ids = torch.as_tensor(list(word_ids), dtype=torch.long)
        if ids.numel() == 0:
            raise DomainError("prompt must contain at least one word")
        if ids.min() < 0 or ids.max() >= self.table.shape[0]:
            raise DomainError("word id outside the vocabulary")
        tokens = self.table[ids].to(self.custom_token.dtype)
        if custom_index is not None:
            mask = torch.zeros(len(ids), 1, dtype=tokens.dtype)
            mask[custom_index] = 1.0
            tokens = tokens * (1 - mask) + mask * self.custom_token.unsqueeze(0)
        labels = tuple(labels) if labels is not None else tuple(str(i) for i in ids.tolist())
        return PromptEmbedding(tokens, labels, custom_index)

"""Frame-sequence metrics with pluggable embedders."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .autoencoder import PatchAutoencoder
from .errors import DomainError

# frames [F, ...] -> embeddings [F, D]
Embedder = Callable[[np.ndarray], np.ndarray]


def latent_mean_embedder(patch: int = 4) -> Embedder:
    """Mean-pool the patch latents of each frame into one vector."""
    ae = PatchAutoencoder(patch)

    def embed(frames: np.ndarray) -> np.ndarray:
        z = ae.encode(np.asarray(frames, dtype=np.float64))
        return z.numpy().mean(axis=(2, 3))

    return embed


def temporal_consistency(frames, embedder: Optional[Embedder] = None) -> float:
    """Mean cosine similarity of the embeddings of consecutive frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        raise DomainError("temporal consistency needs at least two frames")
    emb = (embedder or latent_mean_embedder())(frames)
    emb = np.asarray(emb, dtype=np.float64).reshape(frames.shape[0], -1)
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0):
        raise DomainError("a frame embedding has zero norm; cosine similarity is undefined")
    unit = emb / norms[:, None]
    cos = np.sum(unit[1:] * unit[:-1], axis=1)
    # equal embeddings are exactly self-similar; skip the rounding of the dot product
    cos = np.where(np.all(emb[1:] == emb[:-1], axis=1), 1.0, cos)
    return float(np.mean(np.clip(cos, -1.0, 1.0)))


def frame_accuracy(frames, target_prompt, source_prompt, embedder=None):
    """Share of frames that match the target prompt better than the source prompt.

    Needs a joint image/text embedder, which is not shipped; without one the
    result is the string ``"unavailable"``. ``embedder(frames, prompts)`` must
    return an ``[F, len(prompts)]`` array of similarities.
    """
    if embedder is None:
        return "unavailable"
    sims = np.asarray(embedder(np.asarray(frames), [target_prompt, source_prompt]), dtype=np.float64)
    return float(np.mean(sims[:, 0] > sims[:, 1]))


def background_mae(a, b, exclude: np.ndarray) -> float:
    """Mean absolute difference over pixels where ``exclude`` is false, across frames and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    keep = ~np.asarray(exclude, dtype=bool)
    if keep.shape != (a.shape[0],) + a.shape[2:]:
        raise DomainError(f"exclude mask must be [F, H, W], got {keep.shape}")
    if not keep.any():
        raise DomainError("exclusion mask covers every pixel")
    diff = np.abs(a - b).mean(axis=1)
    return float(diff[keep].mean())

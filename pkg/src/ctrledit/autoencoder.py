"""Fixed orthonormal patch autoencoder standing in for a learned VAE.

Each ``p x p`` RGB patch is mapped through ``kron(color, dct2d)``, an
orthogonal ``3p^2 x 3p^2`` matrix. Channel 0 of the latent is the patch's
luminance DC term, so mean-pooled latents make a cheap frame embedding.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DomainError


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_COLOR = np.array(
    [
        [1.0, 1.0, 1.0],
        [1.0, -1.0, 0.0],
        [1.0, 1.0, -2.0],
    ]
) / np.array([[np.sqrt(3.0)], [np.sqrt(2.0)], [np.sqrt(6.0)]])


def patch_basis(patch: int) -> np.ndarray:
    dct = _dct_matrix(patch)
    return np.kron(_COLOR, np.kron(dct, dct))


class PatchAutoencoder:
    def __init__(self, patch: int = 4, channels: int = 3):
        if channels != 3:
            raise DomainError("only RGB input is supported")
        self.patch = patch
        self.latent_channels = channels * patch * patch
        self._basis = torch.from_numpy(patch_basis(patch))

    def _basis_like(self, x: torch.Tensor) -> torch.Tensor:
        return self._basis.to(dtype=x.dtype, device=x.device)

    def encode(self, frames) -> torch.Tensor:
        """``[F, 3, H', W']`` pixels -> ``[F, 3p^2, H'/p, W'/p]`` latent."""
        x = torch.as_tensor(frames)
        if not x.is_floating_point():
            x = x.float()
        f, c, h, w = x.shape
        p = self.patch
        if c != 3 or h % p or w % p:
            raise DomainError(f"frames must be [F, 3, H, W] with H, W divisible by {p}; got {tuple(x.shape)}")
        # [F, 3, h, p, w, p] -> [F, h, w, 3, p, p] -> flatten patch vector in (c, py, px) order
        patches = x.reshape(f, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        vec = patches.reshape(f, h // p, w // p, c * p * p)
        lat = vec @ self._basis_like(x).T
        return lat.permute(0, 3, 1, 2).contiguous()

    def decode(self, latent) -> torch.Tensor:
        z = torch.as_tensor(latent)
        f, ch, h, w = z.shape
        p = self.patch
        if ch != self.latent_channels:
            raise DomainError(f"latent must have {self.latent_channels} channels, got {ch}")
        vec = z.permute(0, 2, 3, 1) @ self._basis_like(z)
        patches = vec.reshape(f, h, w, 3, p, p).permute(0, 3, 1, 4, 2, 5)
        return patches.reshape(f, 3, h * p, w * p).contiguous()

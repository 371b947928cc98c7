import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrledit.autoencoder import PatchAutoencoder, patch_basis
from ctrledit.errors import DomainError


@pytest.mark.parametrize("p", [1, 2, 4])
def test_basis_is_orthonormal(p):
    b = patch_basis(p)
    np.testing.assert_allclose(b @ b.T, np.eye(3 * p * p), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), f=st.integers(1, 3), hp=st.integers(1, 3), wp=st.integers(1, 3))
def test_round_trip_is_exact(seed, f, hp, wp):
    ae = PatchAutoencoder(4)
    x = torch.from_numpy(np.random.default_rng(seed).random((f, 3, 4 * hp, 4 * wp)))
    z = ae.encode(x)
    assert z.shape == (f, 48, hp, wp)
    assert z.numel() == x.numel()
    torch.testing.assert_close(ae.decode(z), x, rtol=0, atol=1e-12)


def test_round_trip_float32():
    ae = PatchAutoencoder(4)
    x = torch.rand(2, 3, 32, 32)
    assert float((ae.decode(ae.encode(x)) - x).abs().max()) < 1e-6


def test_encode_preserves_energy_and_zeros():
    ae = PatchAutoencoder(4)
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert float(ae.encode(x).norm()) == pytest.approx(float(x.norm()), rel=1e-12)
    assert torch.count_nonzero(ae.encode(torch.zeros(1, 3, 8, 8))) == 0


def test_dc_channel_is_scaled_patch_luma():
    ae = PatchAutoencoder(4)
    x = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
    z = ae.encode(x)
    # a gray patch only excites the luminance DC coefficient: sum over 48 pixels / sqrt(48)
    assert float(z[0, 0, 0, 0]) == pytest.approx(0.5 * 48 / np.sqrt(48))
    assert float(z[0, 1:].abs().max()) < 1e-12


@pytest.mark.parametrize("shape", [(1, 3, 30, 32), (1, 3, 32, 6), (1, 1, 32, 32)])
def test_rejects_bad_shapes(shape):
    with pytest.raises(DomainError):
        PatchAutoencoder(4).encode(torch.zeros(shape))


def test_decode_rejects_wrong_channels():
    with pytest.raises(DomainError):
        PatchAutoencoder(4).decode(torch.zeros(1, 4, 8, 8))

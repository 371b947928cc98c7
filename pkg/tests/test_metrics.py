import math

import numpy as np
import pytest

from ctrledit.errors import DomainError
from ctrledit.metrics import background_mae, frame_accuracy, latent_mean_embedder, temporal_consistency


def identity(frames):
    return np.asarray(frames).reshape(len(frames), -1)


def test_forty_five_degree_pair():
    frames = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert temporal_consistency(frames, identity) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)


def test_alternating_orthogonal_frames_score_zero():
    frames = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    assert temporal_consistency(frames, identity) == 0.0


def test_rotating_unit_vectors():
    # consecutive embeddings 30, 60 and 90 degrees apart
    angles = np.radians([0.0, 30.0, 90.0, 180.0])
    frames = np.stack([np.cos(angles), np.sin(angles)], axis=1) * np.array([[1.0], [2.0], [0.5], [3.0]])
    expected = np.mean(np.cos(np.radians([30.0, 60.0, 90.0])))
    assert abs(temporal_consistency(frames, identity) - expected) < 1e-6


def test_identical_frames_are_exactly_one():
    frame = np.random.default_rng(0).random((3, 16, 16))
    frames = np.repeat(frame[None], 5, axis=0)
    assert temporal_consistency(frames) == 1.0
    assert temporal_consistency(np.array([[0.3, 0.7, 0.1]] * 3), identity) == 1.0


def test_degenerate_inputs():
    with pytest.raises(DomainError):
        temporal_consistency(np.ones((1, 4)), identity)
    with pytest.raises(DomainError, match="zero norm"):
        temporal_consistency(np.array([[1.0, 0.0], [0.0, 0.0]]), identity)


def test_latent_embedder_shape():
    emb = latent_mean_embedder()(np.zeros((2, 3, 8, 8)))
    assert emb.shape == (2, 48)


def test_frame_accuracy_needs_an_embedder():
    assert frame_accuracy(np.zeros((2, 3, 4, 4)), "a", "b") == "unavailable"
    sims = lambda frames, prompts: np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.5]])
    assert frame_accuracy(np.zeros((3, 3, 4, 4)), "a", "b", sims) == pytest.approx(2 / 3)


def test_background_mae():
    a = np.zeros((1, 3, 2, 2))
    b = np.zeros((1, 3, 2, 2))
    b[0, :, 0, 0] = 1.0
    b[0, 0, 1, 1] = 0.3
    exclude = np.zeros((1, 2, 2), dtype=bool)
    exclude[0, 0, 0] = True
    assert background_mae(a, b, exclude) == pytest.approx(0.1 / 3)
    with pytest.raises(DomainError):
        background_mae(a, b, np.ones((1, 2, 2), dtype=bool))
    with pytest.raises(DomainError):
        background_mae(a, b, np.zeros((2, 2)))

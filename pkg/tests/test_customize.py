import csv

import numpy as np
import pytest
import torch

from ctrledit.checkpoint import archive_bytes
from ctrledit.control import extract_control
from ctrledit.customize import (
    Checkpoint,
    Customizer,
    TrainConfig,
    customize,
    draw_timestep_and_noise,
    noise_prediction_loss,
    window_means,
)
from ctrledit.denoiser import DenoiserConfig
from ctrledit.errors import DomainError, TrainingDiverged
from ctrledit.model import TRAINABLE_GROUPS, PromptSpec, VideoEditModel
from ctrledit.schedule import default_schedule
from oracles import directional_gradient_error, objective, perturb_zero_inits, random_clip

CFG = DenoiserConfig(frames=2, height=4, width=4, hidden=16, heads=2, embed_dim=8, vocab_size=10, lora_rank=2)
SPEC = PromptSpec((1, 2, 3), ("a", "cat", "sits"), custom_index=1)
SCHEDULE = default_schedule()


def _clip():
    frames = random_clip(2, 16, seed=3)
    frames[:, :, 4:10, 4:10] = 0.95
    return frames, extract_control(frames)


def _model(seed=0):
    return VideoEditModel(CFG, seed=seed, base_word_id=2)


# -- loss --------------------------------------------------------------------------

def test_perfect_predictor_has_zero_loss():
    z0 = torch.randn(2, 48, 4, 4)
    eps = torch.randn_like(z0)
    assert float(noise_prediction_loss(lambda z, t: eps, z0, 10, eps, SCHEDULE)) == 0.0


def test_zero_predictor_loss_is_noise_power():
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 48, 8, 8, generator=g)  # 12288 entries
    eps = torch.randn(z0.shape, generator=g)
    loss = float(noise_prediction_loss(lambda z, t: torch.zeros_like(z), z0, 25, eps, SCHEDULE))
    # standard error of a mean of chi-square(1) over 12288 entries is about 0.013
    assert loss == pytest.approx(1.0, abs=0.05)


def test_loss_is_pure():
    model = _model()
    frames, ctrl = _clip()
    trainer = Customizer(model, SCHEDULE, TrainConfig())
    z0 = model.encode(torch.as_tensor(frames, dtype=torch.float32))
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(5))
    a = trainer.loss(z0, SPEC, ctrl, 17, eps)
    b = trainer.loss(z0, SPEC, ctrl, 17, eps)
    assert torch.equal(a, b)


def test_draw_order_is_timestep_then_noise():
    g1 = torch.Generator().manual_seed(9)
    t, eps = draw_timestep_and_noise(g1, (2, 3), SCHEDULE)
    g2 = torch.Generator().manual_seed(9)
    assert t == int(torch.randint(1, SCHEDULE.T + 1, (1,), generator=g2))
    assert torch.equal(eps, torch.randn((2, 3), generator=g2))


# -- gradients ---------------------------------------------------------------------

@pytest.mark.parametrize("group", TRAINABLE_GROUPS)
def test_gradients_match_finite_differences(group):
    model = _model().double()
    perturb_zero_inits(model)
    frames, ctrl = _clip()
    z0 = model.encode(torch.as_tensor(frames))
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    params = model.set_trainable((group,))
    err = directional_gradient_error(model, params, lambda: objective(model, z0, SPEC, ctrl, 20, eps, SCHEDULE))
    assert err < 1e-4


# -- training steps ----------------------------------------------------------------

def _snapshot(model):
    return {n: t.detach().clone() for n, t in list(model.named_parameters()) + list(model.named_buffers())}


def test_one_step_changes_only_trainables():
    model = _model()
    frames, ctrl = _clip()
    cfg = TrainConfig(iterations=1, learning_rate=1e-2)
    before = _snapshot(model)
    trainable = {n for n, _ in model.named_trainables(cfg.groups)}
    trainer = Customizer(model, SCHEDULE, cfg)
    z0 = model.encode(torch.as_tensor(frames, dtype=torch.float32))
    trainer.step(z0, SPEC, ctrl, torch.Generator().manual_seed(0))
    assert trainer.steps_taken == 1
    after = _snapshot(model)
    changed = {n for n in before if not torch.equal(before[n], after[n])}
    assert changed and changed <= trainable
    assert "text.custom_token" in changed
    assert any("lora_B" in n for n in changed)


def test_lora_ablation_keeps_adapters_fixed():
    model = _model()
    frames, ctrl = _clip()
    cfg = TrainConfig(iterations=3, learning_rate=1e-2, train_lora=False)
    before = _snapshot(model)
    customize(model, frames, SPEC, ctrl, cfg, SCHEDULE)
    after = _snapshot(model)
    for name in before:
        if "lora" in name:
            assert torch.equal(before[name], after[name])


def test_guide_residuals_become_nonzero_after_training():
    model = _model()
    frames, ctrl = _clip()
    customize(model, frames, SPEC, ctrl, TrainConfig(iterations=50, learning_rate=1e-3), SCHEDULE)
    z0 = model.encode(torch.as_tensor(frames, dtype=torch.float32))
    res = model.control_residuals(z0, 10, model.prompt(SPEC), ctrl)
    assert max(float(r.norm()) for r in res) > 0


def test_customize_is_deterministic_and_logs(tmp_path):
    frames, ctrl = _clip()
    blobs = []
    for _ in range(2):
        ck, losses = customize(_model(), frames, SPEC, ctrl, TrainConfig(iterations=5), SCHEDULE, tmp_path / "log.csv")
        blobs.append(archive_bytes(ck.arrays, ck.meta))
    assert blobs[0] == blobs[1]
    rows = list(csv.reader((tmp_path / "log.csv").open()))
    assert rows[0] == ["iteration", "loss", "wall_time"]
    assert len(rows) == 11


def test_runaway_loss_aborts(monkeypatch):
    frames, ctrl = _clip()
    losses = iter([1.0] + [50.0] * 40)
    monkeypatch.setattr(Customizer, "step", lambda self, *a: next(losses))
    with pytest.raises(TrainingDiverged, match="10 steps"):
        customize(_model(), frames, SPEC, ctrl, TrainConfig(iterations=30), SCHEDULE)


def test_non_finite_loss_aborts(monkeypatch):
    frames, ctrl = _clip()
    model = _model()
    monkeypatch.setattr(model, "guide_denoise", lambda z, *a: (torch.full_like(z, float("nan")), None))
    with pytest.raises(TrainingDiverged, match="non-finite"):
        customize(model, frames, SPEC, ctrl, TrainConfig(iterations=3), SCHEDULE)


def test_frame_count_mismatch():
    frames, ctrl = _clip()
    with pytest.raises(DomainError):
        customize(_model(), frames[:1], SPEC, ctrl, TrainConfig(iterations=1), SCHEDULE)


def test_train_config_validation():
    for bad in (dict(iterations=0), dict(learning_rate=0.0), dict(timesteps_per_iteration=0), dict(optimizer="lbfgs")):
        with pytest.raises(DomainError):
            TrainConfig(**bad)
    assert TrainConfig().groups == ("lora", "token_embedding", "guide_temporal", "guide_full")
    with pytest.raises(DomainError):
        Customizer(_model(), SCHEDULE, TrainConfig(train_lora=False, train_token_embedding=False,
                                                    train_guide_temporal=False, train_guide_full=False))


def test_adam_and_multi_draw_steps_run():
    frames, ctrl = _clip()
    _, losses = customize(_model(), frames, SPEC, ctrl,
                          TrainConfig(iterations=2, optimizer="adam", timesteps_per_iteration=2), SCHEDULE)
    assert len(losses) == 2 and all(np.isfinite(losses))


def test_window_means():
    assert window_means([4.0, 3.0, 2.0, 1.0, 0.0]) == (4.0, 0.0)
    assert window_means(list(range(10)), 0.2) == (0.5, 8.5)


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    frames, ctrl = _clip()
    tuned = _model()
    ck, _ = customize(tuned, frames, SPEC, ctrl, TrainConfig(iterations=3, learning_rate=1e-2), SCHEDULE)
    ck.save(tmp_path / "ck.npz")
    fresh = _model()
    Checkpoint.load(tmp_path / "ck.npz").apply_to(fresh)
    z = torch.randn(CFG.latent_shape)
    a, _ = tuned.guide_denoise(z, 5, tuned.prompt(SPEC), ctrl)
    b, _ = fresh.guide_denoise(z, 5, fresh.prompt(SPEC), ctrl)
    assert torch.equal(a, b)
    assert set(ck.arrays) == {n for n, _ in tuned.named_trainables(TrainConfig().groups)}
    assert all(arr.dtype == np.dtype("<f4") for arr in Checkpoint.load(tmp_path / "ck.npz").arrays.values())


def test_checkpoint_rejects_other_base():
    frames, ctrl = _clip()
    ck, _ = customize(_model(0), frames, SPEC, ctrl, TrainConfig(iterations=1), SCHEDULE)
    with pytest.raises(DomainError, match="different frozen base"):
        ck.apply_to(_model(1))

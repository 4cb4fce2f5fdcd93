import numpy as np
import pytest
import torch

from diffusion import DiffusionHead, HeadConfig, NoiseSchedule, forward_diffuse, head_loss, sample_token, schedule_for
from errors import ArgumentError, NumericError, RangeError
from numerics import Rng, grad_check, precision


def _head(cfg: HeadConfig, z_dim: int = 6, randomize: bool = False) -> DiffusionHead:
    head = DiffusionHead(cfg, z_dim)
    head.initialize_weights()
    if randomize:
        torch.manual_seed(1)
        with torch.no_grad():
            for p in head.parameters():
                p.add_(0.1 * torch.randn_like(p))
    return head


# =============================================================================
# SCHEDULE
# =============================================================================
def test_cosine_schedule_properties():
    sched = NoiseSchedule.cosine(1000)
    ab = sched.alpha_bar
    assert ab[0] == 1.0
    assert ab[1] > 0.999
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] < 0.01
    alpha = sched.alpha[1:]
    assert np.all((alpha > 0) & (alpha < 1))
    np.testing.assert_allclose(sched.alpha[1:] * ab[:-1], ab[1:])


def test_inference_schedule_is_even_stride_ending_at_t():
    sched = NoiseSchedule.cosine(1000, inference_steps=100)
    assert len(sched.steps) == 100
    assert sched.steps[-1] == 1000
    assert set(np.diff(sched.steps)) == {10}
    with pytest.raises(ArgumentError):
        sched.respaced(1001)


def test_first_reverse_step_keeps_alpha_away_from_zero():
    sched = NoiseSchedule.cosine(1000, inference_steps=100)
    assert sched.alpha_bar[-1] == pytest.approx(1e-3, rel=1e-3)
    t, alpha, _ = sched.reverse_coefficients(len(sched.steps) - 1)
    assert t == 1000 and alpha > 0.5
    raw = NoiseSchedule.cosine(1000, min_alpha_bar=0.0)
    assert raw.alpha_bar[-1] < 1e-6
    with pytest.raises(ArgumentError):
        NoiseSchedule.cosine(1000, min_alpha_bar=0.05)


def test_short_training_schedule_caps_inference_steps():
    sched = NoiseSchedule.cosine(10)
    assert sched.steps == tuple(range(1, 11))


def test_schedule_for_head_caps_steps():
    sched = schedule_for(HeadConfig(train_steps=50), inference_steps=100)
    assert sched.train_steps == 50 and len(sched.steps) == 50


def test_final_reverse_step_has_no_noise():
    sched = NoiseSchedule.cosine(100, inference_steps=10)
    assert sched.reverse_coefficients(0)[2] == 0.0
    assert sched.reverse_coefficients(5)[2] > 0.0


def test_alpha_bar_must_not_increase():
    with pytest.raises(ArgumentError):
        NoiseSchedule.from_alpha_bar([1.0, 0.5, 0.7])


# =============================================================================
# FORWARD PROCESS
# =============================================================================
def test_forward_diffuse_clean_and_noise_limits():
    x = torch.tensor([[1.0, -2.0]])
    eps = torch.tensor([[0.3, 0.7]])
    clean = NoiseSchedule.from_alpha_bar([1.0, 1.0, 1e-12])
    assert torch.equal(forward_diffuse(x, 1, eps, clean), x)
    torch.testing.assert_close(forward_diffuse(x, 2, eps, clean), eps, atol=1e-5, rtol=0)


def test_forward_diffuse_variance_of_zero_token():
    sched = NoiseSchedule.cosine(1000)
    eps = Rng(0, "noise").normal((10000, 1), dtype=torch.float64)
    xt = forward_diffuse(torch.zeros(10000, 1, dtype=torch.float64), 500, eps, sched)
    assert float(xt.var()) == pytest.approx(1.0 - sched.alpha_bar[500], rel=0.05)


def test_forward_diffuse_rejects_bad_timestep():
    sched = NoiseSchedule.cosine(10)
    x = torch.zeros(2, 3)
    with pytest.raises(RangeError):
        forward_diffuse(x, 0, x, sched)
    with pytest.raises(RangeError):
        forward_diffuse(x, 11, x, sched)


# =============================================================================
# LOSS
# =============================================================================
def test_zero_initialised_head_predicts_zero_noise(tiny_head_cfg):
    head = _head(tiny_head_cfg)
    sched = schedule_for(tiny_head_cfg)
    z = torch.randn(64, 6)
    x = torch.randn(64, 4)
    eps = Rng(2, "noise").normal((64, 4))
    loss = head_loss(head, z, x, None, sched, t=7, eps=eps)
    assert torch.equal(loss, (eps ** 2).sum(dim=-1).mean())

    big = head_loss(head, torch.randn(20000, 6), torch.randn(20000, 4), Rng(3), sched)
    assert float(big) == pytest.approx(tiny_head_cfg.token_dim, rel=0.05)


def test_loss_is_repeatable_under_seed(tiny_head_cfg):
    head = _head(tiny_head_cfg, randomize=True)
    sched = schedule_for(tiny_head_cfg)
    z, x = torch.randn(8, 6), torch.randn(8, 4)
    assert torch.equal(head_loss(head, z, x, Rng(5), sched), head_loss(head, z, x, Rng(5), sched))


def test_loss_gradient_reaches_context():
    with precision(torch.float64):
        cfg = HeadConfig(layers=2, width=8, token_dim=3, time_dim=4, train_steps=20, zero_init_final=False)
        head = _head(cfg, z_dim=5, randomize=True)
        sched = schedule_for(cfg)
        z = Rng(0, "z").normal((4, 5)).requires_grad_(True)
        x = Rng(0, "x").normal((4, 3))
        eps = Rng(0, "eps").normal((4, 3))
        t = torch.tensor([1, 5, 10, 20])
        error = grad_check(lambda: head_loss(head, z, x, None, sched, t=t, eps=eps), [z])
        assert error < 1e-3
        head_loss(head, z, x, None, sched, t=t, eps=eps).backward()
        assert z.grad.abs().sum() > 0


# =============================================================================
# SAMPLING
# =============================================================================
def test_guidance_with_identical_contexts_is_unguided(tiny_head_cfg):
    head = _head(tiny_head_cfg, randomize=True)
    sched = schedule_for(tiny_head_cfg, inference_steps=10)
    z = torch.randn(5, 6)
    plain = sample_token(head, z, sched, Rng(4, "sample"))
    guided = sample_token(head, z, sched, Rng(4, "sample"), cfg=(z.clone(), 3.0))
    assert torch.equal(plain, guided)


def test_zero_temperature_is_deterministic(tiny_head_cfg):
    head = _head(tiny_head_cfg, randomize=True)
    sched = schedule_for(tiny_head_cfg, inference_steps=10)
    z = torch.randn(3, 6)
    a = sample_token(head, z, sched, Rng(1), tau=0.0)
    b = sample_token(head, z, sched, Rng(1), tau=0.0)
    assert torch.equal(a, b)
    assert a.shape == (3, tiny_head_cfg.token_dim)


def test_per_lane_streams_match_single_rows(tiny_head_cfg):
    head = _head(tiny_head_cfg, randomize=True)
    sched = schedule_for(tiny_head_cfg, inference_steps=5)
    z = torch.randn(3, 6, dtype=torch.float64).float()
    batch = sample_token(head, z, sched, [Rng(0, f"lane-{b}") for b in range(3)])
    for b in range(3):
        single = sample_token(head, z[b:b + 1], sched, [Rng(0, f"lane-{b}")])
        torch.testing.assert_close(batch[b:b + 1], single, atol=1e-5, rtol=1e-5)


def test_sampler_rejects_bad_arguments(tiny_head_cfg):
    head = _head(tiny_head_cfg)
    sched = schedule_for(tiny_head_cfg, inference_steps=5)
    z = torch.zeros(2, 6)
    with pytest.raises(ArgumentError):
        sample_token(head, z, sched, Rng(0), cfg=(z, 0.5))
    with pytest.raises(ArgumentError):
        sample_token(head, z, sched, Rng(0), tau=-1.0)


def test_non_finite_sample_names_step(tiny_head_cfg):
    head = _head(tiny_head_cfg)
    with torch.no_grad():
        head.final_layer.linear.bias.fill_(float("nan"))
    sched = schedule_for(tiny_head_cfg, inference_steps=5)
    with pytest.raises(NumericError) as info:
        sample_token(head, torch.zeros(1, 6), sched, Rng(0))
    assert info.value.step == sched.steps[-1]


@pytest.mark.slow
def test_head_fits_bimodal_mixture():
    cfg = HeadConfig(layers=3, width=64, token_dim=1, time_dim=32, train_steps=1000)
    head = _head(cfg, z_dim=1)
    sched = schedule_for(cfg, inference_steps=100)
    optimizer = torch.optim.AdamW(head.parameters(), lr=1e-3, weight_decay=0.0)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=8000, eta_min=1e-5)
    rng = Rng(0, "mixture")
    for _ in range(8000):
        signs = torch.from_numpy(np.where(rng.uniform(512) < 0.5, -2.0, 2.0)).float()[:, None]
        x = signs + 0.5 * rng.normal((512, 1))
        loss = head_loss(head, torch.zeros(512, 1), x, rng, sched)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
    samples = sample_token(head, torch.zeros(10000, 1), sched, Rng(1, "sample")).double()
    assert abs(float(samples.mean())) < 0.1
    assert float(samples.var()) == pytest.approx(4.25, rel=0.05)

import math

import numpy as np
import pytest
import torch

from fairsynth.diffusion import (
    DiffusionConfig,
    Denoiser,
    denoise_loss,
    fit_denoiser,
    forward_perturb,
    sample_from,
    sampling_schedule,
)

SMALL = dict(width=32, layers=2, emb_dim=8, batch_size=128)


class GaussianPosteriorMean(Denoiser):
    """Exact denoiser for standard-normal data: E[z | z + sigma n] = x / (1 + sigma^2)."""

    def forward(self, x, sigma):
        sigma = torch.as_tensor(sigma, dtype=x.dtype).reshape(-1, 1)
        return x / (1 + sigma**2)


def test_forward_perturb_variance():
    g = torch.Generator().manual_seed(0)
    z = torch.zeros(200_000, 1)
    x = forward_perturb(z, 2.5, torch.randn(z.shape, generator=g))
    assert float(x.std()) == pytest.approx(2.5, rel=0.01)
    with pytest.raises(ValueError):
        forward_perturb(z, -1.0, torch.randn(z.shape))
    with pytest.raises(ValueError):
        forward_perturb(z, 1.0, torch.randn(3, 1))


def test_config_validation():
    with pytest.raises(ValueError):
        DiffusionConfig(sigma_min=0)
    with pytest.raises(ValueError):
        DiffusionConfig(sigma_min=1, sigma_max=1)
    with pytest.raises(ValueError):
        DiffusionConfig(steps=0)


def test_perfect_denoiser_has_zero_loss():
    cfg = DiffusionConfig()
    z = torch.randn(64, 3)
    loss = denoise_loss(lambda x, s: z, z, torch.Generator().manual_seed(0), cfg)
    assert float(loss) == 0.0
    with pytest.raises(ValueError):
        denoise_loss(lambda x, s: x, torch.zeros(0, 3), torch.Generator(), cfg)


def test_identity_denoiser_error_vanishes_with_sigma():
    g = torch.Generator().manual_seed(1)
    z = torch.randn(1000, 4, generator=g)
    noise = torch.randn(z.shape, generator=g)
    errs = [float(((forward_perturb(z, s, noise) - z) ** 2).sum(1).mean()) for s in (1.0, 1e-2, 1e-4)]
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-6


def test_preconditioning_limits():
    # at small sigma the skip connection dominates and D(x) -> x
    den = Denoiser(3, DiffusionConfig(**SMALL))
    x = torch.randn(5, 3)
    with torch.no_grad():
        out = den(x, torch.tensor(1e-4))
    torch.testing.assert_close(out, x, atol=1e-3, rtol=0)


def test_schedule_matches_closed_form():
    cfg = DiffusionConfig(steps=5)
    t = sampling_schedule(cfg).numpy()
    i = np.arange(5)
    ref = (80 ** (1 / 7) + i / 4 * (0.002 ** (1 / 7) - 80 ** (1 / 7))) ** 7
    np.testing.assert_allclose(t[:-1], ref, rtol=1e-12)
    assert t[-1] == 0.0 and t[0] == pytest.approx(80.0) and t[-2] == pytest.approx(0.002)
    assert np.all(np.diff(t) < 0)


def test_sampler_recovers_standard_normal():
    den = GaussianPosteriorMean(2, DiffusionConfig(**SMALL))
    x = sample_from(den, 20_000, seed=0).numpy()
    np.testing.assert_allclose(x.mean(0), 0.0, atol=0.03)
    np.testing.assert_allclose(x.std(0), 1.0, rtol=0.03)


def test_single_step_sampler_is_one_denoise():
    den = GaussianPosteriorMean(2, DiffusionConfig(steps=1, **SMALL))
    x = sample_from(den, 100, seed=3)
    # x_T ~ N(0, 80^2), one Euler step to 0 returns D(x_T, 80) = x_T / 6401
    assert float(x.abs().max()) < 5 * 80 / 6401


def test_fit_is_deterministic_and_sampling_seeded():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(256, 2, generator=g) * torch.tensor([2.0, 0.5]) + torch.tensor([1.0, -1.0])
    cfg = DiffusionConfig(epochs=3, **SMALL)
    a, curve_a = fit_denoiser(z, cfg, seed=7)
    b, curve_b = fit_denoiser(z, cfg, seed=7)
    assert curve_a == curve_b and len(curve_a) == 3 and all(math.isfinite(v) for v in curve_a)
    for x, y in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(x, y)
    torch.testing.assert_close(a.z_mean, z.mean(0))
    assert torch.equal(sample_from(a, 10, 1), sample_from(b, 10, 1))
    assert not torch.equal(sample_from(a, 10, 1), sample_from(a, 10, 2))
    with pytest.raises(ValueError):
        sample_from(a, 0, 1)

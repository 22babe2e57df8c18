"""Score-based diffusion over VAE latents."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .schema_io import Dataset, transform
from .vae import ModelCheckpoint, _seed32, encoded_tensors, reparameterize


@dataclass
class DiffusionConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 1.0
    steps: int = 50
    rho: float = 7.0
    width: int = 256
    layers: int = 4
    emb_dim: int = 64
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3

    def __post_init__(self):
        if not self.sigma_min > 0:
            raise ValueError("sigma_min must be positive")
        if not self.sigma_max > self.sigma_min:
            raise ValueError("sigma_max must exceed sigma_min")
        if self.steps < 1:
            raise ValueError("need at least one sampler step")


def forward_perturb(z, sigma_noise, noise):
    if np.any(np.asarray(sigma_noise) < 0):
        raise ValueError("noise level must be nonnegative")
    if z.shape != noise.shape:
        raise ValueError("z and noise must share a shape")
    return z + sigma_noise * noise


def sinusoidal_embedding(x: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=x.dtype) / half)
    args = x[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class Denoiser(nn.Module):
    """Preconditioned MLP denoiser D(x; sigma) working on standardised latents.

    ``z_mean``/``z_std`` buffers hold the per-dimension standardisation of the
    training latents.
    """

    def __init__(self, d_z: int, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        self.d_z = d_z
        self.register_buffer("z_mean", torch.zeros(d_z))
        self.register_buffer("z_std", torch.ones(d_z))
        self.inp = nn.Linear(d_z, cfg.width)
        self.emb = nn.Sequential(nn.Linear(cfg.emb_dim, cfg.width), nn.SiLU(), nn.Linear(cfg.width, cfg.width))
        blocks = []
        for _ in range(cfg.layers - 1):
            blocks += [nn.SiLU(), nn.Linear(cfg.width, cfg.width)]
        self.body = nn.Sequential(*blocks)
        self.out = nn.Sequential(nn.SiLU(), nn.Linear(cfg.width, d_z))

    def raw(self, x, c_noise):
        h = self.inp(x) + self.emb(sinusoidal_embedding(c_noise, self.cfg.emb_dim))
        return self.out(self.body(h))

    def forward(self, x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        sigma = torch.as_tensor(sigma, dtype=x.dtype).reshape(-1)
        if sigma.numel() == 1:
            sigma = sigma.expand(x.shape[0])
        sd = self.cfg.sigma_data
        s = sigma[:, None]
        c_skip = sd**2 / (s**2 + sd**2)
        c_out = s * sd / torch.sqrt(s**2 + sd**2)
        c_in = 1 / torch.sqrt(s**2 + sd**2)
        return c_skip * x + c_out * self.raw(c_in * x, torch.log(sigma) / 4)


def denoise_loss(denoiser, z_batch: torch.Tensor, generator: torch.Generator, cfg: DiffusionConfig) -> torch.Tensor:
    """Weighted denoising score-matching loss; ``denoiser(x, sigma)`` predicts the clean latent."""
    if z_batch.shape[0] == 0:
        raise ValueError("empty batch")
    B = z_batch.shape[0]
    u = torch.rand(B, generator=generator, dtype=z_batch.dtype)
    sigma = torch.exp(math.log(cfg.sigma_min) + u * (math.log(cfg.sigma_max) - math.log(cfg.sigma_min)))
    noise = torch.randn(z_batch.shape, generator=generator, dtype=z_batch.dtype)
    pred = denoiser(forward_perturb(z_batch, sigma[:, None], noise), sigma)
    sd = cfg.sigma_data
    weight = (sigma**2 + sd**2) / (sigma * sd) ** 2
    return (weight * ((pred - z_batch) ** 2).sum(dim=1)).mean()


def fit_denoiser(latents: torch.Tensor, cfg: DiffusionConfig, seed: int, epochs: int | None = None) -> tuple[Denoiser, list[float]]:
    """Train a denoiser on a latent matrix (rows are samples). No raw data enters here."""
    latents = torch.as_tensor(latents, dtype=torch.float32)
    epochs = cfg.epochs if epochs is None else epochs
    torch.manual_seed(_seed32(seed, 10))
    den = Denoiser(latents.shape[1], cfg)
    mean = latents.mean(0)
    std = latents.std(0).clamp_min(1e-6) if latents.shape[0] > 1 else torch.ones(latents.shape[1])
    den.z_mean.copy_(mean)
    den.z_std.copy_(std)
    data = (latents - mean) / std
    gen = torch.Generator().manual_seed(_seed32(seed, 11))
    opt = torch.optim.Adam(den.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, epochs))
    curve = []
    n = data.shape[0]
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = data[perm[start:start + cfg.batch_size]]
            loss = denoise_loss(den, batch, gen, cfg)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        sched.step()
        curve.append(float(np.mean(losses)))
    den.eval()
    return den, curve


def encode_latents(ckpt: ModelCheckpoint, d: Dataset, seed: int) -> torch.Tensor:
    """Reparameterised latents of ``d`` under the checkpoint's encoder."""
    enc = transform(d, ckpt.states)
    x_num, x_cat = encoded_tensors(enc)
    model = ckpt.model
    with torch.no_grad():
        mu, logvar = model.encode(model.tokenizer(x_num, x_cat), check=True)
        gen = torch.Generator().manual_seed(_seed32(seed, 12))
        noise = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
        return reparameterize(mu, logvar, noise)


def train_diffusion(ckpt: ModelCheckpoint, d: Dataset, epochs: int | None = None, seed: int = 0,
                    cfg: DiffusionConfig | None = None) -> ModelCheckpoint:
    if ckpt.model is None or ckpt.reference is None:
        raise ValueError("VAE phases must be complete before fitting the diffusion model")
    cfg = cfg or DiffusionConfig()
    latents = encode_latents(ckpt, d, seed)
    den, curve = fit_denoiser(latents, cfg, seed, epochs)
    ckpt.denoiser = den
    ckpt.diffusion_meta = {"config": asdict(cfg), "loss_curve": curve, "seed": seed}
    return ckpt


def sampling_schedule(cfg: DiffusionConfig) -> torch.Tensor:
    N = cfg.steps
    if N == 1:
        t = torch.tensor([cfg.sigma_max], dtype=torch.float64)
    else:
        i = torch.arange(N, dtype=torch.float64)
        inv = 1 / cfg.rho
        t = (cfg.sigma_max**inv + i / (N - 1) * (cfg.sigma_min**inv - cfg.sigma_max**inv)) ** cfg.rho
    return torch.cat([t, torch.zeros(1, dtype=torch.float64)])


@torch.no_grad()
def sample_from(den: Denoiser, count: int, seed: int) -> torch.Tensor:
    """Deterministic second-order (Heun) integration of the probability-flow ODE."""
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = den.cfg
    gen = torch.Generator().manual_seed(_seed32(seed, 13))
    ts = sampling_schedule(cfg).to(torch.float32)
    x = torch.randn(count, den.d_z, generator=gen) * ts[0]
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        d_cur = (x - den(x, t_cur)) / t_cur
        x_next = x + (t_next - t_cur) * d_cur
        if t_next > 0:
            d_next = (x_next - den(x_next, t_next)) / t_next
            x_next = x + (t_next - t_cur) * 0.5 * (d_cur + d_next)
        x = x_next
    return x * den.z_std + den.z_mean


def sample_latents(ckpt: ModelCheckpoint, count: int, seed: int) -> torch.Tensor:
    if ckpt.denoiser is None:
        raise ValueError("checkpoint has no trained diffusion model")
    return sample_from(ckpt.denoiser, count, seed)

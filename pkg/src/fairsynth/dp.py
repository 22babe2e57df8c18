"""Balanced Poisson sampling, DP-SGD mechanics and a subsampled-Gaussian RDP accountant."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.special import gammaln, gammasgn, log_ndtr, logsumexp

log = logging.getLogger(__name__)

DEFAULT_ALPHAS: tuple[float, ...] = (1.25, 1.5) + tuple(float(a) for a in range(2, 65)) + (128.0, 256.0)

SIGMA_SEARCH_RANGE = (0.3, 1e6)

POST_PROCESSING_NOTE = (
    "Only the VAE is trained with DP-SGD. The latent diffusion model is fitted on "
    "encoder outputs of the training data and is covered by this report only under "
    "a post-processing argument over the encoder."
)


class PrivacyBudgetError(RuntimeError):
    """Raised when a training schedule would exceed the planned privacy budget."""


@dataclass(frozen=True)
class PrivacySpec:
    target_eps: float
    delta: float
    clip: float = 1.0
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    # "group": per-group sigma_p with per-group clip norms; "worst_case": one sigma at gamma_max
    mode: str = "group"

    def __post_init__(self):
        if not self.target_eps > 0:
            raise ValueError("target_eps must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if not self.alphas or any(a <= 1 for a in self.alphas):
            raise ValueError("alpha grid must be nonempty with orders > 1")
        if self.mode not in ("group", "worst_case"):
            raise ValueError(f"unknown accounting mode {self.mode!r}")


@dataclass(frozen=True)
class SamplingPlan:
    group_sizes: tuple[int, ...]
    batch_size: int
    iterations: int  # L
    rates: tuple[float, ...]  # gamma_(s)

    @property
    def m(self) -> int:
        return min(self.group_sizes)

    @property
    def gamma_max(self) -> float:
        return max(self.rates)

    @property
    def expected_group_count(self) -> float:
        return self.m / self.iterations


def plan_balanced_sampling(group_sizes: Sequence[int], b: int) -> SamplingPlan:
    sizes = tuple(int(s) for s in group_sizes)
    if not sizes or min(sizes) < 1:
        raise ValueError("every group needs at least one record")
    if b < len(sizes):
        raise ValueError(f"expected batch size {b} smaller than the number of groups")
    m = min(sizes)
    L = (m * len(sizes)) // b
    if L == 0:
        raise ValueError(
            f"batch size {b} too large for smallest group of {m} records; "
            f"use b <= {m * len(sizes)}"
        )
    rates = tuple(m / (L * s) for s in sizes)
    return SamplingPlan(sizes, b, L, rates)


def poisson_batches(
    plan: SamplingPlan, groups: np.ndarray, epoch_seed: int, stats: dict | None = None
) -> list[np.ndarray]:
    """Draw one epoch of balanced Poisson batches.

    Record ``i`` of group ``s`` enters each batch independently with probability
    ``plan.rates[s]``. A batch missing a group is redrawn from a derived seed.
    """
    groups = np.asarray(groups)
    if len(plan.group_sizes) != int(groups.max()) + 1 or np.bincount(groups).tolist() != list(
        plan.group_sizes
    ):
        raise ValueError("sampling plan does not match the group labels")
    probs = np.asarray(plan.rates)[groups]
    n_groups = len(plan.group_sizes)
    batches = []
    for i in range(plan.iterations):
        attempt = 0
        while True:
            rng = np.random.default_rng([epoch_seed, i, attempt])
            idx = np.flatnonzero(rng.random(len(groups)) < probs)
            if len(np.unique(groups[idx])) == n_groups:
                break
            attempt += 1
        if attempt:
            log.debug("batch %d redrawn %d times (empty group)", i, attempt)
            if stats is not None:
                stats["redraws"] = stats.get("redraws", 0) + attempt
        batches.append(idx)
    return batches


# ----------------------------------------------------------------------------
# RDP of the sampled Gaussian mechanism


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    # A = sum_i C(a,i) q^i (1-q)^(a-i) exp((i^2-i)/(2 s^2)). The binomial weights
    # sum to one and the i = 0, 1 exponents vanish, so
    # A = 1 + sum_{i>=2} C(a,i) q^i (1-q)^(a-i) expm1(...), a sum of positive terms.
    i = np.arange(2, alpha + 1, dtype=np.float64)
    x = (i * i - i) / (2 * sigma**2)
    log_expm1 = np.where(x > 1, x + np.log1p(-np.exp(-x)), np.log(np.expm1(np.minimum(x, 1))))
    log_binom = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
    terms = log_binom + i * math.log(q) + (alpha - i) * math.log1p(-q) + log_expm1
    return float(np.logaddexp(0.0, logsumexp(terms)))


def _log_a_frac(q: float, sigma: float, alpha: float, max_terms: int = 1 << 20) -> float:
    # two-sided series for non-integer orders with signed generalised binomial
    # coefficients. Past i > alpha + 1 the terms alternate in sign and decay only
    # polynomially, so the series is summed in doubling blocks until the first
    # omitted term is negligible. Returns inf when that never happens.
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    log_q, log_1mq = math.log(q), math.log1p(-q)
    n = 4096
    while n <= max_terms:
        i = np.arange(n, dtype=np.float64)
        j = alpha - i
        log_coef = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(j + 1)
        sign = gammasgn(j + 1)
        s0 = (log_coef + i * log_q + j * log_1mq + (i * i - i) / (2 * sigma**2)
              + math.log(0.5) + log_ndtr(-(i - z0) / sigma) + math.log(2))
        s1 = (log_coef + j * log_q + i * log_1mq + (j * j - j) / (2 * sigma**2)
              + math.log(0.5) + log_ndtr(-(z0 - j) / sigma) + math.log(2))
        logs = np.concatenate([s0, s1])
        signs = np.concatenate([sign, sign])
        total, sgn = logsumexp(logs, b=signs, return_sign=True)
        if sgn > 0 and max(s0[-1], s1[-1]) < total - 36:
            return float(total)
        n *= 4
    return math.inf


def _rdp_step(alpha: float, gamma: float, sigma: float) -> float:
    full = alpha / (2 * sigma**2)
    if gamma == 1.0:
        return full
    if float(alpha).is_integer():
        val = _log_a_int(gamma, sigma, int(alpha)) / (alpha - 1)
    else:
        val = _log_a_frac(gamma, sigma, alpha) / (alpha - 1)
        if not math.isfinite(val):
            # Renyi divergence is nondecreasing in the order
            val = _rdp_step(float(math.ceil(alpha)), gamma, sigma)
    # subsampling never hurts: the full-batch Gaussian value is an upper bound
    return min(val, full)


def rdp_epsilon_subsampled(alpha: float, gamma: float, sigma: float, steps: int) -> float:
    """RDP at order ``alpha`` of ``steps`` compositions of the Poisson-subsampled
    Gaussian mechanism with sample rate ``gamma`` and noise multiplier ``sigma``."""
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return 0.0
    return steps * _rdp_step(float(alpha), float(gamma), float(sigma))


def rdp_curve(alphas: Sequence[float], gamma: float, sigma: float, steps: int) -> np.ndarray:
    return np.array([rdp_epsilon_subsampled(a, gamma, sigma, steps) for a in alphas])


def _convert(alphas: Sequence[float], rdp: Sequence[float], delta: float) -> float:
    if len(alphas) == 0:
        raise ValueError("empty alpha grid")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    a = np.asarray(alphas, dtype=np.float64)
    return float(np.min(np.asarray(rdp, dtype=np.float64) + math.log(1 / delta) / (a - 1)))


@dataclass
class PrivacyAccount:
    """Accumulated RDP per group entry; the reported epsilon is the worst entry."""

    alphas: tuple[float, ...]
    sizes: tuple[int, ...]
    rates: tuple[float, ...]
    sigmas: tuple[float, ...]
    sigma_global: float
    planned_steps: int
    mode: str = "group"
    steps: int = 0
    rdp: np.ndarray = field(default=None)
    _per_step: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if any(s <= 0 for s in self.sigmas):
            raise ValueError("noise multipliers must be positive")
        if self.rdp is None:
            self.rdp = np.zeros((len(self.rates), len(self.alphas)))
        self._per_step = np.stack(
            [rdp_curve(self.alphas, g, s, 1) for g, s in zip(self.rates, self.sigmas)]
        )

    @property
    def remaining(self) -> int:
        return self.planned_steps - self.steps

    def step(self, n: int = 1) -> None:
        if self.steps + n > self.planned_steps:
            raise PrivacyBudgetError(
                f"planned steps exceeded ({self.steps + n} > {self.planned_steps})"
            )
        self.steps += n
        self.rdp = self.rdp + n * self._per_step

    def epsilon(self, delta: float) -> float:
        return max(_convert(self.alphas, row, delta) for row in self.rdp)

    def report(self, target_eps: float, delta: float) -> dict:
        return {
            "target_eps": target_eps,
            "delta": delta,
            "alpha_grid": list(self.alphas),
            "mode": self.mode,
            "per_group": [
                {"size": int(n), "gamma": float(g), "sigma": float(s)}
                for n, g, s in zip(self.sizes, self.rates, self.sigmas)
            ],
            "sigma_global": float(self.sigma_global),
            "steps": int(self.steps),
            "planned_steps": int(self.planned_steps),
            "spent_eps": float(self.epsilon(delta)) if self.steps else 0.0,
            "note": POST_PROCESSING_NOTE,
        }

    def to_dict(self) -> dict:
        return {
            "alphas": list(self.alphas),
            "sizes": list(self.sizes),
            "rates": list(self.rates),
            "sigmas": list(self.sigmas),
            "sigma_global": self.sigma_global,
            "planned_steps": self.planned_steps,
            "mode": self.mode,
            "steps": self.steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyAccount":
        acc = cls(
            tuple(d["alphas"]), tuple(d["sizes"]), tuple(d["rates"]), tuple(d["sigmas"]),
            d["sigma_global"], d["planned_steps"], d["mode"],
        )
        acc.step(d["steps"]) if d["steps"] else None
        return acc


def rdp_to_dp(account, delta: float, alphas: Sequence[float] | None = None) -> float:
    """Convert RDP to (eps, delta)-DP: min over orders of eps(a) + log(1/delta)/(a-1).

    ``account`` is a :class:`PrivacyAccount` or a sequence of eps(a) values paired
    with ``alphas``.
    """
    if isinstance(account, PrivacyAccount):
        return account.epsilon(delta)
    if alphas is None:
        raise ValueError("alphas required when passing raw RDP values")
    return _convert(alphas, account, delta)


def calibrate_noise(
    target_eps: float, delta: float, gamma: float, steps: int,
    alphas: Sequence[float] = DEFAULT_ALPHAS, rtol: float = 1e-4,
) -> float:
    """Smallest noise multiplier (to relative tolerance) meeting ``target_eps``."""

    def spent(sigma):
        return _convert(alphas, rdp_curve(alphas, gamma, sigma, steps), delta)

    lo, hi = SIGMA_SEARCH_RANGE
    if spent(hi) > target_eps:
        raise PrivacyBudgetError(
            f"target eps={target_eps} unreachable for gamma={gamma:.4g}, steps={steps} "
            f"with sigma <= {hi:g}"
        )
    if spent(lo) <= target_eps:
        return lo
    while hi / lo - 1 > rtol:
        mid = math.sqrt(lo * hi)
        if spent(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


def calibrate_group_noise(spec: PrivacySpec, plan: SamplingPlan, total_steps: int) -> list[float]:
    cache: dict[float, float] = {}
    out = []
    for g in plan.rates:
        if g not in cache:
            cache[g] = calibrate_noise(spec.target_eps, spec.delta, g, total_steps, spec.alphas)
        out.append(cache[g])
    return out


def global_noise_multiplier(group_sizes: Sequence[int], sigma_p: Sequence[float]) -> float:
    sizes = np.asarray(group_sizes, dtype=np.float64)
    sig = np.asarray(sigma_p, dtype=np.float64)
    if len(sizes) != len(sig) or len(sizes) == 0:
        raise ValueError("group sizes and noise multipliers must align")
    if np.any(sizes <= 0):
        raise ValueError("empty group")
    if np.any(sig <= 0):
        raise ValueError("noise multipliers must be positive")
    # harmonic mean taken relative to the first multiplier, so equal inputs return it exactly
    ref = sig[0]
    return float(ref / (np.sum(sizes * (ref / sig)) / sizes.sum()))


@dataclass
class DPSetup:
    """Everything a training loop needs to run DP-SGD for one schedule."""

    account: PrivacyAccount
    group_clips: tuple[float, ...]
    noise_std: float  # per-coordinate std of the noise added to the clipped sum


def setup_privacy(spec: PrivacySpec, plan: SamplingPlan, total_steps: int) -> DPSetup:
    if spec.mode == "worst_case":
        sigma = calibrate_noise(spec.target_eps, spec.delta, plan.gamma_max, total_steps, spec.alphas)
        account = PrivacyAccount(
            spec.alphas, (sum(plan.group_sizes),), (plan.gamma_max,), (sigma,), sigma,
            total_steps, "worst_case",
        )
        clips = tuple(spec.clip for _ in plan.group_sizes)
        return DPSetup(account, clips, spec.clip * sigma)
    sigmas = calibrate_group_noise(spec, plan, total_steps)
    sg = global_noise_multiplier(plan.group_sizes, sigmas)
    account = PrivacyAccount(
        spec.alphas, plan.group_sizes, plan.rates, tuple(sigmas), sg, total_steps, "group"
    )
    # group p is clipped to c * sigma_global / sigma_p so that the shared noise
    # c * sigma_global is exactly sigma_p times its sensitivity
    clips = tuple(spec.clip * sg / s for s in sigmas)
    return DPSetup(account, clips, spec.clip * sg)


# ----------------------------------------------------------------------------
# DP-SGD


def clip_and_aggregate(
    per_sample_grads: torch.Tensor,
    c: float,
    sigma_global: float,
    generator: torch.Generator | None = None,
    clip_norms: torch.Tensor | None = None,
) -> torch.Tensor:
    """Clip each row of ``per_sample_grads`` (shape ``(B, P)``), sum, add Gaussian
    noise of std ``c * sigma_global`` per coordinate and divide by ``B``.

    ``clip_norms`` optionally gives a per-row clip norm replacing ``c`` for the
    clipping step only.
    """
    g = per_sample_grads
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("expected a nonempty (batch, params) gradient matrix")
    if not torch.isfinite(g).all():
        raise FloatingPointError("non-finite per-sample gradient")
    norms = g.norm(dim=1)
    bound = clip_norms if clip_norms is not None else torch.full_like(norms, float(c))
    scale = torch.clamp(bound / torch.clamp(norms, min=1e-12), max=1.0)
    total = (g * scale[:, None]).sum(dim=0)
    if sigma_global > 0:
        noise = torch.randn(total.shape, generator=generator, dtype=total.dtype)
        total = total + noise * (c * sigma_global)
    return total / g.shape[0]


def per_sample_grads(
    model: torch.nn.Module,
    inputs: Sequence[torch.Tensor],
    loss_fn: Callable[[dict], torch.Tensor],
) -> tuple[float, dict[str, torch.Tensor]]:
    """Per-sample gradients of a batch loss.

    ``model(*inputs)`` must be row-independent and return a dict of per-row tensors.
    The batch loss may couple rows (means, kernel alignment, transport); row ``i``
    is credited ``B * dL/d(out_i) * d(out_i)/dtheta``, which reduces to the
    ordinary per-sample gradient for mean-decomposable losses and sums to
    ``B * grad L`` in general.
    """
    from torch.func import functional_call, grad, vmap

    B = inputs[0].shape[0]
    with torch.no_grad():
        outs = model(*inputs)
    leaves = {k: v.detach().requires_grad_(True) for k, v in outs.items()}
    loss = loss_fn(leaves)
    keys = list(leaves)
    cots = torch.autograd.grad(loss, [leaves[k] for k in keys], allow_unused=True)
    cot = {k: (c * B if c is not None else torch.zeros_like(leaves[k])) for k, c in zip(keys, cots)}
    cot = {k: v for k, v in cot.items() if bool(v.abs().sum() > 0)}

    params = {k: v.detach() for k, v in model.named_parameters() if v.requires_grad}
    buffers = {k: v.detach() for k, v in model.named_buffers()}

    def surrogate(p, sample, c):
        out = functional_call(model, (p, buffers), tuple(x.unsqueeze(0) for x in sample))
        tot = 0.0
        for k, v in c.items():
            tot = tot + (out[k].squeeze(0) * v).sum()
        return tot

    if not cot:
        return float(loss.detach()), {k: torch.zeros((B,) + v.shape, dtype=v.dtype) for k, v in params.items()}
    grads = vmap(grad(surrogate), in_dims=(None, 0, 0))(params, tuple(inputs), cot)
    return float(loss.detach()), grads


def flatten_grads(grads: dict[str, torch.Tensor]) -> torch.Tensor:
    B = next(iter(grads.values())).shape[0]
    return torch.cat([g.reshape(B, -1) for g in grads.values()], dim=1)


def assign_grads(model: torch.nn.Module, flat: torch.Tensor, names: Sequence[str]) -> None:
    params = dict(model.named_parameters())
    offset = 0
    for name in names:
        p = params[name]
        n = p.numel()
        p.grad = flat[offset:offset + n].view_as(p).to(p.dtype).clone()
        offset += n


def dp_step(
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    inputs: Sequence[torch.Tensor],
    loss_fn: Callable[[dict], torch.Tensor],
    clip: float,
    sigma_global: float,
    account: PrivacyAccount | None = None,
    generator: torch.Generator | None = None,
    clip_norms: torch.Tensor | None = None,
) -> float:
    """One DP-SGD update; returns the batch loss before the update."""
    if account is not None and account.remaining < 1:
        raise PrivacyBudgetError("planned steps exceeded")
    loss, grads = per_sample_grads(model, inputs, loss_fn)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite training loss")
    flat = flatten_grads(grads)
    noisy = clip_and_aggregate(flat, clip, sigma_global, generator, clip_norms)
    optimizer.zero_grad(set_to_none=True)
    assign_grads(model, noisy, list(grads))
    optimizer.step()
    if account is not None:
        account.step()
    return loss

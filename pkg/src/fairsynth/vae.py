"""Transformer VAE over feature tokens, quality losses and Phase-1 training."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dp
from .schema_io import Dataset, EncodedDataset, QuantileState, TabularSchema, fit_transform
from .tokenizer import Detokenizer, FeatureLogits, Tokenizer

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class TrainingConfig:
    beta: float = 0.01
    beta_decay: float = 0.7
    beta_floor: float = 1e-5
    patience: int = 10
    lr: float = 1e-3
    epochs_phase1: int = 50
    epochs_phase2: int = 20
    batch_size: int = 128
    seed: int = 0
    d_token: int = 16
    hidden: int = 8
    n_layers: int = 2
    n_heads: int = 2
    ffn_factor: int = 2

    def __post_init__(self):
        if not 0 < self.beta_floor <= self.beta:
            raise ValueError("need 0 < beta_floor <= beta")
        if not 0 < self.beta_decay < 1:
            raise ValueError("beta_decay must lie in (0, 1)")
        if self.batch_size < 4:  # 2 * |S|
            raise ValueError("batch_size must be at least twice the number of groups")
        if self.d_token % self.n_heads:
            raise ValueError("d_token must be divisible by n_heads")


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x):
        B, k, d = x.shape
        dh = d // self.n_heads
        q, kk, v = self.qkv(x).chunk(3, dim=-1)
        q, kk, v = (t.reshape(B, k, self.n_heads, dh).transpose(1, 2) for t in (q, kk, v))
        att = torch.softmax(q @ kk.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(B, k, d))


class TransformerBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, ffn_factor: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_factor * d), nn.GELU(), nn.Linear(ffn_factor * d, d))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class TabularVAE(nn.Module):
    """Tokenizer -> transformer encoder -> (mu, logvar) -> z -> transformer decoder -> detokenizer."""

    def __init__(self, schema: TabularSchema, cfg: TrainingConfig):
        super().__init__()
        d = cfg.d_token
        self.k = schema.k
        self.d_token = d
        self.tokenizer = Tokenizer(schema, d)
        self.encoder = nn.ModuleList(TransformerBlock(d, cfg.n_heads, cfg.ffn_factor) for _ in range(cfg.n_layers))
        self.mu_head = nn.Linear(d, d)
        self.logvar_head = nn.Linear(d, d)
        self.decoder = nn.ModuleList(TransformerBlock(d, cfg.n_heads, cfg.ffn_factor) for _ in range(cfg.n_layers))
        self.detokenizer = Detokenizer(schema, d, cfg.hidden)

    @property
    def d_z(self) -> int:
        return self.k * self.d_token

    def encode(self, tokens: torch.Tensor, check: bool = False):
        h = tokens
        for i, block in enumerate(self.encoder):
            h = block(h)
            if check and not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations in encoder block {i}")
        mu = self.mu_head(h).flatten(1)
        logvar = self.logvar_head(h).flatten(1)
        if check and not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
            raise FloatingPointError("non-finite activations in latent heads")
        return mu, logvar

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.d_z:
            raise ValueError(f"expected latents of shape (batch, {self.d_z}), got {tuple(z.shape)}")
        h = z.reshape(z.shape[0], self.k, self.d_token)
        for block in self.decoder:
            h = block(h)
        return h

    def forward(self, x_num, x_cat, noise) -> dict[str, torch.Tensor]:
        mu, logvar = self.encode(self.tokenizer(x_num, x_cat))
        z = reparameterize(mu, logvar, noise)
        dec = self.decode(z)
        return {"mu": mu, "logvar": logvar, "z": z, "dec": dec.flatten(1), **logits_to_dict(self.detokenizer(dec))}

    def logits_from(self, outs: dict) -> FeatureLogits:
        n_cat = len(self.detokenizer.cat_pos)
        return FeatureLogits(
            [outs[f"cat{j}"] for j in range(n_cat)], outs["num"], outs["num_hidden"],
            self.detokenizer.protected_pos,
        )


def logits_to_dict(lg: FeatureLogits) -> dict[str, torch.Tensor]:
    out = {f"cat{j}": c for j, c in enumerate(lg.cat)}
    out["num"] = lg.num
    out["num_hidden"] = lg.num_hidden
    return out


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    if not (mu.shape == logvar.shape == noise.shape):
        raise ValueError("mu, logvar and noise must share a shape")
    return mu + torch.exp(0.5 * logvar) * noise


# ----------------------------------------------------------------------------
# losses


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-row KL(N(mu, e^logvar) || N(0, I))."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1 - logvar).sum(dim=-1)


def elbo_terms(logits: FeatureLogits, x_num, x_cat, mu, logvar) -> dict[str, torch.Tensor]:
    if mu.shape[0] == 0:
        raise ValueError("empty batch")
    ce = mu.new_zeros(())
    for j, lg in enumerate(logits.cat):
        if j == logits.protected_pos:
            continue
        ce = ce + F.cross_entropy(lg, x_cat[:, j])
    mse = ((logits.num - x_num) ** 2).sum(dim=1).mean() if x_num.shape[1] else mu.new_zeros(())
    return {"ce": ce, "mse": mse, "kl": kl_divergence(mu, logvar).mean()}


def elbo_loss(logits: FeatureLogits, x_num, x_cat, mu, logvar, beta: float) -> torch.Tensor:
    """CE (non-protected categoricals) + MSE (numericals) + beta * KL, averaged over rows."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    t = elbo_terms(logits, x_num, x_cat, mu, logvar)
    return t["ce"] + t["mse"] + beta * t["kl"]


def uniform_group_loss(protected_logits: torch.Tensor) -> torch.Tensor:
    """L2 distance between the batch-mean softmax and the uniform distribution."""
    if protected_logits.shape[0] == 0:
        raise ValueError("empty batch")
    n_groups = protected_logits.shape[1]
    if n_groups < 2:
        raise ValueError("need at least two groups")
    gap = torch.softmax(protected_logits, dim=1).mean(dim=0) - 1.0 / n_groups
    # smooth at zero so the gradient stays finite when the gap vanishes
    return torch.sqrt((gap**2).sum() + 1e-24)


def quality_loss(logits: FeatureLogits, x_num, x_cat, mu, logvar, beta: float):
    """Returns (total, parts) with total = ELBO loss + uniform group loss."""
    terms = elbo_terms(logits, x_num, x_cat, mu, logvar)
    elbo = terms["ce"] + terms["mse"] + beta * terms["kl"]
    ls = uniform_group_loss(logits.protected)
    parts = {k: float(v.detach()) for k, v in terms.items()}
    parts.update(elbo=float(elbo.detach()), l_s=float(ls.detach()))
    return elbo + ls, parts


def adapt_beta(beta: float, history, cfg: TrainingConfig) -> float:
    """Decay beta when the last ``patience`` epoch losses show no strict improvement.

    ``history`` holds reconstruction losses since the last beta change. The
    reference is the best loss before the window, or the window's first entry.
    """
    if len(history) == 0:
        raise ValueError("empty loss history")
    if len(history) < cfg.patience:
        return beta
    window = list(history[-cfg.patience:])
    before = list(history[: -cfg.patience])
    best = min(before) if before else window.pop(0)
    for v in window:
        if v < best:
            return beta
    return max(beta * cfg.beta_decay, cfg.beta_floor)


# ----------------------------------------------------------------------------
# checkpoint


@dataclass
class ModelCheckpoint:
    schema: TabularSchema
    states: list[QuantileState]
    train_cfg: TrainingConfig
    model: TabularVAE
    reference: TabularVAE | None = None
    denoiser: nn.Module | None = None
    diffusion_meta: dict = field(default_factory=dict)
    fair_cfg: dict | None = None
    privacy: dict | None = None  # serialised PrivacyAccount + spec
    history: dict = field(default_factory=dict)
    beta: float | None = None

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "schema": self.schema.to_dict(),
            "train_cfg": asdict(self.train_cfg),
            "fair_cfg": self.fair_cfg,
            "privacy": self.privacy,
            "diffusion_meta": self.diffusion_meta,
            "history": self.history,
            "beta": self.beta,
            "has_reference": self.reference is not None,
            "has_denoiser": self.denoiser is not None,
        }
        with open(path / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        tensors = {
            "model": self.model.state_dict(),
            "reference": self.reference.state_dict() if self.reference is not None else None,
            "denoiser": self.denoiser.state_dict() if self.denoiser is not None else None,
            "states": [(torch.from_numpy(s.values), torch.from_numpy(s.probs)) for s in self.states],
        }
        torch.save(tensors, path / "tensors.pt")

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        from .diffusion import DiffusionConfig, Denoiser

        path = Path(path)
        if not (path / "meta.json").exists():
            raise FileNotFoundError(f"no checkpoint at {path}")
        with open(path / "meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')}")
        schema = TabularSchema.from_dict(meta["schema"])
        cfg = TrainingConfig(**meta["train_cfg"])
        tensors = torch.load(path / "tensors.pt", weights_only=False)
        model = TabularVAE(schema, cfg)
        model.load_state_dict(tensors["model"])
        reference = None
        if tensors["reference"] is not None:
            reference = TabularVAE(schema, cfg)
            reference.load_state_dict(tensors["reference"])
            reference.requires_grad_(False)
        denoiser = None
        if tensors["denoiser"] is not None:
            dcfg = DiffusionConfig(**meta["diffusion_meta"]["config"])
            denoiser = Denoiser(model.d_z, dcfg)
            denoiser.load_state_dict(tensors["denoiser"])
        states = [QuantileState(v.numpy(), p.numpy()) for v, p in tensors["states"]]
        return cls(
            schema, states, cfg, model, reference, denoiser, meta["diffusion_meta"],
            meta["fair_cfg"], meta["privacy"], meta["history"], meta["beta"],
        )


# ----------------------------------------------------------------------------
# training


def _seed32(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def encoded_tensors(enc: EncodedDataset, dtype=torch.float32):
    return torch.as_tensor(enc.num, dtype=dtype), torch.as_tensor(enc.cat, dtype=torch.long)


@dataclass
class PrivacyState:
    """Runtime DP state carried across the two VAE phases."""

    spec: dp.PrivacySpec
    plan: dp.SamplingPlan
    setup: dp.DPSetup

    def to_dict(self) -> dict:
        return {
            "spec": {**asdict(self.spec), "alphas": list(self.spec.alphas)},
            "batch_size": self.plan.batch_size,
            "account": self.setup.account.to_dict(),
            "group_clips": list(self.setup.group_clips),
            "noise_std": self.setup.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict, group_sizes) -> "PrivacyState":
        spec = dp.PrivacySpec(**{**d["spec"], "alphas": tuple(d["spec"]["alphas"])})
        plan = dp.plan_balanced_sampling(group_sizes, d["batch_size"])
        acc = dp.PrivacyAccount.from_dict(d["account"])
        return cls(spec, plan, dp.DPSetup(acc, tuple(d["group_clips"]), d["noise_std"]))

    def report(self) -> dict:
        return self.setup.account.report(self.spec.target_eps, self.spec.delta)


def init_privacy(priv: dp.PrivacySpec | None, plan: dp.SamplingPlan, cfg: TrainingConfig) -> PrivacyState | None:
    if priv is None:
        return None
    total = (cfg.epochs_phase1 + cfg.epochs_phase2) * plan.iterations
    if total == 0:
        total = 1
    return PrivacyState(priv, plan, dp.setup_privacy(priv, plan, total))


def run_epochs(
    model: TabularVAE,
    optimizer: torch.optim.Optimizer,
    enc: EncodedDataset,
    plan: dp.SamplingPlan,
    epochs: int,
    make_loss: Callable,
    privacy: PrivacyState | None,
    seed: int,
    phase: int,
    on_epoch: Callable[[int, list[dict]], None] | None = None,
) -> list[dict]:
    """Shared (DP-)SGD loop over balanced Poisson batches.

    ``make_loss(inputs, idx)`` returns a callable mapping the model's output dict
    to the batch loss; after a call its ``parts`` attribute holds float components.
    Returns per-epoch means of those components.
    """
    dtype = next(model.parameters()).dtype
    x_num_all, x_cat_all = encoded_tensors(enc, dtype)
    groups = enc.cat[:, enc.schema.categorical_indices.index(enc.schema.protected_index)]
    gen = torch.Generator().manual_seed(_seed32(seed, phase, 1))
    noise_gen = torch.Generator().manual_seed(_seed32(seed, phase, 2))
    group_t = torch.as_tensor(groups)
    history = []
    for epoch in range(epochs):
        batches = dp.poisson_batches(plan, groups, _seed32(seed, phase, 3, epoch))
        parts_log = []
        for idx in batches:
            idx_t = torch.as_tensor(idx)
            noise = torch.randn(len(idx), model.d_z, generator=gen, dtype=dtype)
            inputs = (x_num_all[idx_t], x_cat_all[idx_t], noise)
            loss_fn = make_loss(inputs, idx_t)
            if privacy is None:
                optimizer.zero_grad(set_to_none=True)
                loss = loss_fn(model(*inputs))
                if not torch.isfinite(loss):
                    raise FloatingPointError("non-finite training loss")
                loss.backward()
                optimizer.step()
            else:
                st = privacy.setup
                clips = torch.as_tensor(st.group_clips, dtype=dtype)[group_t[idx_t]]
                dp.dp_step(
                    model, optimizer, inputs, loss_fn, privacy.spec.clip,
                    st.noise_std / privacy.spec.clip, st.account, noise_gen, clips,
                )
            parts_log.append(loss_fn.parts)
        keys = sorted({k for p in parts_log for k in p})
        summary = {k: float(np.mean([p[k] for p in parts_log if k in p])) for k in keys}
        history.append(summary)
        if on_epoch is not None:
            on_epoch(epoch, parts_log)
    return history


class QualityObjective:
    """Callable batch loss for Phase 1; remembers the last components."""

    def __init__(self, model: TabularVAE, x_num, x_cat, beta: float):
        self.model, self.x_num, self.x_cat, self.beta = model, x_num, x_cat, beta
        self.parts: dict = {}

    def __call__(self, outs: dict) -> torch.Tensor:
        total, parts = quality_loss(
            self.model.logits_from(outs), self.x_num, self.x_cat, outs["mu"], outs["logvar"], self.beta
        )
        self.parts = {**parts, "loss": float(total.detach())}
        return total


def build_model(schema: TabularSchema, cfg: TrainingConfig) -> TabularVAE:
    torch.manual_seed(_seed32(cfg.seed, 0))
    return TabularVAE(schema, cfg)


def train_phase1(
    d: Dataset, cfg: TrainingConfig, priv: dp.PrivacySpec | None = None, states=None
) -> ModelCheckpoint:
    """Quality phase: minimise ELBO + uniform group loss with (DP-)SGD on balanced batches.

    ``priv=None`` trains without clipping, noise or accounting.
    """
    if states is None:
        enc = fit_transform(d)
    else:
        from .schema_io import transform

        enc = transform(d, states)
    model = build_model(d.schema, cfg)
    model.tokenizer.validate(torch.as_tensor(enc.cat))
    plan = dp.plan_balanced_sampling(d.group_sizes(), cfg.batch_size)
    privacy = init_privacy(priv, plan, cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    beta = cfg.beta
    since_change: list[float] = []

    def make_loss(inputs, idx):
        return QualityObjective(model, inputs[0], inputs[1], beta)

    def on_epoch(epoch, parts):
        nonlocal beta, since_change
        if privacy is None:
            since_change.append(float(np.mean([p["ce"] + p["mse"] for p in parts])))
            new = adapt_beta(beta, since_change, cfg)
        else:
            # the loss history is data-dependent; under DP use a fixed schedule
            new = beta if (epoch + 1) % cfg.patience else max(beta * cfg.beta_decay, cfg.beta_floor)
        if new != beta:
            log.info("epoch %d: beta %.3g -> %.3g", epoch, beta, new)
            beta = new
            since_change = []

    history = run_epochs(model, optimizer, enc, plan, cfg.epochs_phase1, make_loss, privacy, cfg.seed, 1, on_epoch)
    reference = copy.deepcopy(model)
    reference.requires_grad_(False)
    return ModelCheckpoint(
        d.schema, enc.states, cfg, model, reference,
        privacy=privacy.to_dict() if privacy else None,
        history={"phase1": history}, beta=beta,
    )

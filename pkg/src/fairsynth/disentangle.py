"""Kernel alignment, sliced Wasserstein distance and the Phase-2 fairness loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import dp
from .schema_io import Dataset, transform
from .vae import (
    ModelCheckpoint,
    PrivacyState,
    TrainingConfig,
    _seed32,
    quality_loss,
    run_epochs,
)

log = logging.getLogger(__name__)

STAGES = ("latent", "detokenizer", "decoder")


class DegenerateRepresentationError(ValueError):
    """Centered activations are all zero, so alignment is undefined."""


def _tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def _out(v: torch.Tensor, as_tensor: bool):
    return v if as_tensor else float(v)


def hsic(K, L):
    """(n-1)^-2 tr(K H L H) with the centering matrix H = I - 11^T/n."""
    K, t = _tensor(K)
    L, _ = _tensor(L)
    n = K.shape[0]
    if K.shape != (n, n) or L.shape != (n, n):
        raise ValueError("kernel matrices must be square and of equal size")
    if n < 2:
        raise ValueError("hsic needs n >= 2")
    for M in (K, L):
        if not torch.allclose(M, M.T, rtol=1e-10, atol=1e-12):
            raise ValueError("kernel matrix is not symmetric")
    # tr(K H L H) = <HKH, HLH> since H is idempotent and the kernels symmetric
    return _out((_double_center(K) * _double_center(L)).sum() / (n - 1) ** 2, t)


def _double_center(M: torch.Tensor) -> torch.Tensor:
    # centering annihilates constants; shifting first makes that exact in floating point
    M = M - M[0, 0]
    M = M - M.mean(dim=0, keepdim=True)
    return M - M.mean(dim=1, keepdim=True)


def _cka(A: torch.Tensor, B: torch.Tensor, eps: float = 0.0):
    A = A - A.mean(dim=0, keepdim=True)
    B = B - B.mean(dim=0, keepdim=True)
    num = (A.T @ B).pow(2).sum()
    den = torch.linalg.matrix_norm(A.T @ A) * torch.linalg.matrix_norm(B.T @ B)
    if not bool(den > eps):
        return None
    return num / den


def cka_linear(A, B):
    """Linear CKA ||A^T B||_F^2 / (||A^T A||_F ||B^T B||_F) after column centering."""
    A, t = _tensor(A)
    B, _ = _tensor(B)
    if A.shape[0] != B.shape[0]:
        raise ValueError("cka_linear needs the same number of rows")
    v = _cka(A, B)
    if v is None:
        raise DegenerateRepresentationError("degenerate representation")
    return _out(v, t)


def cka_transposed(A, B):
    """Alignment of activation patterns between two groups of different sizes.

    ``A`` is (n0, p), ``B`` is (n1, p); the transposes are compared with linear CKA,
    so the p activations play the role of samples.
    """
    A, t = _tensor(A)
    B, _ = _tensor(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError("groups must share the activation width")
    if A.shape[1] < 2:
        raise ValueError("need at least 2 activations")
    v = _cka(A.T, B.T)
    if v is None:
        raise DegenerateRepresentationError("degenerate representation")
    return _out(v, t)


def wasserstein_1d(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Exact W1 between empirical distributions, column by column.

    ``u`` is (n, K), ``v`` is (m, K); returns (K,). Differentiable in both.
    """
    n, m = u.shape[0], v.shape[0]
    if n == 0 or m == 0:
        raise ValueError("empty sample")
    us, _ = torch.sort(u, dim=0)
    vs, _ = torch.sort(v, dim=0)
    if n == m:
        return (us - vs).abs().mean(dim=0)
    # quantile functions are piecewise constant on the merged grid {i/n} U {j/m};
    # work in units of 1/(n m) to keep the grid exact
    T = np.union1d(np.arange(1, n + 1) * m, np.arange(1, m + 1) * n)
    widths = np.diff(np.concatenate([[0], T])) / (n * m)
    iu = -(-T // m) - 1
    iv = -(-T // n) - 1
    w = torch.as_tensor(widths, dtype=u.dtype)
    return ((us[iu] - vs[iv]).abs() * w[:, None]).sum(dim=0)


def random_directions(d: int, n_proj: int, seed: int, dtype=torch.float64) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    w = torch.randn(n_proj, d, generator=gen, dtype=torch.float64)
    return (w / w.norm(dim=1, keepdim=True)).to(dtype)


def sliced_wasserstein(P, Q, n_proj: int = 64, seed: int = 0):
    """Mean over ``n_proj`` random unit directions of the 1-D W1 between projections."""
    P, t = _tensor(P)
    Q, _ = _tensor(Q)
    if P.ndim != 2 or Q.ndim != 2 or P.shape[1] != Q.shape[1]:
        raise ValueError("sample sets must share the dimension")
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    theta = random_directions(P.shape[1], n_proj, seed, P.dtype)
    return _out(wasserstein_1d(P @ theta.T, Q @ theta.T).mean(), t)


# ----------------------------------------------------------------------------
# fairness loss


@dataclass
class FairnessConfig:
    lam: float = 4.0
    stages: tuple[str, ...] = STAGES
    swd_projections: int = 64
    swd_seed: int = 0
    stage_weights: dict = field(default_factory=lambda: {s: 1.0 for s in STAGES})

    def __post_init__(self):
        self.stages = tuple(self.stages)
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not self.stages:
            raise ValueError("at least one intervention stage is required")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}")
        if self.swd_projections < 1:
            raise ValueError("swd_projections must be >= 1")
        if any(w < 0 for w in self.stage_weights.values()):
            raise ValueError("stage weights must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d


def _split_groups(X: torch.Tensor, S: torch.Tensor):
    A, B = X[S == 0], X[S == 1]
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("a protected group is absent from the batch")
    return A, B


def _neg_alignment(X, S, parts, name):
    A, B = _split_groups(X, S)
    v = _cka(A.T, B.T, eps=1e-20)
    if v is None:
        parts["degenerate"] = parts.get("degenerate", 0) + 1
        return None
    parts[f"cka_{name}"] = float(v.detach())
    return -v


def fair_loss(
    cfg: FairnessConfig,
    S: torch.Tensor,
    *,
    z_ref=None,
    z=None,
    dec_ref=None,
    dec=None,
    logits=None,
    quality=None,
    step_seed: int = 0,
):
    """Sum over configured stages of (divergence penalty + lambda * (-CKA^T)).

    Returns ``(loss, parts)``. Disentanglement terms with degenerate alignment
    denominators are skipped and counted in ``parts["degenerate"]``.
    """
    S = torch.as_tensor(S)
    parts: dict = {}
    total = None

    def add(term):
        nonlocal total
        total = term if total is None else total + term

    for stage in cfg.stages:
        w = cfg.stage_weights.get(stage, 1.0)
        if stage == "latent":
            pen = sliced_wasserstein(z_ref, z, cfg.swd_projections, _seed32(cfg.swd_seed, step_seed, 0))
            dis = _neg_alignment(z, S, parts, stage)
        elif stage == "decoder":
            pen = sliced_wasserstein(dec_ref, dec, cfg.swd_projections, _seed32(cfg.swd_seed, step_seed, 1))
            dis = _neg_alignment(dec, S, parts, stage)
        else:
            pen = quality
            terms = []
            for j, lg in enumerate(logits.unprotected_cat):
                v = _neg_alignment(lg, S, parts, f"cat{j}")
                if v is not None:
                    terms.append(v)
            for j in range(logits.num_hidden.shape[1]):
                v = _neg_alignment(logits.num_hidden[:, j], S, parts, f"num{j}")
                if v is not None:
                    terms.append(v)
            dis = torch.stack(terms).mean() if terms else None
        parts[f"penalty_{stage}"] = float(pen.detach())
        add(w * pen)
        if dis is not None:
            parts[f"disentangle_{stage}"] = float(dis.detach())
            add(w * cfg.lam * dis)
    parts["loss"] = float(total.detach())
    return total, parts


class FairObjective:
    """Phase-2 batch loss with frozen reference outputs for the same batch and noise."""

    def __init__(self, model, reference, inputs, S, cfg: FairnessConfig, beta: float, step: int):
        self.model, self.cfg, self.S, self.beta, self.step = model, cfg, S, beta, step
        self.x_num, self.x_cat = inputs[0], inputs[1]
        with torch.no_grad():
            ref = reference(*inputs)
        self.z_ref, self.dec_ref = ref["z"], ref["dec"]
        self.parts: dict = {}

    def __call__(self, outs: dict) -> torch.Tensor:
        logits = self.model.logits_from(outs)
        quality = None
        if "detokenizer" in self.cfg.stages:
            quality, qparts = quality_loss(logits, self.x_num, self.x_cat, outs["mu"], outs["logvar"], self.beta)
        total, parts = fair_loss(
            self.cfg, self.S, z_ref=self.z_ref, z=outs["z"], dec_ref=self.dec_ref, dec=outs["dec"],
            logits=logits, quality=quality, step_seed=self.step,
        )
        self.parts = parts
        return total


def train_phase2(
    ckpt: ModelCheckpoint,
    d: Dataset,
    cfg: FairnessConfig,
    tcfg: TrainingConfig | None = None,
    priv: dp.PrivacySpec | None = None,
) -> ModelCheckpoint:
    """Disentanglement phase: DP-SGD on the fairness loss relative to the frozen reference.

    The privacy account planned in Phase 1 is continued; ``priv`` must agree with it.
    """
    if ckpt.reference is None:
        raise ValueError("checkpoint has no Phase-1 reference model")
    tcfg = tcfg or ckpt.train_cfg
    if priv is not None and ckpt.privacy is None:
        raise ValueError("privacy must be planned before Phase 1")
    enc = transform(d, ckpt.states)
    privacy = PrivacyState.from_dict(ckpt.privacy, d.group_sizes()) if ckpt.privacy else None
    if privacy is not None and priv is not None and privacy.spec != priv:
        raise ValueError("privacy spec differs from the one planned in Phase 1")
    plan = privacy.plan if privacy else dp.plan_balanced_sampling(d.group_sizes(), tcfg.batch_size)
    model = ckpt.model
    reference = ckpt.reference
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    beta = ckpt.beta if ckpt.beta is not None else tcfg.beta
    prot_col = enc.schema.categorical_indices.index(enc.schema.protected_index)
    S_all = torch.as_tensor(enc.cat[:, prot_col])
    step = 0

    def make_loss(inputs, idx):
        nonlocal step
        step += 1
        return FairObjective(model, reference, inputs, S_all[idx], cfg, beta, step)

    history = run_epochs(model, optimizer, enc, plan, tcfg.epochs_phase2, make_loss, privacy, tcfg.seed, 2)
    ckpt.fair_cfg = cfg.to_dict()
    ckpt.history = {**ckpt.history, "phase2": history}
    if privacy is not None:
        ckpt.privacy = privacy.to_dict()
    return ckpt

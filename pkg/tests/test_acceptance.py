"""Acceptance criteria, one test each. Each records a PASS/FAIL line in the terminal summary."""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from _oracles import fair_gradient_error, hsic_by_hand, quality_gradient_error, sorted_w1, tiny_model
from fairsynth import dp
from fairsynth.diffusion import DiffusionConfig, fit_denoiser, sample_from
from fairsynth.disentangle import cka_linear, hsic, sliced_wasserstein
from fairsynth.evaluation import (
    AdversaryConfig,
    adversarial_ber,
    adversarial_ncb,
    ber,
    gower_distance,
    identifiability,
    ncb,
    task_fairness_categorical,
    task_fairness_numerical,
)
from fairsynth.pipeline import RunConfig, generate, load_config, privacy_report, run_experiment, train_model
from fairsynth.schema_io import save_schema, write_dataset
from fairsynth.toydata import make_biased_dataset


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


# ---------------------------------------------------------------------------


def test_01_accountant_exactness(criterion):
    with Timer() as t:
        full = dp.rdp_epsilon_subsampled(2, 1.0, 1.0, 1)
        one = dp.rdp_epsilon_subsampled(5, 0.02, 1.3, 1)
        many = dp.rdp_epsilon_subsampled(5, 0.02, 1.3, 777)
        conv = dp.rdp_to_dp([0.5], 1e-5, alphas=[10])
    hand = 0.5 + math.log(1e5) / 9
    ok = (abs(full - 1.0) <= 1e-9 and abs(many - 777 * one) <= 1e-12 * max(1.0, many)
          and abs(conv - hand) <= 1e-9 and t.seconds < 1)
    criterion(1, "accountant exactness", ok,
              f"eps(2,1,1)={full!r}, composition err={abs(many - 777 * one):.1e}, "
              f"conversion err={abs(conv - hand):.1e}, {t.seconds:.2f}s")
    assert ok


def test_02_rate_monotonicity_property(criterion):
    rng = np.random.default_rng(2024)
    violations = bound_violations = 0
    with Timer() as t:
        for _ in range(1000):
            alpha = float(rng.choice(dp.DEFAULT_ALPHAS[:30]))
            sigma = float(rng.uniform(0.5, 20))
            steps = int(rng.integers(1, 2000))
            g1, g2 = sorted(rng.uniform(1e-4, 1.0, 2))
            a = dp.rdp_epsilon_subsampled(alpha, g1, sigma, steps)
            b = dp.rdp_epsilon_subsampled(alpha, g2, sigma, steps)
            # float rounding only: a relative 1e-9 slack on values that can be ~1e-10
            if b < a * (1 - 1e-9) - 1e-15:
                violations += 1
            # small-rate regime: gamma < 1/(16 sigma), integer alpha <= sigma^2 ln(1/(gamma sigma))
            s = float(rng.uniform(1, 10))
            g = float(rng.uniform(1e-4, 1 / (16 * s)))
            amax = int(s**2 * math.log(1 / (g * s)))
            if amax >= 2:
                al = int(rng.integers(2, amax + 1))
                if dp.rdp_epsilon_subsampled(al, g, s, 1) > 2 * al * g**2 / s**2:
                    bound_violations += 1
    ok = violations == 0 and bound_violations == 0 and t.seconds < 10
    criterion(2, "subsampling monotonicity property suite", ok,
              f"{violations} order violations, {bound_violations} small-rate bound violations "
              f"over 1000 draws, {t.seconds:.2f}s")
    assert ok


def test_03_sampling_plan(criterion):
    with Timer() as t:
        plan = dp.plan_balanced_sampling((300, 100), 50)
        groups = np.array([0] * 300 + [1] * 100)
        counts = []
        for epoch in range(10_000):
            for idx in dp.poisson_batches(plan, groups, epoch):
                counts.append(np.bincount(groups[idx], minlength=2))
        counts = np.array(counts)
    n_batches = len(counts)
    means = counts.mean(0)
    sd = np.sqrt(np.array([300 * (1 / 12) * (11 / 12), 100 * 0.25 * 0.75]) / n_batches)
    exact = plan.iterations == 4 and plan.rates[0] == 1 / 12 and plan.rates[1] == 0.25
    ok = exact and bool(np.all(np.abs(means - 25) <= 3 * sd)) and t.seconds < 30
    criterion(3, "sampling-plan arithmetic", ok,
              f"L={plan.iterations}, gamma={plan.rates}, mean counts {means.round(3).tolist()} "
              f"over {n_batches} batches (3 sd of mean = {np.round(3 * sd, 3).tolist()}), {t.seconds:.1f}s")
    assert ok


def test_04_global_noise_multiplier(criterion):
    with Timer() as t:
        sym = dp.global_noise_multiplier((120, 480, 77), (1.7, 1.7, 1.7))
        val = dp.global_noise_multiplier((100, 300), (2.0, 4.0))
    ok = sym == 1.7 and val == 3.2 and t.seconds < 1
    criterion(4, "sigma_global formula", ok, f"equal sigmas -> {sym!r}, (100,300)/(2,4) -> {val!r}")
    assert ok


def test_05_dp_sgd_mechanics(criterion):
    c = 0.7
    with Timer() as t:
        gen = torch.Generator().manual_seed(5)
        g = torch.randn(10_000, 16, generator=gen, dtype=torch.float64)
        g *= torch.rand(10_000, 1, generator=gen, dtype=torch.float64) * 4
        # one row at a time: a batch of one returns exactly its clipped gradient
        norms = torch.stack([dp.clip_and_aggregate(g[i:i + 1], c, 0.0).norm() for i in range(g.shape[0])])
        max_norm = float(norms.max())
        B, sg = 32, 1.9
        noise_only = dp.clip_and_aggregate(torch.zeros(B, 100_000, dtype=torch.float64), c, sg,
                                           torch.Generator().manual_seed(6))
        std = float(noise_only.std())
    target = c * sg / B
    ok = max_norm <= c * (1 + 1e-15) and abs(std / target - 1) < 0.02 and t.seconds < 60
    criterion(5, "DP-SGD mechanics", ok,
              f"max clipped norm {max_norm!r} (c={c}), noise std {std:.5f} vs {target:.5f}, {t.seconds:.1f}s")
    assert ok


def test_06_cka_hsic_suite(criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    with Timer() as t:
        for _ in range(200):
            n, p = int(rng.integers(3, 30)), int(rng.integers(2, 10))
            A = rng.normal(size=(n, p))
            B = rng.normal(size=(n, int(rng.integers(2, 10))))
            Q, _ = np.linalg.qr(rng.normal(size=(p, p)))
            base = cka_linear(A, B)
            worst = max(worst, abs(cka_linear(A, A) - 1), abs(cka_linear(A @ Q, B) - base),
                        abs(cka_linear(A * rng.uniform(0.01, 100), B) - base))
        I = [[1.0, 0.0], [0.0, 1.0]]
        two = hsic(I, I)
        K = rng.normal(size=(9, 9))
        const = hsic(K + K.T, np.full((9, 9), 2.5))
    ok = worst <= 1e-10 and abs(two - hsic_by_hand(I, I)) < 1e-15 and const == 0.0 and t.seconds < 10
    criterion(6, "CKA/HSIC suite", ok,
              f"max invariance error {worst:.1e} over 200 instances, hsic(I2,I2)={two!r} "
              f"(hand {hsic_by_hand(I, I)!r}), constant kernel {const!r}")
    assert ok


def test_07_swd_oracles(criterion):
    rng = np.random.default_rng(7)
    with Timer() as t:
        P = rng.normal(size=(200, 3))
        self_d = sliced_wasserstein(P, P, 64)
        u, v = rng.normal(size=(300, 1)), rng.gamma(2.0, size=(300, 1))
        one_d = abs(sliced_wasserstein(u, v, 7) - sorted_w1(u[:, 0], v[:, 0]))
        X = rng.normal(size=(500, 2))
        shift = np.array([2.0, 1.0])
        two_d = sliced_wasserstein(X, X + shift, n_proj=2000, seed=11)
    ref = np.linalg.norm(shift) * 2 / np.pi
    ok = self_d == 0.0 and one_d <= 1e-12 and abs(two_d / ref - 1) <= 0.05 and t.seconds < 30
    criterion(7, "SWD oracles", ok,
              f"SWD(P,P)={self_d!r}, 1-D error {one_d:.1e}, 2-D shift {two_d:.4f} vs {ref:.4f}")
    assert ok


def test_08_gradient_correctness(criterion):
    with Timer() as t:
        n_params = sum(p.numel() for p in tiny_model().parameters())
        q_err, _ = quality_gradient_error(0)
        f_err, _ = fair_gradient_error(0, lam=4.0)
    ok = n_params <= 500 and q_err < 1e-4 and f_err < 1e-4 and t.seconds < 120
    criterion(8, "gradient correctness (float64 central differences)", ok,
              f"{n_params} params, quality rel err {q_err:.1e}, fair rel err {f_err:.1e}, {t.seconds:.1f}s")
    assert ok


def test_09_metric_oracles(criterion):
    with Timer() as t:
        S = np.array([1] * 10 + [0] * 20)
        b_const = ber(np.zeros(30, int), S)
        b_hand = ber(np.array([0] * 2 + [1] * 8 + [1] * 5 + [0] * 15), S)
        n_hand = ncb(np.array([1, 1, 0, 0, 1, 0, 0, 0]), np.array([0] * 4 + [1] * 4))
        gw = gower_distance([0.5, 0], [0.0, 1], [0.5, 0.5], [1.0, 1.0], [False, True])
        real = make_biased_dataset(200, seed=9)
        ident = identifiability(real, real)
        g0 = np.array([0.25, -3.0, 1.5, 8.0])
        un = task_fairness_numerical(g0 + 0.75, g0)
        uf = task_fairness_categorical(
            np.array([0] * 5 + [1] * 3 + [2] * 2 + [0] * 2 + [1] * 5 + [2] * 3), np.array([1] * 10 + [0] * 10), 3)
    ok = (b_const == 0.5 and abs(b_hand - 0.225) < 1e-15 and abs(n_hand - 0.5) < 1e-15 and abs(gw - 0.75) < 1e-15
          and ident == 1.0 and un == 0.75 and abs(uf - 0.3) < 1e-15 and t.seconds < 30)
    criterion(9, "metric oracles", ok,
              f"BER const={b_const}, hand={b_hand!r}; NCB={n_hand!r}; Gower={gw!r}; "
              f"identifiability(copy)={ident}; U_n shift={un!r}; U(f)={uf!r}")
    assert ok


def test_10_diffusion_sanity(criterion):
    with Timer() as t:
        g = torch.Generator().manual_seed(10)
        n = 5000
        comp = torch.rand(n, generator=g) < 0.3
        centers = torch.where(comp[:, None], torch.tensor([4.0, 1.0]), torch.tensor([1.0, -3.0]))
        z = centers + 0.5 * torch.randn(n, 2, generator=g)
        cfg = DiffusionConfig(width=128, layers=3, emb_dim=32, batch_size=256, epochs=150)
        den, _ = fit_denoiser(z, cfg, seed=0)
        x = sample_from(den, 10_000, seed=1)
    truth = np.array([0.3 * 4 + 0.7 * 1, 0.3 * 1 + 0.7 * -3])
    got = x.mean(0).double().numpy()
    rel = np.abs(got - truth) / np.abs(truth)
    ok = bool(np.all(rel <= 0.10)) and t.seconds < 300
    criterion(10, "diffusion sanity (2-D mixture)", ok,
              f"sample mean {got.round(3).tolist()} vs {truth.tolist()} (rel err {rel.round(3).tolist()}), "
              f"{t.seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# directional end-to-end


def _cell(d, cfg, lam, eps):
    ckpt = train_model(d, cfg, lam, eps, seed=0)
    synth = generate(ckpt, d.n, seed=1)
    adv = AdversaryConfig(seed=0)
    prep = privacy_report(ckpt, d.group_sizes())
    return {
        "ber": adversarial_ber(synth, adv),
        "a_ncb": adversarial_ncb(synth, adv),
        "p1": float(synth.S.mean()),
        "spent": prep["spent_eps"] if prep else None,
    }


@pytest.mark.slow
def test_11_directional_end_to_end(criterion):
    d = make_biased_dataset(5000, seed=0)
    cfg = RunConfig(data="", schema="")
    res = {}
    with Timer() as t:
        for eps in (math.inf, 3.0):
            for lam in (0.0, 4.0):
                res[eps, lam] = _cell(d, cfg, lam, eps)
    checks, parts = [], []
    for eps in (math.inf, 3.0):
        lo, hi = res[eps, 0.0], res[eps, 4.0]
        gap = hi["ber"] - lo["ber"]
        checks += [gap >= 0.05, hi["a_ncb"] > lo["a_ncb"]]
        parts.append(f"eps={eps:g}: BER {lo['ber']:.3f}->{hi['ber']:.3f} (gap {gap:+.3f}), "
                     f"A-NCB {lo['a_ncb']:.3f}->{hi['a_ncb']:.3f}")
    spent = max(res[3.0, lam]["spent"] for lam in (0.0, 4.0))
    p1 = [r["p1"] for r in res.values()]
    checks += [spent <= 3.0 * (1 + 1e-4), all(abs(p - 0.5) <= 0.05 for p in p1), t.seconds < 1800]
    parts.append(f"spent eps {spent:.4f}; group-1 share {[round(p, 3) for p in p1]}; {t.seconds:.0f}s")
    ok = all(checks)
    criterion(11, "directional end-to-end", ok, "; ".join(parts))
    assert ok, "; ".join(parts)


# ---------------------------------------------------------------------------
# reproducibility


def _sweep(root: Path, name: str) -> Path:
    d = make_biased_dataset(300, seed=0)
    write_dataset(d, root / "data.csv")
    save_schema(d.schema, root / "schema.json")
    conf = {
        "data": "data.csv", "schema": "schema.json", "out": str(root / name), "folds": 2,
        "lambdas": [4], "epsilons": [3], "seed": 12,
        "training": {"epochs_phase1": 2, "epochs_phase2": 1, "batch_size": 64, "d_token": 8, "n_heads": 2,
                     "n_layers": 1, "hidden": 4},
        "diffusion": {"epochs": 2, "width": 32, "layers": 2, "emb_dim": 8, "steps": 8},
    }
    (root / f"{name}.json").write_text(json.dumps(conf))
    run_experiment(load_config(root / f"{name}.json"))
    return root / name


def test_12_reproducibility(criterion, tmp_path):
    a = _sweep(tmp_path, "first")
    b = _sweep(tmp_path, "second")
    files = sorted(p.relative_to(a) for p in (a / "cells").rglob("*") if p.suffix in (".json", ".csv"))
    same = [(a / f).read_bytes() == (b / f).read_bytes() for f in files]
    reports = [f for f in files if f.name == "report.json"]
    ok = len(reports) == 2 and all(same)
    criterion(12, "reproducibility", ok,
              f"{sum(same)}/{len(files)} cell artifacts byte-identical across reruns "
              f"({len(reports)} reports, privacy, synthetic tables)")
    assert ok

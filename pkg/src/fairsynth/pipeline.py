"""Run configuration, generation, experiment sweeps and report aggregation."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import dp
from .diffusion import DiffusionConfig, sample_latents, train_diffusion
from .disentangle import FairnessConfig, train_phase2
from .evaluation import AdversaryConfig, EvalReport, evaluate
from .schema_io import (
    Dataset,
    EncodedDataset,
    inverse_transform,
    load_dataset,
    load_schema,
    split_cv,
    write_dataset,
)
from .vae import ModelCheckpoint, PrivacyState, TrainingConfig, _seed32, train_phase1

log = logging.getLogger(__name__)

METRICS = ("ber", "ncb", "a_ncb", "identifiability", "downstream_auc", "statistical_parity", "equalized_odds")


class ConfigError(ValueError):
    pass


def _parse_eps(v) -> float:
    if isinstance(v, str) and v.strip().lower() in ("inf", "infinity", "none"):
        return math.inf
    try:
        out = float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"bad epsilon {v!r}") from None
    if not out > 0:
        raise ConfigError("epsilon must be positive")
    return out


def _eps_json(e: float):
    return "inf" if math.isinf(e) else e


@dataclass
class RunConfig:
    data: str
    schema: str
    training: TrainingConfig = field(default_factory=TrainingConfig)
    fairness: FairnessConfig = field(default_factory=FairnessConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    privacy: dict | None = None  # delta, clip, mode; applies to finite epsilons
    no_dp: bool = False
    folds: int = 3
    lambdas: list = field(default_factory=lambda: [4.0])
    epsilons: list = field(default_factory=lambda: [3.0])
    out: str = "runs/default"
    seed: int = 0
    n_synth: int | None = None
    adversary: dict = field(default_factory=dict)
    k_clusters: int = 2

    def __post_init__(self):
        if self.no_dp and self.privacy is not None:
            raise ConfigError("no_dp and a privacy section are mutually exclusive")
        if not self.lambdas:
            raise ConfigError("lambda grid is empty")
        if not self.epsilons:
            raise ConfigError("epsilon grid is empty")
        self.lambdas = [float(v) for v in self.lambdas]
        if any(v < 0 for v in self.lambdas):
            raise ConfigError("lambda must be nonnegative")
        self.epsilons = [math.inf] if self.no_dp else [_parse_eps(v) for v in self.epsilons]
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")
        if self.n_synth is not None and self.n_synth < 1:
            raise ConfigError("n_synth must be >= 1")

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        d = dict(d)
        try:
            for key in ("data", "schema"):
                if key not in d:
                    raise ConfigError(f"missing {key!r}")
                p = Path(d[key])
                if base is not None and not p.is_absolute():
                    p = base / p
                d[key] = str(p)
            d["training"] = TrainingConfig(**d.get("training", {}))
            d["fairness"] = FairnessConfig(**d.get("fairness", {}))
            d["diffusion"] = DiffusionConfig(**d.get("diffusion", {}))
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "schema": self.schema,
            "training": asdict(self.training),
            "fairness": self.fairness.to_dict(),
            "diffusion": asdict(self.diffusion),
            "privacy": self.privacy,
            "no_dp": self.no_dp,
            "folds": self.folds,
            "lambdas": self.lambdas,
            "epsilons": [_eps_json(e) for e in self.epsilons],
            "out": self.out,
            "seed": self.seed,
            "n_synth": self.n_synth,
            "adversary": self.adversary,
            "k_clusters": self.k_clusters,
        }

    def privacy_spec(self, eps: float) -> dp.PrivacySpec | None:
        if math.isinf(eps):
            return None
        p = self.privacy or {}
        return dp.PrivacySpec(
            eps, p.get("delta", 1e-5), p.get("clip", 1.0), mode=p.get("mode", "group")
        )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return RunConfig.from_dict(raw, base=path.parent)


def cell_seed(master: int, fold: int, lam_idx: int, eps_idx: int) -> int:
    h = hashlib.sha256(f"{master}:{fold}:{lam_idx}:{eps_idx}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def cell_grid(cfg: RunConfig) -> list[tuple[int, int, int, int]]:
    """(fold, lambda index, epsilon index, seed) for every cell; seeds are checked for collisions."""
    n_folds = cfg.folds
    cells = [
        (f, li, ei, cell_seed(cfg.seed, f, li, ei))
        for f in range(n_folds)
        for li in range(len(cfg.lambdas))
        for ei in range(len(cfg.epsilons))
    ]
    seeds = [c[3] for c in cells]
    if len(set(seeds)) != len(seeds):
        raise ConfigError("derived cell seeds collide; change the master seed")
    return cells


def cell_name(fold: int, li: int, ei: int) -> str:
    return f"fold{fold}_lam{li}_eps{ei}"


# ----------------------------------------------------------------------------
# generation


@torch.no_grad()
def generate(ckpt: ModelCheckpoint, count: int, seed: int) -> Dataset:
    """Sample a schema-valid synthetic table.

    Non-protected categoricals take the arg-max category; the protected attribute
    is drawn from its softmax.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    model = ckpt.model
    z = sample_latents(ckpt, count, seed).to(next(model.parameters()).dtype)
    lg = model.detokenizer(model.decode(z))
    gen = torch.Generator().manual_seed(_seed32(seed, 20))
    cat = []
    for j, logits in enumerate(lg.cat):
        if j == lg.protected_pos:
            cat.append(torch.multinomial(torch.softmax(logits.double(), dim=1), 1, generator=gen).squeeze(1))
        else:
            cat.append(logits.argmax(dim=1))
    cat_arr = torch.stack(cat, dim=1).numpy().astype(np.int64) if cat else np.zeros((count, 0), np.int64)
    enc = EncodedDataset(ckpt.schema, lg.num.double().numpy(), cat_arr, ckpt.states)
    return inverse_transform(enc)


# ----------------------------------------------------------------------------
# training a single model


def train_model(train: Dataset, cfg: RunConfig, lam: float, eps: float, seed: int) -> ModelCheckpoint:
    """Phase 1, Phase 2 and the latent diffusion model for one (lambda, epsilon) setting."""
    tcfg = replace(cfg.training, seed=seed)
    priv = cfg.privacy_spec(eps)
    ckpt = train_phase1(train, tcfg, priv)
    ckpt = train_phase2(ckpt, train, replace(cfg.fairness, lam=lam), priv=priv)
    return train_diffusion(ckpt, train, seed=seed, cfg=cfg.diffusion)


def privacy_report(ckpt: ModelCheckpoint, group_sizes) -> dict | None:
    if ckpt.privacy is None:
        return None
    return PrivacyState.from_dict(ckpt.privacy, group_sizes).report()


def check_budget(report: dict | None) -> None:
    if report is None:
        return
    if report["spent_eps"] > report["target_eps"] * (1 + 1e-9):
        raise dp.PrivacyBudgetError(
            f"spent epsilon {report['spent_eps']:.6g} exceeds target {report['target_eps']:.6g}"
        )


def _folds(d: Dataset, cfg: RunConfig):
    if cfg.folds == 1:
        # a single hold-out split: the first fold of a 3-way split
        return split_cv(d, 3, cfg.seed)[:1]
    return split_cv(d, cfg.folds, cfg.seed)


def run_cell(train: Dataset, test: Dataset, cfg: RunConfig, fold: int, li: int, ei: int, seed: int,
             cell_dir: Path) -> EvalReport:
    lam, eps = cfg.lambdas[li], cfg.epsilons[ei]
    ckpt = train_model(train, cfg, lam, eps, seed)
    ckpt.save(cell_dir / "checkpoint")
    prep = privacy_report(ckpt, train.group_sizes())
    if prep is not None:
        (cell_dir / "privacy.json").write_text(json.dumps(prep, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    check_budget(prep)
    synth = generate(ckpt, cfg.n_synth or train.n, seed)
    write_dataset(synth, cell_dir / "synthetic.csv")
    adv = AdversaryConfig(**{"seed": seed, **cfg.adversary})
    meta = {
        "fold": fold,
        "lambda": lam,
        "epsilon": _eps_json(eps),
        "cell_seed": seed,
        "master_seed": cfg.seed,
        "n_train": train.n,
        "n_test": test.n,
        "n_synth": synth.n,
        "training": asdict(ckpt.train_cfg),
        "fairness": ckpt.fair_cfg,
        "diffusion": {k: v for k, v in ckpt.diffusion_meta.items() if k != "loss_curve"},
        "privacy": prep,
    }
    return evaluate(train, test, synth, adv, cfg.k_clusters, meta)


def run_experiment(cfg: RunConfig) -> dict:
    """Train, generate and evaluate every (fold, lambda, epsilon) cell.

    Cells whose report already exists are skipped; a failing cell writes
    ``error.json`` and the sweep moves on. Returns a status map by cell name.
    """
    schema = load_schema(cfg.schema)
    d = load_dataset(cfg.data, schema)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    splits = _folds(d, cfg)
    status = {}
    for fold, li, ei, seed in cell_grid(cfg):
        name = cell_name(fold, li, ei)
        cell_dir = out / "cells" / name
        stem = cell_dir / "report"
        if stem.with_suffix(".json").exists():
            status[name] = "skipped"
            continue
        cell_dir.mkdir(parents=True, exist_ok=True)
        err = cell_dir / "error.json"
        if err.exists():
            err.unlink()
        train, test = splits[fold]
        log.info("cell %s: lambda=%s epsilon=%s seed=%d", name, cfg.lambdas[li], cfg.epsilons[ei], seed)
        try:
            report = run_cell(train, test, cfg, fold, li, ei, seed, cell_dir)
        except Exception as exc:  # recorded per cell; the sweep goes on
            kind = "privacy" if isinstance(exc, dp.PrivacyBudgetError) else "runtime"
            err.write_text(json.dumps({"kind": kind, "error": repr(exc), "traceback": traceback.format_exc()},
                                      indent=2) + "\n", encoding="utf-8")
            log.error("cell %s failed: %s", name, exc)
            status[name] = f"failed:{kind}"
            continue
        report.write(stem)
        status[name] = "done"
    return status


def evaluate_command(real_csv, synth_csv, schema_path, out_stem=None, adversary: AdversaryConfig | None = None,
                     k_clusters: int = 2) -> EvalReport:
    """Audit a synthetic table against a real one (the real table doubles as test set)."""
    if not Path(schema_path).exists():
        raise FileNotFoundError(f"schema file {schema_path} not found")
    schema = load_schema(schema_path)
    real = load_dataset(real_csv, schema)
    synth = load_dataset(synth_csv, schema)
    report = evaluate(real, real, synth, adversary, k_clusters,
                      {"real": str(real_csv), "synthetic": str(synth_csv)})
    if out_stem is not None:
        Path(out_stem).parent.mkdir(parents=True, exist_ok=True)
        report.write(out_stem)
    return report


# ----------------------------------------------------------------------------
# aggregation


def _read_reports(run_dir: Path) -> list[dict]:
    files = sorted(run_dir.glob("cells/*/report.json"))
    return [json.loads(f.read_text(encoding="utf-8")) for f in files]


def _key(v):
    return math.inf if v == "inf" else float(v)


def _label(v) -> str:
    return "inf" if v == "inf" or (isinstance(v, float) and math.isinf(v)) else repr(float(v))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _stats(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(a))
    std = float(np.std(a, ddof=1)) if a.size > 1 else 0.0
    return mean, std


def report(run_dir: str | Path) -> dict:
    """Heatmaps (lambda x epsilon, mean over folds) per metric, task-fairness bars and a summary table."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    reps = _read_reports(run_dir)
    if not reps:
        raise FileNotFoundError(f"no reports under {run_dir}")
    out = run_dir / "summary"
    out.mkdir(parents=True, exist_ok=True)
    lams = sorted({float(r["metadata"]["lambda"]) for r in reps})
    epss = sorted({r["metadata"]["epsilon"] for r in reps}, key=_key)
    by_cell: dict = {}
    for r in reps:
        key = (float(r["metadata"]["lambda"]), _label(r["metadata"]["epsilon"]))
        by_cell.setdefault(key, []).append(r)
    eps_labels = [_label(e) for e in epss]
    written = []
    for metric in METRICS:
        grid = np.full((len(lams), len(epss)), np.nan)
        rows = []
        for i, lam in enumerate(lams):
            row = [repr(lam)]
            for j, e in enumerate(eps_labels):
                vals = [r[metric] for r in by_cell.get((lam, e), [])]
                if vals:
                    grid[i, j] = _stats(vals)[0]
                row.append(float(grid[i, j]))
            rows.append(row)
        path = out / f"heatmap_{metric}.csv"
        _write_csv(path, ["lambda"] + [f"eps={e}" for e in eps_labels], rows)
        written.append(path)
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(epss), 1.0 + 0.8 * len(lams)))
        ax.imshow(grid, cmap="Greens", aspect="auto")
        ax.set_xticks(range(len(epss)), eps_labels)
        ax.set_yticks(range(len(lams)), [f"{v:g}" for v in lams])
        ax.set_xlabel("epsilon")
        ax.set_ylabel("lambda")
        ax.set_title(metric)
        for i in range(len(lams)):
            for j in range(len(epss)):
                if not np.isnan(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", fontsize=8)
        fig.tight_layout()
        fig.savefig(out / f"heatmap_{metric}.png", dpi=100)
        plt.close(fig)

    summary_rows = []
    keys = sorted(by_cell, key=lambda k: (k[0], _key(k[1])))
    for key in keys:
        group = by_cell[key]
        row = [repr(key[0]), key[1], len(group)]
        for metric in METRICS:
            row.extend(_stats([r[metric] for r in group]))
        summary_rows.append(row)
    header = ["lambda", "epsilon", "n_folds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    _write_csv(out / "summary.csv", header, summary_rows)
    written.append(out / "summary.csv")

    features = sorted({f for r in reps for f in r["task_fairness"]})
    tf_rows = []
    for key in keys:
        row = [repr(key[0]), key[1]]
        for f in features:
            vals = [r["task_fairness"][f]["value"] for r in by_cell[key] if f in r["task_fairness"]]
            row.append(_stats(vals)[0] if vals else float("nan"))
        tf_rows.append(row)
    _write_csv(out / "task_fairness.csv", ["lambda", "epsilon"] + features, tf_rows)
    written.append(out / "task_fairness.csv")
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(features)), 3))
    width = 0.8 / max(1, len(keys))
    for i, (key, row) in enumerate(zip(keys, tf_rows)):
        ax.bar(np.arange(len(features)) + i * width, row[2:], width, label=f"lambda={key[0]:g}, eps={key[1]}")
    ax.set_xticks(np.arange(len(features)) + 0.4 - width / 2, features, rotation=30, ha="right")
    ax.set_ylabel("task unfairness")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "task_fairness.png", dpi=100)
    plt.close(fig)
    return {"reports": len(reps), "files": [str(p) for p in written]}

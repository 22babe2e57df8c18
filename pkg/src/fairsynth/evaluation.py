"""Fairness, privacy and utility metrics for synthetic tables."""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .schema_io import Dataset, SchemaError, TabularSchema

log = logging.getLogger(__name__)

IDENTIFIABILITY_DEFINITION = (
    "fraction of real records whose nearest synthetic record (entropy-weighted Gower distance) "
    "is strictly closer than their nearest other real record"
)


def _binary(x, name):
    x = np.asarray(x)
    if not np.isin(x, (0, 1)).all():
        raise ValueError(f"{name} must be binary 0/1")
    return x.astype(int)


def _groups(S):
    S = _binary(S, "S")
    if not (S == 0).any() or not (S == 1).any():
        raise ValueError("both protected groups must be present")
    return S


# ----------------------------------------------------------------------------
# task-agnostic fairness


def ber(predictions, S) -> float:
    """Balanced error rate of predictions of S: mean of the two per-group error rates."""
    f = _binary(predictions, "predictions")
    S = _groups(S)
    if f.shape != S.shape:
        raise ValueError("predictions and S differ in length")
    return 0.5 * (float(np.mean(f[S == 1] == 0)) + float(np.mean(f[S == 0] == 1)))


def ncb(cluster_labels, S) -> float:
    """Normalized cluster balance: min over clusters of min(P[c|S=0]/P[c|S=1], inverse)."""
    labels = np.asarray(cluster_labels)
    S = _groups(S)
    if labels.size == 0:
        raise ValueError("empty clustering")
    if labels.shape != S.shape:
        raise ValueError("labels and S differ in length")
    worst = 1.0
    for c in np.unique(labels):
        p0 = np.mean(labels[S == 0] == c)
        p1 = np.mean(labels[S == 1] == c)
        bal = 0.0 if p0 == 0 or p1 == 0 else min(p0 / p1, p1 / p0)
        worst = min(worst, bal)
    return float(worst)


def famd_encode(num: np.ndarray, cat: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Component scores of factor analysis of mixed data (all components kept).

    Numericals are standardized; each category indicator is centered and scaled by
    1/sqrt(proportion). The combined matrix is decomposed by SVD.
    """
    num = np.asarray(num, dtype=np.float64)
    n = num.shape[0] if num.ndim == 2 else len(cat[0])
    num = num.reshape(n, -1)
    cols = []
    for j in range(num.shape[1]):
        x = num[:, j]
        sd = x.std()
        if sd == 0:
            warnings.warn(f"dropping constant numerical column {j}", RuntimeWarning, stacklevel=2)
            continue
        cols.append((x - x.mean()) / sd)
    if isinstance(cat, (list, tuple)):
        cat_cols = np.column_stack(cat) if len(cat) else np.zeros((n, 0))
    else:
        cat_cols = np.asarray(cat).reshape(n, -1)
    for j in range(cat_cols.shape[1]):
        codes = cat_cols[:, j]
        levels = np.unique(codes)
        if len(levels) < 2:
            warnings.warn(f"dropping constant categorical column {j}", RuntimeWarning, stacklevel=2)
            continue
        for lv in levels:
            ind = (codes == lv).astype(np.float64)
            p = ind.mean()
            cols.append((ind - p) / np.sqrt(p))
    if not cols:
        raise ValueError("no informative columns")
    M = np.column_stack(cols)
    if n <= M.shape[1]:
        raise ValueError("famd needs more rows than coded columns")
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    return U * s


def _predictors(d: Dataset, exclude: tuple[int, ...]):
    keep = [j for j in range(d.k) if j not in exclude]
    is_cat = np.array([d.schema.features[j].is_categorical for j in keep], dtype=bool)
    return d.X[:, keep], is_cat, keep


def famd_dataset(d: Dataset, exclude: tuple[int, ...] = ()) -> np.ndarray:
    X, is_cat, _ = _predictors(d, exclude)
    return famd_encode(X[:, ~is_cat], X[:, is_cat].astype(int))


def gmm_cluster(scores: np.ndarray, k_clusters: int = 2, seed: int = 0) -> np.ndarray:
    """Full-covariance Gaussian mixture labels, best of 5 restarts."""
    from sklearn.mixture import GaussianMixture

    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    if scores.shape[0] < k_clusters:
        raise ValueError("fewer rows than clusters")
    gm = GaussianMixture(
        n_components=k_clusters, covariance_type="full", n_init=5, random_state=seed, reg_covar=1e-6
    )
    with warnings.catch_warnings():
        # identical points trigger a convergence / fewer-clusters warning; the labels are still valid
        warnings.simplefilter("ignore")
        return gm.fit_predict(scores)


@dataclass
class AdversaryConfig:
    kind: str = "gradient_boosting"
    split: float = 0.5
    seed: int = 0
    factory: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError("split fraction must lie in (0, 1)")
        if self.factory is None and self.kind != "gradient_boosting":
            raise ValueError(f"unknown classifier kind {self.kind!r}; pass a factory")

    def classifier(self, is_cat: np.ndarray):
        if self.factory is not None:
            return self.factory()
        from sklearn.ensemble import HistGradientBoostingClassifier

        return HistGradientBoostingClassifier(
            random_state=self.seed, categorical_features=is_cat if is_cat.any() else None
        )

    def regressor(self, is_cat: np.ndarray):
        from sklearn.ensemble import HistGradientBoostingRegressor

        return HistGradientBoostingRegressor(
            random_state=self.seed, categorical_features=is_cat if is_cat.any() else None
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind if self.factory is None else "custom", "split": self.split, "seed": self.seed}


def adversary_predictions(d: Dataset, cfg: AdversaryConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fit X -> S on a random ``split`` fraction of rows; predict every row.

    Returns ``(predictions, held_out_mask)``.
    """
    S = _groups(d.S)
    X, is_cat, _ = _predictors(d, (d.schema.protected_index,))
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(d.n)
    n_train = int(round(cfg.split * d.n))
    train = np.zeros(d.n, dtype=bool)
    train[perm[:n_train]] = True
    if len(np.unique(S[train])) < 2:
        raise ValueError("adversary training split misses a group")
    clf = cfg.classifier(is_cat)
    clf.fit(X[train], S[train])
    return np.asarray(clf.predict(X)).astype(int), ~train


def adversarial_ber(d: Dataset, cfg: AdversaryConfig) -> float:
    """BER of the adversary on the rows it was not trained on."""
    pred, held = adversary_predictions(d, cfg)
    S = d.S.astype(int)
    if len(np.unique(S[held])) < 2:
        raise ValueError("held-out split misses a group")
    return ber(pred[held], S[held])


def adversarial_ncb(synth: Dataset, cfg: AdversaryConfig, k_clusters: int = 2) -> float:
    """NCB of a GMM clustering of the FAMD scores, with adversarially inferred groups."""
    if synth.n == 0:
        raise ValueError("empty table")
    pred, _ = adversary_predictions(synth, cfg)
    if len(np.unique(pred)) < 2:
        warnings.warn("adversary predicts a single group; A-NCB set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    scores = famd_dataset(synth, exclude=(synth.schema.protected_index,))
    labels = gmm_cluster(scores, k_clusters, cfg.seed)
    return ncb(labels, pred)


def plain_ncb(d: Dataset, k_clusters: int = 2, seed: int = 0) -> float:
    scores = famd_dataset(d, exclude=(d.schema.protected_index,))
    return ncb(gmm_cluster(scores, k_clusters, seed), d.S)


# ----------------------------------------------------------------------------
# privacy: Gower distance and identifiability


def _gower_setup(weights, ranges):
    w = np.asarray(weights, dtype=np.float64)
    r = np.asarray(ranges, dtype=np.float64)
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    return w, r


def _effective_weights(w, r, is_cat):
    w = np.where(~is_cat & ~(r > 0), 0.0, w)
    total = w.sum()
    if total <= 0:
        raise ValueError("no feature carries weight")
    return w / total


def gower_distance(a, b, weights, ranges, is_categorical) -> float:
    """Weighted Gower distance between two records.

    Numerical features with zero range are skipped and the weights renormalized.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    is_cat = np.asarray(is_categorical, dtype=bool)
    w, r = _gower_setup(weights, ranges)
    w = _effective_weights(w, r, is_cat)
    safe = np.where(r > 0, r, 1.0)
    d = np.where(is_cat, (a != b).astype(np.float64), np.minimum(np.abs(a - b) / safe, 1.0))
    return float(np.sum(w * d))


def gower_matrix(A, B, weights, ranges, is_categorical) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    is_cat = np.asarray(is_categorical, dtype=bool)
    w, r = _gower_setup(weights, ranges)
    w = _effective_weights(w, r, is_cat)
    safe = np.where(r > 0, r, 1.0)
    out = np.zeros((A.shape[0], B.shape[0]))
    for j in np.flatnonzero(w > 0):
        diff = A[:, j, None] - B[None, :, j]
        if is_cat[j]:
            out += w[j] * (diff != 0)
        else:
            out += w[j] * np.minimum(np.abs(diff) / safe[j], 1.0)
    return out


def entropy_weights(d: Dataset, bins: int = 20) -> np.ndarray:
    """Per-feature Shannon entropy, normalized to sum to one.

    Categoricals use category frequencies, numericals a histogram with ``bins``
    equal-width bins.
    """
    H = np.zeros(d.k)
    for j, f in enumerate(d.schema.features):
        x = d.X[:, j]
        if f.is_categorical:
            counts = np.bincount(x.astype(int), minlength=f.cardinality)
        else:
            counts, _ = np.histogram(x, bins=bins)
        p = counts[counts > 0] / counts.sum()
        H[j] = -np.sum(p * np.log(p))
    if H.sum() <= 0:
        return np.full(d.k, 1.0 / d.k)
    return H / H.sum()


def feature_ranges(d: Dataset) -> np.ndarray:
    return np.ptp(d.X, axis=0) if d.n else np.zeros(d.k)


def identifiability(real: Dataset, synth: Dataset, weights=None, chunk: int = 512) -> float:
    """Share of real rows with a synthetic nearest neighbour strictly closer than any other real row."""
    if real.n < 2:
        raise ValueError("identifiability needs at least two real rows")
    if synth.n == 0:
        raise ValueError("empty synthetic table")
    if synth.schema != real.schema:
        raise SchemaError("schemas differ")
    w = entropy_weights(real) if weights is None else np.asarray(weights, dtype=np.float64)
    r = feature_ranges(real)
    is_cat = np.array([f.is_categorical for f in real.schema.features])
    hits = 0
    for start in range(0, real.n, chunk):
        rows = real.X[start:start + chunk]
        d_real = gower_matrix(rows, real.X, w, r, is_cat)
        d_real[np.arange(len(rows)), np.arange(start, start + len(rows))] = np.inf
        d_syn = gower_matrix(rows, synth.X, w, r, is_cat)
        hits += int(np.sum(d_syn.min(axis=1) < d_real.min(axis=1)))
    return hits / real.n


# ----------------------------------------------------------------------------
# task fairness and downstream utility


def task_fairness_categorical(predictions, S, K: int) -> float:
    """max_k (P[f=k | S=1] - P[f=k | S=0])."""
    f = np.asarray(predictions).astype(int)
    S = _groups(S)
    if f.min(initial=0) < 0 or f.max(initial=0) >= K:
        raise ValueError("prediction outside 0..K-1")
    p1 = np.bincount(f[S == 1], minlength=K) / np.sum(S == 1)
    p0 = np.bincount(f[S == 0], minlength=K) / np.sum(S == 0)
    return float(np.max(p1 - p0))


def task_fairness_numerical(preds_group1, preds_group0) -> float:
    """1-D W1 by sorted-quantile matching.

    The smaller sample's quantile function is linearly interpolated at the
    plotting positions (i + 0.5)/N of the larger one; for equal sizes this is the
    mean absolute difference of sorted samples.
    """
    a = np.sort(np.asarray(preds_group1, dtype=np.float64))
    b = np.sort(np.asarray(preds_group0, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty group")
    if a.size < b.size:
        a, b = b, a
    N, M = a.size, b.size
    pa = (np.arange(N) + 0.5) / N
    pb = (np.arange(M) + 0.5) / M
    return float(np.mean(np.abs(a - np.interp(pa, pb, b))))


def downstream_parity(predictions, true_labels, S) -> tuple[float, float]:
    """(statistical parity gap, equalized odds gap) of binary predictions."""
    f = _binary(predictions, "predictions")
    y = _binary(true_labels, "labels")
    S = _groups(S)
    sp = abs(f[S == 0].mean() - f[S == 1].mean())
    gaps = []
    for label in (0, 1):
        c0 = (S == 0) & (y == label)
        c1 = (S == 1) & (y == label)
        if not c0.any() or not c1.any():
            warnings.warn(f"empty (group, label={label}) cell skipped", RuntimeWarning, stacklevel=2)
            continue
        gaps.append(abs(f[c0].mean() - f[c1].mean()))
    eo = max(gaps) if gaps else 0.0
    return float(sp), float(eo)


def _fit_predict(train: Dataset, test: Dataset, target: int, adversary: AdversaryConfig, proba=False):
    X_tr, is_cat, _ = _predictors(train, (target,))
    X_te, _, _ = _predictors(test, (target,))
    y = train.X[:, target]
    feat = train.schema.features[target]
    if feat.is_categorical:
        y = y.astype(int)
        if len(np.unique(y)) < 2:
            # a single observed class: constant predictor
            const = int(y[0])
            if proba:
                return np.full(test.n, float(const))
            return np.full(test.n, const)
        model = adversary.classifier(is_cat)
        model.fit(X_tr, y)
        if proba:
            classes = list(model.classes_)
            return model.predict_proba(X_te)[:, classes.index(1)] if 1 in classes else np.zeros(test.n)
        return np.asarray(model.predict(X_te)).astype(int)
    model = adversary.regressor(is_cat)
    model.fit(X_tr, y)
    return np.asarray(model.predict(X_te), dtype=np.float64)


def _binary_target(schema: TabularSchema) -> int:
    if schema.target is None:
        raise ValueError("schema has no target")
    t = schema.index(schema.target)
    if schema.features[t].cardinality != 2:
        raise ValueError("target must be binary")
    return t


def downstream_auc(train: Dataset, test: Dataset, target: str | None = None,
                   adversary: AdversaryConfig | None = None) -> float:
    """ROC AUC on ``test`` of a classifier trained on ``train`` (train on synthetic, test on real)."""
    from sklearn.metrics import roc_auc_score

    adversary = adversary or AdversaryConfig()
    t = train.schema.index(target) if target else _binary_target(train.schema)
    y_test = test.X[:, t].astype(int)
    if len(np.unique(y_test)) < 2:
        raise ValueError("test labels contain a single class")
    scores = _fit_predict(train, test, t, adversary, proba=True)
    return float(roc_auc_score(y_test, scores))


def feature_task_fairness(train: Dataset, test: Dataset, adversary: AdversaryConfig) -> dict:
    """Per non-protected feature: fit it from the others (S excluded) on train, score groups on test."""
    out = {}
    S = test.S.astype(int)
    p = train.schema.protected_index
    for j, f in enumerate(train.schema.features):
        if j == p:
            continue
        tr = Dataset(train.schema, train.X.copy())
        te = Dataset(test.schema, test.X.copy())
        # hide S from the predictor by making it constant
        tr.X[:, p] = 0
        te.X[:, p] = 0
        pred = _fit_predict(tr, te, j, adversary)
        if f.is_categorical:
            value = task_fairness_categorical(pred, S, f.cardinality)
        else:
            value = task_fairness_numerical(pred[S == 1], pred[S == 0])
        out[f.name] = {"value": value, "kind": f.kind}
    return out


# ----------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    ber: float
    ncb: float
    a_ncb: float
    identifiability: float
    downstream_auc: float
    statistical_parity: float
    equalized_odds: float
    task_fairness: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ber", "ncb", "a_ncb", "identifiability", "statistical_parity", "equalized_odds"):
            v = getattr(self, name)
            if not (np.isnan(v) or 0 <= v <= 1):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def flat_row(self) -> dict:
        row = {}
        for key in ("fold", "lambda", "epsilon", "dataset"):
            if key in self.metadata:
                row[key] = self.metadata[key]
        for key in ("ber", "ncb", "a_ncb", "identifiability", "downstream_auc", "statistical_parity", "equalized_odds"):
            row[key] = getattr(self, key)
        for name in sorted(self.task_fairness):
            row[f"task_fairness.{name}"] = self.task_fairness[name]["value"]
        return row

    def to_csv(self) -> str:
        row = self.flat_row()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()

    def write(self, stem) -> None:
        from pathlib import Path

        stem = Path(stem)
        stem.with_suffix(".json").write_text(self.to_json() + "\n", encoding="utf-8")
        stem.with_suffix(".csv").write_text(self.to_csv(), encoding="utf-8")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def evaluate(real_train: Dataset, real_test: Dataset, synth: Dataset,
             adversary: AdversaryConfig | None = None, k_clusters: int = 2,
             metadata: dict | None = None) -> EvalReport:
    """All metrics for one synthetic table.

    BER, NCB and A-NCB are computed on ``synth``; identifiability compares ``synth``
    with ``real_train``; downstream scores train on ``synth`` and test on ``real_test``.
    """
    adversary = adversary or AdversaryConfig()
    for other in (real_test, synth):
        if other.schema != real_train.schema:
            raise SchemaError("schemas differ")
    t = _binary_target(synth.schema)
    b = adversarial_ber(synth, adversary)
    plain = plain_ncb(synth, k_clusters, adversary.seed)
    a = adversarial_ncb(synth, adversary, k_clusters)
    ident = identifiability(real_train, synth)
    auc = downstream_auc(synth, real_test, None, adversary)
    pred = _fit_predict(synth, real_test, t, adversary)
    sp, eo = downstream_parity(pred, real_test.X[:, t].astype(int), real_test.S.astype(int))
    tf = feature_task_fairness(synth, real_test, adversary)
    meta = {
        "adversary": adversary.to_dict(),
        "k_clusters": k_clusters,
        "identifiability_definition": IDENTIFIABILITY_DEFINITION,
        **(metadata or {}),
    }
    return EvalReport(b, plain, a, ident, auc, sp, eo, tf, meta)

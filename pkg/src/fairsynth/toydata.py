"""Constructed datasets with a known dependence on the protected attribute."""
from __future__ import annotations

import numpy as np

from .schema_io import CATEGORICAL, NUMERICAL, Dataset, Feature, TabularSchema


def biased_schema() -> TabularSchema:
    return TabularSchema(
        (
            Feature("age", NUMERICAL),
            Feature("hours", NUMERICAL),
            Feature("occupation", CATEGORICAL, ("clerical", "craft", "managerial")),
            Feature("income", CATEGORICAL, ("low", "high")),
            Feature("sex", CATEGORICAL, ("female", "male")),
        ),
        protected="sex",
        target="income",
    )


def make_biased_dataset(n: int = 5000, seed: int = 0, p_group1: float = 0.65, strength: float = 1.0) -> Dataset:
    """Two numericals and two categoricals that all shift with the protected group.

    ``strength`` scales every group effect; 0 gives a table independent of S.
    """
    rng = np.random.default_rng(seed)
    s = (rng.random(n) < p_group1).astype(np.float64)
    age = 38 + 6 * strength * s + 9 * rng.standard_normal(n)
    hours = 36 + 7 * strength * s + 0.15 * (age - 38) + 6 * rng.standard_normal(n)
    occ_logits = np.stack([np.zeros(n), 0.4 + 1.4 * strength * s, -0.3 + 1.0 * strength * s], axis=1)
    occ_logits += 0.03 * (age - 38)[:, None] * np.array([0.0, 0.0, 1.0])
    occ_p = np.exp(occ_logits - occ_logits.max(1, keepdims=True))
    occ_p /= occ_p.sum(1, keepdims=True)
    occ = (rng.random(n)[:, None] > np.cumsum(occ_p, axis=1)).sum(1).astype(np.float64)
    inc_logit = -1.6 + 1.5 * strength * s + 0.05 * (hours - 40) + 0.8 * (occ == 2)
    income = (rng.random(n) < 1 / (1 + np.exp(-inc_logit))).astype(np.float64)
    X = np.column_stack([np.round(age, 1), np.round(hours, 1), occ, income, s])
    return Dataset(biased_schema(), X)

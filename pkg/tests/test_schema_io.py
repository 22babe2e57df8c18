import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtri

from fairsynth.schema_io import (
    CATEGORICAL,
    NUMERICAL,
    Dataset,
    Feature,
    QuantileState,
    SchemaError,
    TabularSchema,
    fit_transform,
    inverse_transform,
    load_dataset,
    load_schema,
    save_schema,
    split_cv,
    transform,
    write_dataset,
)
from fairsynth.toydata import biased_schema, make_biased_dataset


def small_schema():
    return TabularSchema(
        (
            Feature("x", NUMERICAL),
            Feature("color", CATEGORICAL, ("a", "b")),
            Feature("g", CATEGORICAL, ("f", "m")),
        ),
        protected="g",
    )


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# ---------------------------------------------------------------------------
# schema


@pytest.mark.parametrize(
    "features,protected,target,match",
    [
        ((Feature("a", NUMERICAL), Feature("a", NUMERICAL)), "a", None, "unique"),
        ((Feature("a", NUMERICAL),), "b", None, "protected"),
        ((Feature("a", NUMERICAL),), "a", None, "exactly 2"),
        ((Feature("s", CATEGORICAL, ("0", "1", "2")),), "s", None, "exactly 2"),
        ((Feature("s", CATEGORICAL, ("0", "1")), Feature("c", CATEGORICAL, ("x",))), "s", None, ">= 2"),
        ((Feature("s", CATEGORICAL, ("0", "1")),), "s", "s", "differ"),
        ((Feature("s", CATEGORICAL, ("0", "1")),), "s", "y", "target"),
    ],
)
def test_schema_invariants(features, protected, target, match):
    with pytest.raises(SchemaError, match=match):
        TabularSchema(features, protected, target)


def test_schema_roundtrip(tmp_path):
    s = biased_schema()
    save_schema(s, tmp_path / "s.json")
    assert load_schema(tmp_path / "s.json") == s
    assert json.loads((tmp_path / "s.json").read_text())["protected"] == "sex"
    with pytest.raises(FileNotFoundError):
        load_schema(tmp_path / "missing.json")


# ---------------------------------------------------------------------------
# loading


def test_load_counts_and_indices(tmp_path):
    p = write(tmp_path, "x,color,g\n1.5,a,f\n2,b,m\n-3,a,m\n")
    d = load_dataset(p, small_schema())
    assert (d.n, d.k) == (3, 3)
    assert d.column("color").tolist() == [0, 1, 0]
    assert d.S.tolist() == [0, 1, 1]
    assert sum(d.group_sizes()) == d.n


def test_load_empty_file_with_header(tmp_path):
    d = load_dataset(write(tmp_path, "x,color,g\n"), small_schema())
    assert d.n == 0
    with pytest.raises(SchemaError):
        fit_transform(d)


@pytest.mark.parametrize(
    "text,match",
    [
        ("x,colour,g\n1,a,f\n", "header"),
        ("x,color,g\n1,c,f\n", "unknown category"),
        ("x,color,g\nabc,a,f\n", "non-numeric"),
        ("x,color,g\n1,,f\n", "missing"),
        ("x,color,g\n1,a\n", "expected 3"),
        ("x,color,g\nnan,a,f\n", "non-finite"),
    ],
)
def test_load_rejects_violations(tmp_path, text, match):
    with pytest.raises(SchemaError, match=match):
        load_dataset(write(tmp_path, text), small_schema())


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.csv", small_schema())


def test_write_load_roundtrip(tmp_path):
    d = make_biased_dataset(200, seed=3)
    write_dataset(d, tmp_path / "a.csv")
    again = load_dataset(tmp_path / "a.csv", d.schema)
    assert again == d
    write_dataset(again, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_dataset_rejects_bad_cells():
    with pytest.raises(SchemaError):
        Dataset(small_schema(), np.array([[0.0, 2.0, 0.0]]))
    with pytest.raises(SchemaError):
        Dataset(small_schema(), np.array([[np.nan, 0.0, 0.0]]))


# ---------------------------------------------------------------------------
# CV split


def _nine():
    S = np.array([0] * 6 + [1] * 3)
    X = np.column_stack([np.arange(9.0), np.zeros(9), S])
    return Dataset(small_schema(), X)


def test_split_partition_and_stratification():
    d = _nine()
    splits = split_cv(d, 3, seed=0)
    seen = []
    for train, test in splits:
        assert test.n == 3 and train.n == 6
        # exhaustive: every test fold has exactly two zeros and one one
        assert sorted(test.S.tolist()) == [0, 0, 1]
        seen.extend(test.column("x").tolist())
        assert set(train.column("x")) | set(test.column("x")) == set(range(9))
    assert sorted(seen) == list(range(9))


def test_split_deterministic_and_errors():
    d = _nine()
    a = split_cv(d, 3, 5)
    b = split_cv(d, 3, 5)
    assert all(x[1] == y[1] for x, y in zip(a, b))
    with pytest.raises(ValueError):
        split_cv(d, 10, 0)
    with pytest.raises(ValueError):
        split_cv(d, 1, 0)


@settings(max_examples=50, deadline=None)
@given(n0=st.integers(1, 40), n1=st.integers(1, 40), folds=st.integers(2, 5), seed=st.integers(0, 1000))
def test_split_stratified_property(n0, n1, folds, seed):
    n = n0 + n1
    if folds > n:
        return
    S = np.array([0] * n0 + [1] * n1)
    d = Dataset(small_schema(), np.column_stack([np.arange(float(n)), np.zeros(n), S]))
    sizes = []
    for _, test in split_cv(d, folds, seed):
        sizes.append(test.n)
        for s, ns in ((0, n0), (1, n1)):
            assert abs(np.sum(test.S == s) - ns / folds) <= 1
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == n


# ---------------------------------------------------------------------------
# encoding


def test_quantile_transform_median_maps_to_zero():
    st_ = QuantileState.fit(np.array([1.0, 2, 3, 4, 5]))
    z = st_.forward(np.array([1.0, 2, 3, 4, 5]))
    # independent oracle: mid-rank positions (r - 0.5)/n through the normal quantile
    np.testing.assert_allclose(z, ndtri((np.arange(1, 6) - 0.5) / 5), atol=1e-15)
    assert abs(z[2]) < 1e-15


def test_quantile_constant_column_rejected():
    d = Dataset(small_schema(), np.array([[1.0, 0, 0], [1.0, 1, 1]]))
    with pytest.raises(SchemaError, match="zero spread"):
        fit_transform(d)


def test_categorical_indices_pass_through():
    d = Dataset(small_schema(), np.array([[0.1, 0, 0], [0.2, 1, 1], [0.3, 0, 1]]))
    e = fit_transform(d)
    assert e.cat[:, 0].tolist() == [0, 1, 0]


def test_encode_roundtrip():
    d = make_biased_dataset(500, seed=1)
    e = fit_transform(d)
    back = inverse_transform(e)
    for j in d.schema.categorical_indices:
        assert np.array_equal(back.X[:, j], d.X[:, j])
    np.testing.assert_allclose(back.X, d.X, rtol=1e-9)


def test_inverse_clamps_and_is_rowwise():
    d = make_biased_dataset(300, seed=2)
    e = fit_transform(d)
    lo, hi = d.column("age").min(), d.column("age").max()
    e.num[0, 0] = 50.0
    e.num[1, 0] = -50.0
    out = inverse_transform(e)
    assert out.column("age")[0] == hi and out.column("age")[1] == lo
    perm = np.random.default_rng(0).permutation(d.n)
    assert inverse_transform(e.subset(perm)) == out.subset(perm)


def test_inverse_rejects_bad_index_and_missing_state():
    d = make_biased_dataset(50, seed=0)
    e = fit_transform(d)
    e.cat[0, 0] = 7
    with pytest.raises(SchemaError):
        inverse_transform(e)
    e2 = fit_transform(d)
    e2.states = []
    with pytest.raises(SchemaError):
        inverse_transform(e2)


def test_transform_with_stored_states_matches():
    d = make_biased_dataset(100, seed=4)
    e = fit_transform(d)
    again = transform(d, e.states)
    np.testing.assert_array_equal(e.num, again.num)

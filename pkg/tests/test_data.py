import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmmscore.data import (
    DataValidationError,
    ParamVector,
    cluster_views,
    from_arrays,
    validate_dataset,
    variance_names,
    variance_structure,
)


def sleep_rows():
    rows = {"subject": [], "days": [], "rt": [], "ca": []}
    for s in range(18):
        for d in range(10):
            rows["subject"].append(f"S{300 + s}")
            rows["days"].append(d)
            rows["rt"].append(250.0 + 10 * d + s)
            rows["ca"].append(1 + s % 4)
    return rows


def test_sleepstudy_shape():
    data = validate_dataset(sleep_rows(), "rt", ["1", "days"], ["1", "days"], "subject", aux="ca")
    assert data.J == 18
    assert np.all(data.sizes == 10)
    assert (data.p, data.q, data.K) == (2, 2, 4)
    assert data.param_names == ["beta0", "beta1", "sigma0^2", "sigma01", "sigma1^2", "sigma_r^2"]
    assert data.labels[0] == "S300"
    assert data.aux.tolist() == [1 + s % 4 for s in range(18)]


def test_minimal_intercept_model():
    raw = {"y": [1, 2, 3, 4], "g": ["a", "a", "b", "b"]}
    data = validate_dataset(raw, "y", ["1"], ["1"], "g")
    assert (data.p, data.q, data.J, data.K) == (1, 1, 2, 2)


def test_conflicting_aux_rejected():
    raw = {"y": [1, 2, 3, 4], "g": ["a", "a", "b", "b"], "t": [1, 2, 3, 3]}
    with pytest.raises(DataValidationError, match="row 2"):
        validate_dataset(raw, "y", ["1"], ["1"], "g", aux="t")


@pytest.mark.parametrize(
    "raw, message",
    [
        ({"y": [1, "x", 3], "g": [1, 1, 2]}, "non-numeric"),
        ({"y": [1, 2, 3], "g": [1, 1, 1]}, "at least 2 clusters"),
        ({"y": [1, 2, 3, 4], "x": [1, 1, 1, 1], "g": [1, 1, 2, 2]}, "rank deficient"),
    ],
)
def test_validation_errors(raw, message):
    fixed = ["1", "x"] if "x" in raw else ["1"]
    with pytest.raises(DataValidationError, match=message):
        validate_dataset(raw, "y", fixed, ["1"], "g")


def test_first_appearance_order_and_grouping():
    raw = {"y": [1, 2, 3, 4, 5], "g": ["b", "a", "b", "c", "a"]}
    data = validate_dataset(raw, "y", ["1"], ["1"], "g")
    assert data.labels == ("b", "a", "c")
    assert data.y.tolist() == [1, 3, 2, 5, 4]
    assert data.sizes.tolist() == [2, 2, 1]


def test_cluster_views_partition():
    y = np.arange(5.0)
    data = from_arrays(y, np.ones((5, 1)), np.ones((5, 1)), [0, 0, 0, 1, 1])
    views = cluster_views(data)
    assert [len(v[0]) for v in views] == [3, 2]
    np.testing.assert_array_equal(np.concatenate([v[0] for v in views]), data.y)
    np.testing.assert_array_equal(np.vstack([v[1] for v in views]), data.X)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=3, max_size=40))
def test_partition_property(labels):
    if len(set(labels)) < 2:
        labels = labels + [max(labels) + 1]
    n = len(labels)
    data = from_arrays(np.arange(n, dtype=float), np.ones((n, 1)), np.ones((n, 1)), labels)
    views = cluster_views(data)
    assert sum(len(v[0]) for v in views) == n
    assert sorted(np.concatenate([v[0] for v in views]).tolist()) == list(range(n))
    assert all(len(v[0]) > 0 for v in views)
    # bucketed rows cover every row exactly once
    rows = np.concatenate([b.rows for b in data.buckets])
    assert sorted(rows.tolist()) == list(range(n))


def test_canonical_variance_order():
    assert variance_structure(2) == ((0, 0), (1, 0), (1, 1))
    assert variance_names(2) == ["sigma0^2", "sigma01", "sigma1^2", "sigma_r^2"]
    assert variance_structure(2, diagonal=True) == ((0, 0), (1, 1))
    p = ParamVector([1, 2], [[4, 1], [1, 9]], 3.0)
    np.testing.assert_array_equal(p.sigma2, [4, 1, 9, 3])
    back = ParamVector.from_xi(p.xi, 2, 2)
    np.testing.assert_array_equal(back.D, p.D)


def test_param_vector_rejects_nonpositive_residual():
    with pytest.raises(ValueError):
        ParamVector([0.0], [[1.0]], 0.0)

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rdlearn.errors import DegenerateInputError, ShapeError
from rdlearn.rdm import (
    METRICS,
    Rdm,
    compute_rdm,
    export_rdm,
    from_upper,
    pairwise_grad,
    rdm_distance,
    read_rdm_csv,
    upper_triangle,
)

from conftest import central_diff, rel_err


# scalar oracles, written independently of the vectorised code
def _d_scalar(a, b, metric):
    a, b = list(map(float, a)), list(map(float, b))
    k = len(a)
    sq = sum((x - y) ** 2 for x, y in zip(a, b))
    if metric == "SquaredEuclidean":
        return sq
    if metric == "MeanSquaredError":
        return sq / k
    if metric == "Euclidean":
        return math.sqrt(sq)
    ma, mb = sum(a) / k, sum(b) / k
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return 1.0 - cov / math.sqrt(va * vb)


def _pearson_scalar(u, v):
    n = len(u)
    mu, mv = sum(u) / n, sum(v) / n
    cov = sum((a - mu) * (b - mv) for a, b in zip(u, v))
    return cov / math.sqrt(sum((a - mu) ** 2 for a in u) * sum((b - mv) ** 2 for b in v))


def test_identical_rows_give_zero_rdm():
    for metric in ("MeanSquaredError", "SquaredEuclidean", "Euclidean"):
        np.testing.assert_array_equal(compute_rdm(np.ones((2, 3)), metric).values, np.zeros((2, 2)))
    x = np.array([[1.0, 2.0, 4.0], [1.0, 2.0, 4.0]])
    np.testing.assert_allclose(compute_rdm(x, "Correlation").values, np.zeros((2, 2)), atol=1e-15)


def test_mse_two_rows():
    r = compute_rdm(np.array([[0.0, 0.0], [2.0, 2.0]]), "MeanSquaredError")
    np.testing.assert_array_equal(r.values, [[0.0, 4.0], [4.0, 0.0]])


@pytest.mark.parametrize("metric", METRICS)
def test_compute_rdm_matches_brute_force(metric, rng):
    x = rng.standard_normal((5, 7))
    r = compute_rdm(x, metric)
    for i in range(5):
        for j in range(5):
            expected = 0.0 if i == j else _d_scalar(x[i], x[j], metric)
            assert abs(r.values[i, j] - expected) < 1e-12


def test_compute_rdm_flattens_features(rng):
    x = rng.standard_normal((4, 2, 3, 3))
    np.testing.assert_array_equal(compute_rdm(x).values, compute_rdm(x.reshape(4, -1)).values)


def test_compute_rdm_errors():
    with pytest.raises(ShapeError):
        compute_rdm(np.ones((1, 3)))
    with pytest.raises(DegenerateInputError):
        compute_rdm(np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]), "Correlation")
    with pytest.raises(ValueError):
        compute_rdm(np.ones((2, 2)), "Cosine")


def test_rdm_distance_examples(rng):
    a = compute_rdm(rng.standard_normal((6, 4)))
    assert abs(rdm_distance(a, a, "correlation")) < 1e-15
    b = Rdm(2 * a.values, a.metric)
    assert abs(rdm_distance(a, b, "correlation")) < 1e-12
    assert abs(rdm_distance(a, b, "normalized_euclidean")) < 1e-12

    c = compute_rdm(rng.standard_normal((6, 4)))
    u, v = list(a.upper()), list(c.upper())
    assert abs(rdm_distance(a, c, "correlation") - (1.0 - _pearson_scalar(u, v))) < 1e-12
    nu, nv = math.sqrt(sum(t * t for t in u)), math.sqrt(sum(t * t for t in v))
    ne = math.sqrt(sum((p / nu - q / nv) ** 2 for p, q in zip(u, v)))
    assert abs(rdm_distance(a, c, "normalized_euclidean") - ne) < 1e-12


def test_rdm_distance_errors(rng):
    const = Rdm(np.ones((3, 3)) - np.eye(3), "MeanSquaredError")
    other = compute_rdm(rng.standard_normal((3, 2)))
    with pytest.raises(DegenerateInputError):
        rdm_distance(const, other, "correlation")
    with pytest.raises(ShapeError):
        rdm_distance(other, compute_rdm(rng.standard_normal((4, 2))))


def test_upper_triangle_round_trip(rng):
    m = compute_rdm(rng.standard_normal((6, 3))).values
    np.testing.assert_array_equal(from_upper(upper_triangle(m), 6), m)


@pytest.mark.parametrize("metric", METRICS)
def test_pairwise_grad_matches_finite_differences(metric, rng):
    x = rng.standard_normal((5, 4))
    w = rng.standard_normal((5, 5))
    w = w + w.T
    np.fill_diagonal(w, 0)

    def f():
        return float(np.sum(np.triu(w * compute_rdm(x, metric).values, 1)))

    num = central_diff(f, x)
    assert rel_err(pairwise_grad(x, w, metric).ravel(), num, floor=1e-6).max() < 1e-6


def test_export_files(tmp_path, rng):
    r = compute_rdm(rng.standard_normal((4, 3)), "Euclidean", labels=[0, 1, 1, 2])
    paths = export_rdm(r, tmp_path / "r", title="pool1")
    assert sorted(p.suffix for p in paths) == [".csv", ".json", ".svg"]
    back = read_rdm_csv(tmp_path / "r.csv", "Euclidean")
    assert back.values.tobytes() == r.values.tobytes()
    side = json.loads((tmp_path / "r.json").read_text())
    assert side == {"n": 4, "metric": "Euclidean", "labels": [0, 1, 1, 2]}
    svg = (tmp_path / "r.svg").read_text()
    assert svg.startswith("<svg") and "rgb(0,0,0)" in svg and "rgb(255,255,255)" in svg


# ---------------------------------------------------------------------------
# properties

acts = st.integers(2, 7).flatmap(
    lambda n: st.integers(1, 6).flatmap(
        lambda k: arrays(np.float64, (n, k), elements=st.floats(-100, 100, allow_nan=False, width=64))
    )
)


@settings(max_examples=200, deadline=None)
@given(acts, st.sampled_from(["MeanSquaredError", "SquaredEuclidean", "Euclidean"]))
def test_rdm_is_symmetric_nonnegative_zero_diagonal(x, metric):
    v = compute_rdm(x, metric).values
    assert np.array_equal(v, v.T)
    assert not np.diag(v).any()
    assert (v >= 0).all()


@settings(max_examples=200, deadline=None)
@given(acts, st.randoms(use_true_random=False))
def test_feature_permutation_invariance(x, rnd):
    cols = list(range(x.shape[1]))
    rnd.shuffle(cols)
    for metric in ("MeanSquaredError", "SquaredEuclidean"):
        np.testing.assert_allclose(compute_rdm(x[:, cols], metric).values, compute_rdm(x, metric).values,
                                   rtol=1e-9, atol=1e-9 * max(1.0, np.abs(x).max() ** 2))


@settings(max_examples=200, deadline=None)
@given(acts, st.randoms(use_true_random=False))
def test_input_permutation_conjugates(x, rnd):
    perm = list(range(x.shape[0]))
    rnd.shuffle(perm)
    v = compute_rdm(x).values
    np.testing.assert_allclose(compute_rdm(x[perm]).values, v[np.ix_(perm, perm)],
                               rtol=1e-9, atol=1e-9 * max(1.0, np.abs(x).max() ** 2))


@settings(max_examples=200, deadline=None)
@given(acts)
def test_mse_is_squared_euclidean_over_k(x):
    k = x.shape[1]
    np.testing.assert_allclose(compute_rdm(x, "MeanSquaredError").values,
                               compute_rdm(x, "SquaredEuclidean").values / k, rtol=1e-12, atol=1e-300)


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 8).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, 3), elements=st.floats(-10, 10, width=64)),
    arrays(np.float64, (n, 3), elements=st.floats(-10, 10, width=64)))))
def test_rdm_distance_symmetric(pair):
    a, b = compute_rdm(pair[0]), compute_rdm(pair[1])
    for method in ("correlation", "normalized_euclidean"):
        try:
            ab = rdm_distance(a, b, method)
        except DegenerateInputError:
            continue
        assert ab == pytest.approx(rdm_distance(b, a, method), abs=1e-12)
        assert rdm_distance(a, a, method) == pytest.approx(0.0, abs=1e-12)
        if method == "correlation":
            assert -1e-12 <= ab <= 2 + 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-10, 10, width=64)))
def test_correlation_distance_in_range(x):
    try:
        v = compute_rdm(x, "Correlation").values
    except DegenerateInputError:
        return
    assert (v >= -1e-12).all() and (v <= 2 + 1e-12).all()

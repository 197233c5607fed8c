import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hvlad.errors import ShapeMismatch
from hvlad.nn import grad_check
from hvlad.nn.layers import LayerParams
from hvlad.vlad import (
    NetVLAD,
    VladParams,
    kmeans,
    netvlad_aggregate,
    netvlad_backward,
    netvlad_forward,
    soft_assign,
    vlad_hard_oracle,
    vlad_soft_oracle,
)


def random_params(rng, K, D):
    return VladParams(rng.standard_normal((K, D)), rng.standard_normal((K, D)), rng.standard_normal(K))


def test_soft_assign_uniform_and_saturated(rng):
    X = rng.standard_normal((4, 3))
    A = soft_assign(X, np.zeros((5, 3)), np.zeros(5))
    np.testing.assert_allclose(A, 0.2)
    b = np.zeros(5)
    b[0] = 1000.0
    A = soft_assign(X, np.zeros((5, 3)), b)
    np.testing.assert_allclose(A, np.eye(5)[[0, 0, 0, 0]], atol=1e-12)


def test_soft_assign_scalar_oracle(rng):
    X = rng.standard_normal((3, 2))
    W, b = rng.standard_normal((2, 2)), rng.standard_normal(2)
    A = soft_assign(X, W, b)
    for i in range(3):
        s = [W[k, 0] * X[i, 0] + W[k, 1] * X[i, 1] + b[k] for k in range(2)]
        e = [np.exp(v) for v in s]
        for k in range(2):
            assert abs(A[i, k] - e[k] / sum(e)) < 1e-7


def test_soft_assign_rows_sum_to_one(rng):
    A = soft_assign(rng.standard_normal((20, 4)) * 5, rng.standard_normal((6, 4)), rng.standard_normal(6))
    np.testing.assert_allclose(A.sum(axis=1), 1, atol=1e-6)
    assert np.all(A > 0)


def test_soft_assign_shape_error(rng):
    with pytest.raises(ShapeMismatch):
        soft_assign(rng.standard_normal((3, 2)), np.zeros((2, 3)), np.zeros(2))


def test_zero_residual_row():
    c = np.array([[1.0, 2.0], [-1.0, 0.5]])
    p = VladParams(c, np.zeros((2, 2)), np.array([1000.0, 0.0]))
    _, cache = netvlad_forward(c[:1], p)
    V = cache[3][0]
    np.testing.assert_allclose(V[0], 0, atol=1e-12)


def test_output_is_unit_norm(rng):
    for _ in range(10):
        X = rng.standard_normal((7, 3))
        v = netvlad_aggregate(X, random_params(rng, 4, 3))
        assert abs(np.linalg.norm(v) - 1) < 1e-6


def test_matches_loop_oracle_small_case(rng):
    X = rng.standard_normal((3, 2))
    p = random_params(rng, 2, 2)
    np.testing.assert_allclose(netvlad_aggregate(X, p), vlad_soft_oracle(X, p), atol=1e-6)
    np.testing.assert_allclose(netvlad_aggregate(X, p, intra_norm=False),
                               vlad_soft_oracle(X, p, intra_norm=False), atol=1e-6)


def test_batched_equals_single(rng):
    X = rng.standard_normal((3, 5, 4))
    p = random_params(rng, 3, 4)
    batched = netvlad_aggregate(X, p)
    for b in range(3):
        np.testing.assert_allclose(batched[b], netvlad_aggregate(X[b], p), atol=1e-14)


def test_literal_mode_is_unweighted_sum(rng):
    X = rng.standard_normal((4, 3))
    p = random_params(rng, 2, 3)
    V = X.sum(axis=0)[None] - 4 * p.centroids
    v = netvlad_aggregate(X, p, intra_norm=False, literal=True)
    np.testing.assert_allclose(v, V.ravel() / np.linalg.norm(V), atol=1e-12)


def test_hard_oracle_examples():
    c = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert not vlad_hard_oracle(c.copy(), c).any()
    v = vlad_hard_oracle(np.array([[0.2, -0.1]]), c).reshape(2, 2)
    assert v[0].any() and not v[1].any()


def test_hard_oracle_ties_go_to_lowest_index():
    c = np.array([[1.0], [-1.0]])
    v = vlad_hard_oracle(np.array([[0.0]]), c).reshape(2, 1)
    assert v[0, 0] != 0 and v[1, 0] == 0


def test_soft_to_hard_limit(rng):
    X = rng.standard_normal((6, 3))
    c = rng.standard_normal((4, 3))
    for intra in (True, False):
        v = netvlad_aggregate(X, VladParams.from_centroids(c, 1e4), intra_norm=intra)
        assert np.abs(v - vlad_hard_oracle(X, c, intra_norm=intra)).max() < 1e-3


def test_shape_errors(rng):
    p = random_params(rng, 3, 4)
    with pytest.raises(ShapeMismatch):
        netvlad_aggregate(rng.standard_normal((5, 3)), p)
    with pytest.raises(ShapeMismatch):
        netvlad_aggregate(np.zeros((0, 4)), p)
    with pytest.raises(ShapeMismatch):
        VladParams(np.zeros((3, 4)), np.zeros((2, 4)), np.zeros(3)).validate()
    with pytest.raises(ShapeMismatch):
        vlad_hard_oracle(np.zeros((2, 3)), np.zeros((2, 4)))


def _grad_case(rng, N, D, K, intra):
    B = rng.integers(1, 3)
    X = rng.standard_normal((B, N, D))
    p = random_params(rng, K, D)
    G = rng.standard_normal((B, K * D))
    _, cache = netvlad_forward(X, p, intra_norm=intra)
    dX, dc, dW, db = netvlad_backward(G, cache)

    def fn():
        return float((netvlad_forward(X, p, intra_norm=intra)[0] * G).sum())

    return fn, {"X": X, "c": p.centroids, "W": p.W_a, "b": p.b_a}, {"X": dX, "c": dc, "W": dW, "b": db}


@pytest.mark.parametrize("intra", [True, False])
def test_gradients_pass_grad_check(intra):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        N, D, K = rng.integers(2, 6), rng.integers(2, 5), rng.integers(2, 5)
        worst = max(worst, grad_check(*_grad_case(rng, N, D, K, intra)))
    assert worst < 1e-4


@pytest.mark.parametrize("N,D", [(1, 3), (1, 1), (4, 1)])
def test_gradients_single_descriptor_or_dimension(N, D):
    # Intra-normalized rows reduce to r/|r| (or a sign), independent of the
    # assignment weights: their true gradient is O(eps) and finite differences
    # only see rounding, so check those exactly small instead.
    rng = np.random.default_rng(5)
    for _ in range(10):
        fn, params, grads = _grad_case(rng, N, D, 3, True)
        assert np.abs(grads["W"]).max() < 1e-6 and np.abs(grads["b"]).max() < 1e-6
        if D == 1:
            # each row is a sign: nothing has a usable gradient
            assert np.abs(grads["X"]).max() < 1e-6 and np.abs(grads["c"]).max() < 1e-6
        else:
            assert grad_check(fn, {"X": params["X"], "c": params["c"]}, grads) < 1e-4


def test_kmeans_recovers_separated_clusters(rng):
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    X = np.concatenate([m + 0.1 * rng.standard_normal((30, 2)) for m in centers])
    c = kmeans(X, 3, rng=np.random.default_rng(0))
    found = sorted(map(tuple, np.round(c)))
    assert found == sorted(map(tuple, centers))


def test_netvlad_layer_round_trip(rng):
    store = LayerParams(np.float64)
    layer = NetVLAD(store, "vlad0", 3, 4, rng)
    x = rng.standard_normal((2, 4, 1, 6))
    v = layer.forward(x, train=True)
    assert v.shape == (2, 12)
    dx = layer.backward(np.ones_like(v))
    assert dx.shape == x.shape
    assert {"vlad0.centroids", "vlad0.W_a", "vlad0.b_a"} <= set(store.grads)
    with pytest.raises(ShapeMismatch):
        layer.forward(rng.standard_normal((2, 4, 2, 6)))


descriptors = hnp.arrays(np.float64, st.tuples(st.integers(1, 8), st.just(3)),
                         elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(X=descriptors, seed=st.integers(0, 2**16))
def test_permutation_invariance(X, seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 4, 3)
    perm = rng.permutation(len(X))
    np.testing.assert_allclose(netvlad_aggregate(X[perm], p), netvlad_aggregate(X, p), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(X=descriptors, seed=st.integers(0, 2**16))
def test_norm_is_one_or_zero(X, seed):
    p = random_params(np.random.default_rng(seed), 3, 3)
    n = np.linalg.norm(netvlad_aggregate(X, p))
    assert abs(n - 1) < 1e-6 or n < 1e-6

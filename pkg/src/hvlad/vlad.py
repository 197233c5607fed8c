"""NetVLAD aggregation of temporal descriptors.

Residuals between descriptors and cluster centroids are summed per cluster,
weighted by a softmax assignment over affine scores, then L2-normalized per
cluster (intra-normalization) and globally. The hard-assignment routine is
the textbook VLAD written with explicit loops; it exists to check the
vectorized soft version in its saturated limit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .nn.functional import check_finite, softmax
from .nn.layers import Layer

EPS = 1e-12


@dataclass
class VladParams:
    centroids: np.ndarray  # [K, D]
    W_a: np.ndarray        # [K, D]
    b_a: np.ndarray        # [K]

    @property
    def K(self):
        return self.centroids.shape[0]

    @property
    def D(self):
        return self.centroids.shape[1]

    def validate(self):
        K, D = self.centroids.shape
        if K < 2 or D < 1:
            raise ShapeMismatch(f"need K >= 2 and D >= 1, got K={K}, D={D}")
        if self.W_a.shape != (K, D) or self.b_a.shape != (K,):
            raise ShapeMismatch(f"W_a {self.W_a.shape} / b_a {self.b_a.shape} do not match K={K}, D={D}")

    @classmethod
    def from_centroids(cls, centroids, sharpness=1.0):
        """Assignment weights that make the softmax favor the nearest centroid."""
        c = np.asarray(centroids)
        return cls(c.copy(), 2.0 * sharpness * c, -sharpness * (c * c).sum(axis=1))


def _check(X, params: VladParams):
    params.validate()
    if X.ndim < 2 or X.shape[-1] != params.D or X.shape[-2] < 1:
        raise ShapeMismatch(f"descriptors {X.shape} do not match D={params.D}")


def soft_assign(X, W_a, b_a):
    """Softmax cluster memberships, shape ``[..., N, K]``."""
    if X.shape[-1] != W_a.shape[1] or b_a.shape != (W_a.shape[0],):
        raise ShapeMismatch(f"X {X.shape}, W_a {W_a.shape}, b_a {b_a.shape}")
    return softmax(X @ W_a.T + b_a, axis=-1)


def _l2_normalize(x, axis):
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    return x / (norm + EPS), norm


def _l2_normalize_backward(dy, x, norm):
    # written with unit vectors only, so nearly empty clusters cannot underflow in float32
    denom = norm + EPS
    y = x / denom
    u = x / np.where(norm > 0, norm, 1.0)
    return (dy - y * (u * dy).sum(axis=-1, keepdims=True)) / denom


def netvlad_forward(X, params: VladParams, intra_norm=True, literal=False):
    """Aggregate ``X`` of shape ``[N, D]`` or ``[B, N, D]``.

    ``literal=True`` drops the assignment weights and sums every residual into
    every cluster; it is kept as a test mode only.
    """
    _check(X, params)
    single = X.ndim == 2
    Xb = X[None] if single else X
    if literal:
        A = np.ones(Xb.shape[:2] + (params.K,), dtype=Xb.dtype)
    else:
        A = soft_assign(Xb, params.W_a, params.b_a)
    a_sum = A.sum(axis=1)                                   # [B, K]
    V = np.einsum("bnk,bnd->bkd", A, Xb) - a_sum[..., None] * params.centroids
    if intra_norm:
        U, n_intra = _l2_normalize(V, axis=-1)
    else:
        U, n_intra = V, None
    flat = U.reshape(U.shape[0], -1)
    v, n_global = _l2_normalize(flat, axis=-1)
    check_finite(v, "netvlad")
    cache = (Xb, A, a_sum, V, n_intra, U.shape, flat, n_global, params, intra_norm, literal, single)
    return (v[0] if single else v), cache


def netvlad_backward(dv, cache):
    """Gradients ``(dX, dcentroids, dW_a, db_a)`` for `netvlad_forward`."""
    Xb, A, a_sum, V, n_intra, u_shape, flat, n_global, params, intra_norm, literal, single = cache
    dv = dv[None] if single else dv
    dflat = _l2_normalize_backward(dv, flat, n_global)
    dU = dflat.reshape(u_shape)
    dV = _l2_normalize_backward(dU, V, n_intra) if intra_norm else dU
    c = params.centroids
    dX = np.einsum("bnk,bkd->bnd", A, dV)
    dc = -(a_sum[..., None] * dV).sum(axis=0)
    if literal:
        dW = np.zeros_like(params.W_a)
        db = np.zeros_like(params.b_a)
    else:
        dA = np.einsum("bnd,bkd->bnk", Xb, dV) - (dV * c).sum(axis=-1)[:, None, :]
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        dW = np.einsum("bnk,bnd->kd", dS, Xb)
        db = dS.sum(axis=(0, 1))
        dX = dX + dS @ params.W_a
    if single:
        dX = dX[0]
    return dX, dc, dW, db


def netvlad_aggregate(X, params: VladParams, intra_norm=True, literal=False):
    return netvlad_forward(X, params, intra_norm=intra_norm, literal=literal)[0]


def vlad_hard_oracle(X, c, intra_norm=True):
    """Nearest-centroid VLAD with explicit loops (ties go to the lowest index)."""
    X = np.asarray(X, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if X.ndim != 2 or c.ndim != 2 or X.shape[1] != c.shape[1]:
        raise ShapeMismatch(f"X {X.shape} and centroids {c.shape} do not conform")
    N, D = X.shape
    K = c.shape[0]
    V = np.zeros((K, D))
    for i in range(N):
        best, best_d = 0, None
        for k in range(K):
            d = sum((X[i, j] - c[k, j]) ** 2 for j in range(D))
            if best_d is None or d < best_d:
                best, best_d = k, d
        for j in range(D):
            V[best, j] += X[i, j] - c[best, j]
    return _normalize_loops(V, intra_norm)


def vlad_soft_oracle(X, params: VladParams, intra_norm=True):
    """Soft-assignment VLAD with explicit loops over i, k, j."""
    X = np.asarray(X, dtype=np.float64)
    N, D = X.shape
    K = params.K
    V = np.zeros((K, D))
    for i in range(N):
        scores = [sum(params.W_a[k, j] * X[i, j] for j in range(D)) + params.b_a[k]
                  for k in range(K)]
        top = max(scores)
        e = [np.exp(s - top) for s in scores]
        z = sum(e)
        for k in range(K):
            for j in range(D):
                V[k, j] += e[k] / z * (X[i, j] - params.centroids[k, j])
    return _normalize_loops(V, intra_norm)


def _normalize_loops(V, intra_norm):
    K, D = V.shape
    if intra_norm:
        for k in range(K):
            n = np.sqrt(sum(V[k, j] ** 2 for j in range(D)))
            for j in range(D):
                V[k, j] /= n + EPS
    v = V.reshape(-1)
    n = np.sqrt(sum(x * x for x in v))
    return v / (n + EPS)


def kmeans(X, k, n_iter=10, rng=None):
    """Lloyd iterations from k-means++ seeding (D^2 sampling)."""
    rng = np.random.default_rng(0) if rng is None else rng
    X = np.asarray(X, dtype=np.float64)
    if len(X) >= k:
        c = np.empty((k, X.shape[1]))
        c[0] = X[rng.integers(len(X))]
        d2 = ((X - c[0]) ** 2).sum(-1)
        for j in range(1, k):
            total = d2.sum()
            i = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
            c[j] = X[i]
            d2 = np.minimum(d2, ((X - c[j]) ** 2).sum(-1))
    else:
        c = X[rng.integers(0, len(X), size=k)] + 1e-3 * rng.standard_normal((k, X.shape[1]))
    for _ in range(n_iter):
        d = ((X[:, None, :] - c[None]) ** 2).sum(-1)
        lab = d.argmin(axis=1)
        for j in range(k):
            members = X[lab == j]
            if len(members):
                c[j] = members.mean(axis=0)
    return c


class NetVLAD(Layer):
    """Layer over ``[B, D, 1, T]`` feature maps; descriptors are the T columns."""

    def __init__(self, store, name, K, D, rng, intra_norm=True):
        super().__init__(store, name)
        self.K, self.D, self.intra_norm = K, D, intra_norm
        c = rng.standard_normal((K, D)) * 0.1
        init = VladParams.from_centroids(c)
        store.add(f"{name}.centroids", init.centroids)
        store.add(f"{name}.W_a", init.W_a)
        store.add(f"{name}.b_a", init.b_a)

    @property
    def params(self) -> VladParams:
        s, n = self.store, self.name
        return VladParams(s[f"{n}.centroids"], s[f"{n}.W_a"], s[f"{n}.b_a"])

    def set_centroids(self, centroids, sharpness=1.0):
        init = VladParams.from_centroids(centroids, sharpness)
        s, n = self.store, self.name
        s[f"{n}.centroids"][...] = init.centroids
        s[f"{n}.W_a"][...] = init.W_a
        s[f"{n}.b_a"][...] = init.b_a

    @staticmethod
    def descriptors(x):
        if x.shape[2] != 1:
            raise ShapeMismatch(f"expected frequency axis collapsed to 1, got {x.shape}")
        return x[:, :, 0, :].transpose(0, 2, 1)

    def forward(self, x, train=True):
        v, cache = netvlad_forward(self.descriptors(x), self.params, intra_norm=self.intra_norm)
        if train:
            self._caches.append((cache, x.shape))
        return v

    def backward(self, dv):
        cache, x_shape = self._caches.pop()
        dX, dc, dW, db = netvlad_backward(dv, cache)
        n = self.name
        self.store.accumulate(f"{n}.centroids", dc)
        self.store.accumulate(f"{n}.W_a", dW)
        self.store.accumulate(f"{n}.b_a", db)
        return dX.transpose(0, 2, 1).reshape(x_shape)

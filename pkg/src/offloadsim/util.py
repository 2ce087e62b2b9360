"""Small linear-algebra helpers shared across modules.

Everything here operates on stacks of small Hermitian matrices with
shape (..., n, n); n is 1 or 2 in most runs, so closed forms are used
for those sizes and LAPACK only as a fallback.
"""

import functools

import numpy as np

SQRT2 = np.sqrt(2.0)


def crandn(rng, shape):
    """Standard circularly-symmetric complex Gaussian, unit variance per entry."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) / SQRT2


def hermitize(a):
    """Symmetrize a stack of nearly-Hermitian matrices."""
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def eye_like(n, batch, dtype=complex):
    out = np.zeros(batch + (n, n), dtype=dtype)
    idx = np.arange(n)
    out[..., idx, idx] = 1.0
    return out


def inv_h(a):
    """Inverse of a stack of Hermitian positive definite matrices."""
    n = a.shape[-1]
    if n == 1:
        return 1.0 / a
    if n == 2:
        a00 = a[..., 0, 0]
        a01 = a[..., 0, 1]
        a10 = a[..., 1, 0]
        a11 = a[..., 1, 1]
        det = a00 * a11 - a01 * a10
        out = np.empty_like(a)
        out[..., 0, 0] = a11
        out[..., 0, 1] = -a01
        out[..., 1, 0] = -a10
        out[..., 1, 1] = a00
        return out / det[..., None, None]
    return np.linalg.inv(a)


def logdet_h(a):
    """log det of a stack of Hermitian matrices; -inf where not positive definite."""
    n = a.shape[-1]
    if n == 1:
        d = a[..., 0, 0].real
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(d > 0.0, np.log(np.maximum(d, 1e-300)), -np.inf)
    if n == 2:
        a00 = a[..., 0, 0].real
        a11 = a[..., 1, 1].real
        det = a00 * a11 - (a[..., 0, 1] * a[..., 1, 0]).real
        ok = (det > 0.0) & (a00 > 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(ok, np.log(np.maximum(det, 1e-300)), -np.inf)
    w = np.linalg.eigvalsh(a)
    ok = w[..., 0] > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ld = np.sum(np.log(np.maximum(w, 1e-300)), axis=-1)
    return np.where(ok, ld, -np.inf)


@functools.lru_cache(maxsize=32)
def triu_indices_cached(n):
    return np.triu_indices(n, k=1)


@functools.lru_cache(maxsize=32)
def _diag_indices(n):
    return np.arange(n)


def pack_hermitian(a):
    """Map a stack (..., n, n) of Hermitian matrices to real vectors (..., n*n).

    Layout: [diagonal, sqrt(2)*Re upper, sqrt(2)*Im upper]. The map is an
    isometry for the Frobenius inner product, so conjugate gradients pack
    through the same function.
    """
    n = a.shape[-1]
    iu, ju = triu_indices_cached(n)
    d = _diag_indices(n)
    diag = a[..., d, d].real
    off = a[..., iu, ju]
    return np.concatenate([diag, SQRT2 * off.real, SQRT2 * off.imag], axis=-1)


def unpack_hermitian(v, n):
    """Inverse of pack_hermitian; v has shape (..., n*n)."""
    iu, ju = triu_indices_cached(n)
    k = len(iu)
    d = _diag_indices(n)
    batch = v.shape[:-1]
    a = np.zeros(batch + (n, n), dtype=complex)
    a[..., d, d] = v[..., :n]
    off = (v[..., n:n + k] + 1j * v[..., n + k:]) / SQRT2
    a[..., iu, ju] = off
    a[..., ju, iu] = np.conj(off)
    return a


def sandwich(c, q):
    """c @ q @ c^H for stacks; c is (..., r, t), q is (..., t, t)."""
    return np.matmul(np.matmul(c, q), np.conj(np.swapaxes(c, -1, -2)))


def gram_weighted(c, w):
    """c^H @ w @ c for stacks; c is (..., r, t), w is (..., r, r)."""
    ch = np.conj(np.swapaxes(c, -1, -2))
    return np.matmul(np.matmul(ch, w), c)


def traces(a):
    """Real traces of a stack of square matrices."""
    return np.einsum("...ii->...", a).real


def min_eig_h(a):
    """Smallest eigenvalue of a stack of Hermitian matrices."""
    n = a.shape[-1]
    if n == 1:
        return a[..., 0, 0].real
    if n == 2:
        tr = (a[..., 0, 0] + a[..., 1, 1]).real
        det = (a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]).real
        disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
        return 0.5 * (tr - disc)
    return np.linalg.eigvalsh(a)[..., 0]


def waterfill_channel(h, sigma2, budget):
    """Covariance maximizing log det(I + h^H h Q / sigma2) under tr Q <= budget.

    Classic single-link waterfilling over the right singular vectors of h.
    """
    _, s, vh = np.linalg.svd(h, full_matrices=True)
    g = np.zeros(h.shape[-1])
    g[: len(s)] = s * s / sigma2
    p = np.zeros_like(g)
    active = g > 0.0
    if not np.any(active):
        return np.zeros((h.shape[-1], h.shape[-1]), dtype=complex)
    # water level by trying decreasing numbers of active modes
    idx = np.argsort(-g)
    for k in range(np.count_nonzero(active), 0, -1):
        top = idx[:k]
        mu = (budget + np.sum(1.0 / g[top])) / k
        pw = mu - 1.0 / g[top]
        if pw[-1] >= 0.0:
            p[top] = pw
            break
    v = np.conj(vh).T
    return (v * p) @ np.conj(v).T

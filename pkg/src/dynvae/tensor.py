"""Dense linear algebra and a reproducible random stream.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The routines
here add the checks and conventions the rest of the package relies on
(shape errors, descending singular values, PSD tolerance on Cholesky) and
a platform-independent PRNG so that every experiment replays bit-for-bit.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import NotPSDError, NumericError, ShapeError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_PI = 2.0 * math.pi


def as_tensor(x, ndim=None, name="array", finite=False):
    """Return ``x`` as a C-contiguous float64 array, validating rank and finiteness."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


class Prng:
    """SplitMix64 generator (Steele, Lea & Flood 2014) with Box-Muller normals.

    The state is a single 64-bit counter advanced by the golden-ratio
    increment, so a block of ``k`` outputs is a pure function of the state
    and can be produced in one vectorised pass. Outputs are identical to the
    reference scalar algorithm on every platform.

    Uniform doubles use the top 53 bits: ``(z >> 11) * 2**-53`` in [0, 1).
    Each call to :meth:`gaussian` consumes ``2 * ceil(size / 2)`` uniforms,
    so an odd-sized request discards the last sine branch.
    """

    def __init__(self, seed=0):
        self._state = int(seed) & _MASK64

    @property
    def state(self):
        return self._state

    def next_u64(self, count):
        count = int(count)
        if count <= 0:
            return np.zeros(0, dtype=np.uint64)
        idx = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(self._state) + idx * np.uint64(_GOLDEN)
        self._state = (self._state + count * _GOLDEN) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, shape=()):
        size = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64(size) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def gaussian(self, shape=()):
        size = int(np.prod(shape, dtype=np.int64))
        pairs = (size + 1) // 2
        u = self.uniform((pairs, 2))
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = _TWO_PI * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.ravel()[:size].reshape(shape)

    def integers(self, high, shape=()):
        """Uniform integers in ``[0, high)`` (multiply-shift, bias below 2**-53 * high)."""
        return np.floor(self.uniform(shape) * high).astype(np.int64)

    def permutation(self, n):
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")


def gaussian(rng, shape):
    """i.i.d. standard normal tensor drawn from ``rng``."""
    return rng.gaussian(shape)


def mat_mul(a, b):
    a = as_tensor(a, ndim=2, name="a")
    b = as_tensor(b, ndim=2, name="b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


@lru_cache(maxsize=64)
def _round_robin(q):
    # circle-method tournament: every column pair meets once per sweep, and
    # pairs inside a round are disjoint so they can be rotated together
    players = list(range(q)) + ([-1] if q % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left, right = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                left.append(min(a, b))
                right.append(max(a, b))
        if left:
            rounds.append((np.array(left), np.array(right)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def svd_thin(m, max_sweeps=80):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Args:
        m: ``p x q`` matrix with finite entries.
        max_sweeps: iteration cap; exceeding it raises :class:`NumericError`.

    Returns:
        ``(U, S, V)`` with ``U`` of shape ``p x r``, ``S`` of length ``r``
        sorted descending, ``V`` of shape ``q x r`` and ``r = min(p, q)``, so
        that ``U @ diag(S) @ V.T == m``. Columns of ``U`` belonging to zero
        singular values are completed to an orthonormal set.
    """
    m = as_tensor(m, ndim=2, name="m", finite=True)
    p, q = m.shape
    if p < q:
        v, s, u = svd_thin(m.T, max_sweeps)
        return u, s, v
    if p > q:
        # QR preconditioning: rotate the small triangular factor instead
        qmat, r = np.linalg.qr(m)
        ur, s, v = svd_thin(r, max_sweeps)
        return qmat @ ur, s, v
    work = m.copy()
    v = np.eye(q)
    tol = np.finfo(float).eps * max(p, 1)
    rounds = _round_robin(q)
    for _ in range(max_sweeps):
        rotated = False
        for i, j in rounds:
            ui, uj = work[:, i], work[:, j]
            alpha = np.einsum("ij,ij->j", ui, ui)
            beta = np.einsum("ij,ij->j", uj, uj)
            gamma = np.einsum("ij,ij->j", ui, uj)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            i, j = i[active], j[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (work, v):
                ci, cj = mat[:, i], mat[:, j]
                mat[:, i] = c * ci - s * cj
                mat[:, j] = s * ci + c * cj
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sv = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sv, kind="stable")
    sv, work, v = sv[order], work[:, order], v[:, order]
    u = np.zeros((p, q))
    cutoff = tol * sv[0] if q and sv[0] > 0 else 0.0
    good = sv > cutoff
    u[:, good] = work[:, good] / sv[good]
    if not np.all(good):
        u = _complete_basis(u, good)
    return u, sv, v


def _complete_basis(u, good):
    """Fill the columns of ``u`` not flagged ``good`` with orthonormal complements."""
    p = u.shape[0]
    basis = [u[:, k] for k in np.flatnonzero(good)]
    candidates = iter(np.eye(p))
    for k in np.flatnonzero(~good):
        for e in candidates:
            w = e.copy()
            for _ in range(2):  # twice is enough for Gram-Schmidt
                for b in basis:
                    w -= (b @ w) * b
            norm = np.linalg.norm(w)
            if norm > 1e-8:
                w /= norm
                basis.append(w)
                u[:, k] = w
                break
    return u


def cholesky(m, sym_tol=1e-9, psd_tol=1e-8):
    """Lower-triangular ``L`` with ``L @ L.T == m`` for symmetric PSD ``m``.

    Pivots in ``[-psd_tol * scale, tiny]`` are treated as exact zeros, which
    makes the routine usable on singular covariance matrices; ``scale`` is
    ``max(1, max |diag(m)|)``.
    """
    m = as_tensor(m, ndim=2, name="m", finite=True)
    n = m.shape[0]
    if m.shape[1] != n:
        raise ShapeError(f"cholesky needs a square matrix, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(np.diag(m))))) if n else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > sym_tol * scale:
        raise ShapeError("cholesky needs a symmetric matrix")
    tiny = 64 * np.finfo(float).eps * scale
    low = np.zeros((n, n))
    for j in range(n):
        row = low[j, :j]
        pivot = m[j, j] - row @ row
        if pivot < -psd_tol * scale:
            raise NotPSDError(f"matrix is not positive semi-definite (pivot {pivot:.3g} at {j})")
        col = m[j + 1 :, j] - low[j + 1 :, :j] @ row
        if pivot <= tiny:
            if col.size and np.max(np.abs(col)) > 1e-6 * scale:
                raise NotPSDError(f"matrix is not positive semi-definite (zero pivot at {j})")
            continue
        low[j, j] = math.sqrt(pivot)
        low[j + 1 :, j] = col / low[j, j]
    return low


def eigenvalues(m):
    """Eigenvalues of a small real square matrix, sorted by (real, imag).

    Delegates to LAPACK's Hessenberg reduction + shifted QR (``dgeev``).
    """
    m = as_tensor(m, ndim=2, name="m", finite=True)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"eigenvalues need a square matrix, got {m.shape}")
    if m.shape[0] > 64:
        raise ShapeError("eigenvalues is a small-matrix routine (n <= 64)")
    try:
        vals = np.linalg.eigvals(m).astype(complex)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigenvalue iteration failed: {exc}") from exc
    return vals[np.lexsort((vals.imag, vals.real))]


def spectral_radius(m):
    vals = eigenvalues(m)
    return float(np.max(np.abs(vals))) if vals.size else 0.0


def psd_sqrt_factor(m):
    """Lower-triangular factor of the PSD projection of a symmetric matrix.

    Symmetrizes, clips negative eigenvalues at zero and returns the Cholesky
    factor of the result.
    """
    m = as_tensor(m, ndim=2, name="m")
    sym = 0.5 * (m + m.T)
    w, q = np.linalg.eigh(sym)
    proj = (q * np.clip(w, 0.0, None)) @ q.T
    return cholesky(0.5 * (proj + proj.T))

"""Linear latent dynamics.

Covariance convention: ``cov(x, y) = E[x y^T]`` for zero-mean states. A
first-order dynamic layer ``F = [[I, 0], [A, B]]`` maps standard normal
noise ``[x1; x2]`` to ``h1 = x1``, ``h2 = A x1 + B x2`` whose joint
covariance is ``F F^T = [[I, A^T], [A, A A^T + B B^T]]``; when
``A A^T + B B^T = I`` this is the stationary law of two succeeding states
of ``h_{t+1} = A h_t + B v_t``.

The second-order layer is block lower-triangular with blocks F1..F5::

    F = [[I,  0,  0 ],
         [F1, F2, 0 ],
         [F3, F4, F5]]

Matching ``F F^T`` against the stationary covariance of three succeeding
states gives ``F1 = cov(h_{t+1}, h_t) = cov(h_t, h_{t+1})^T`` and
``F3 = cov(h_{t+2}, h_t)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .errors import DegenerateDynamicsError, InfeasibleCovarianceError, NotPSDError, ShapeError, UsageError
from .tensor import as_tensor, cholesky, spectral_radius


def _square(name, m, n=None):
    m = as_tensor(m, ndim=2, name=name)
    if m.shape[0] != m.shape[1] or (n is not None and m.shape[0] != n):
        want = f"{n}x{n}" if n is not None else "square"
        raise ShapeError(f"{name} must be {want}, got {m.shape}")
    return m


@dataclass
class Var1Model:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.A = _square("A", self.A)
        self.B = _square("B", self.B, self.A.shape[0])

    @property
    def n(self):
        return self.A.shape[0]

    def stationarity_residual(self):
        return stationarity_residual(self.A, self.B)


@dataclass
class Var2Model:
    """``h_{t+2} = A0 h_t + A1 h_{t+1} + B v_t``."""

    A0: np.ndarray
    A1: np.ndarray
    B: np.ndarray
    reg_weights: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.A0 = _square("A0", self.A0)
        n = self.A0.shape[0]
        self.A1 = _square("A1", self.A1, n)
        self.B = _square("B", self.B, n)
        self.reg_weights = tuple(float(w) for w in self.reg_weights)
        if len(self.reg_weights) != 3 or min(self.reg_weights) <= 0:
            raise UsageError("reg_weights must be three strictly positive numbers")

    @property
    def n(self):
        return self.A0.shape[0]


@dataclass
class DynamicLayerF:
    """Block lower-triangular dynamic layer of order 1 (blocks A, B) or 2 (F1..F5)."""

    order: int
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        if self.order not in (1, 2):
            raise UsageError("only Markov orders 1 and 2 are supported")
        want = 2 if self.order == 1 else 5
        if len(self.blocks) != want:
            raise ShapeError(f"order {self.order} needs {want} blocks, got {len(self.blocks)}")
        self.blocks = [_square(f"F{k + 1}", b) for k, b in enumerate(self.blocks)]
        n = self.blocks[0].shape[0]
        if any(b.shape != (n, n) for b in self.blocks):
            raise ShapeError("all blocks must share one size")

    @property
    def n(self):
        return self.blocks[0].shape[0]

    def dense(self):
        n = self.n
        eye = np.eye(n)
        if self.order == 1:
            a, b = self.blocks
            return np.block([[eye, np.zeros((n, n))], [a, b]])
        return build_F_order2(*self.blocks)


def block_positions(order):
    """(row, col) block coordinates of the trainable blocks, in storage order."""
    if order == 1:
        return [(1, 0), (1, 1)]
    if order == 2:
        return [(1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]
    raise UsageError("only Markov orders 1 and 2 are supported")


def joint_cov_order1(A):
    A = _square("A", A)
    n = A.shape[0]
    eye = np.eye(n)
    return np.block([[eye, A.T], [A, eye]])


def dynamic_layer_forward(x, layer):
    """Apply an order-1 dynamic layer to one ``2n`` vector or a ``(batch, 2n)`` batch.

    Returns ``(h1, h2)`` with ``h1 = x1`` and ``h2 = A x1 + B x2``.
    """
    if layer.order != 1:
        raise UsageError("dynamic_layer_forward expects an order-1 layer; use DynamicLayerF.dense()")
    A, B = layer.blocks
    n = A.shape[0]
    x = as_tensor(x, name="x")
    if x.shape[-1] != 2 * n or x.ndim not in (1, 2):
        raise ShapeError(f"expected trailing dimension {2 * n}, got shape {x.shape}")
    x1, x2 = x[..., :n], x[..., n:]
    return x1.copy(), x1 @ A.T + x2 @ B.T


def stationarity_residual(A, B):
    """``||A A^T + B B^T - I||_F^2``."""
    A = _square("A", A)
    B = _square("B", B, A.shape[0])
    e = A @ A.T + B @ B.T - np.eye(A.shape[0])
    return float(np.sum(e * e))


def stationarity_grad(A, B):
    """Gradients of :func:`stationarity_residual` with respect to A and B."""
    e = A @ A.T + B @ B.T - np.eye(A.shape[0])
    return 4.0 * e @ A, 4.0 * e @ B


def stationary_B(A):
    """A noise factor with ``A A^T + B B^T = I`` (lower-triangular); needs ``||A||_2 <= 1``."""
    A = _square("A", A)
    try:
        return cholesky(np.eye(A.shape[0]) - A @ A.T)
    except NotPSDError as exc:
        raise InfeasibleCovarianceError("I - A A^T is not PSD: ||A||_2 > 1") from exc


def _warn_unstable(A):
    rho = spectral_radius(A)
    if rho >= 1.0:
        warnings.warn(f"transition matrix has spectral radius {rho:.4f} >= 1", RuntimeWarning, stacklevel=3)


def sample_var1(model, h0, steps, rng):
    """Trajectory ``h_0 .. h_{steps-1}`` of ``h_{t+1} = A h_t + B v_t`` as a ``(steps, n)`` array.

    Row 0 is ``h0`` itself. The innovations are drawn from ``rng`` in a
    single ``(steps - 1, n)`` block.
    """
    n = model.n
    h0 = as_tensor(h0, ndim=1, name="h0")
    if h0.shape[0] != n:
        raise ShapeError(f"h0 must have length {n}")
    _warn_unstable(model.A)
    out = np.zeros((max(int(steps), 0), n))
    if steps <= 0:
        return out
    out[0] = h0
    if steps == 1:
        return out
    drive = rng.gaussian((steps - 1, n)) @ model.B.T
    at = model.A.T
    for t in range(1, steps):
        out[t] = out[t - 1] @ at + drive[t - 1]
    return out


def build_F_order2(F1, F2, F3, F4, F5):
    blocks = [_square(f"F{k + 1}", b) for k, b in enumerate((F1, F2, F3, F4, F5))]
    n = blocks[0].shape[0]
    z = np.zeros((n, n))
    F1, F2, F3, F4, F5 = blocks
    return np.block([[np.eye(n), z, z], [F1, F2, z], [F3, F4, F5]])


def joint_cov_order2(F1, F2, F3, F4, F5):
    """``F F^T`` assembled block by block."""
    F1, F2, F3, F4, F5 = (_square(f"F{k + 1}", b) for k, b in enumerate((F1, F2, F3, F4, F5)))
    n = F1.shape[0]
    eye = np.eye(n)
    s11 = F1 @ F1.T + F2 @ F2.T
    s21 = F3 @ F1.T + F4 @ F2.T
    s22 = F3 @ F3.T + F4 @ F4.T + F5 @ F5.T
    return np.block([[eye, F1.T, F3.T], [F1, s11, s21.T], [F3, s21, s22]])


def order2_terms(F1, F2, F3, F4, F5):
    """The three residual matrices penalised by :func:`order2_regularizer`."""
    eye = np.eye(F1.shape[0])
    e1 = F1 @ F1.T + F2 @ F2.T - eye
    e2 = F3 @ F3.T + F4 @ F4.T + F5 @ F5.T - eye
    g = F3 @ F1.T + F4 @ F2.T - F1
    return e1, e2, g


def order2_regularizer(F1, F2, F3, F4, F5, lam1, lam2, lam3):
    """Penalty that keeps ``F F^T`` block Toeplitz with identity diagonal blocks."""
    if min(lam1, lam2, lam3) <= 0:
        raise UsageError("regularizer weights must be positive")
    e1, e2, g = order2_terms(*(_square(f"F{k + 1}", b) for k, b in enumerate((F1, F2, F3, F4, F5))))
    return float(lam1 * np.sum(e1 * e1) + lam2 * np.sum(e2 * e2) + lam3 * np.sum(g * g))


def order2_regularizer_grad(F1, F2, F3, F4, F5, lam1, lam2, lam3):
    e1, e2, g = order2_terms(F1, F2, F3, F4, F5)
    return [
        4 * lam1 * e1 @ F1 + 2 * lam3 * (g.T @ F3 - g),
        4 * lam1 * e1 @ F2 + 2 * lam3 * g.T @ F4,
        4 * lam2 * e2 @ F3 + 2 * lam3 * g @ F1,
        4 * lam2 * e2 @ F4 + 2 * lam3 * g @ F2,
        4 * lam2 * e2 @ F5,
    ]


def order2_noise_cov(A0, A1, F1):
    """``B B^T`` implied by the unit-variance equation of the order-2 system."""
    return np.eye(A0.shape[0]) - A0 @ A0.T - A1 @ A1.T - A0 @ F1.T @ A1.T - A1 @ F1 @ A0.T


def order2_residuals(A0, A1, B, F1, F3):
    """Max-abs residuals of the three equations linking (A0, A1, B) to (F1, F3)."""
    r1 = F1.T - (F1 @ A0.T + A1.T)
    r2 = F3 - (A0 + A1 @ F1)
    r3 = order2_noise_cov(A0, A1, F1) - B @ B.T
    return tuple(float(np.max(np.abs(r))) for r in (r1, r2, r3))


def solve_order2(F1, F3, cond_cap=1e8, psd_tol=1e-8, reg_weights=(1.0, 1.0, 1.0)):
    """Recover ``(A0, A1, B)`` of a second-order VAR from its lag covariances.

    ``F1 = cov(h_{t+1}, h_t)`` and ``F3 = cov(h_{t+2}, h_t)`` of a process
    with unit marginal covariance. Uses::

        A0 = (F3 - F1 F1) (I - F1^T F1)^{-1}
        A1 = F1 - A0 F1^T
        B  = chol(I - A0 A0^T - A1 A1^T - A0 F1^T A1^T - A1 F1 A0^T)

    Raises:
        DegenerateDynamicsError: ``I - F1^T F1`` is singular or its
            condition number exceeds ``cond_cap``.
        InfeasibleCovarianceError: the implied ``B B^T`` is not PSD.
    """
    F1 = _square("F1", F1)
    F3 = _square("F3", F3, F1.shape[0])
    n = F1.shape[0]
    gram = np.eye(n) - F1.T @ F1
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > cond_cap:
        raise DegenerateDynamicsError(f"I - F1^T F1 is ill-conditioned (cond {cond:.3g})")
    A0 = np.linalg.solve(gram.T, (F3 - F1 @ F1).T).T
    A1 = F1 - A0 @ F1.T
    bbt = order2_noise_cov(A0, A1, F1)
    bbt = 0.5 * (bbt + bbt.T)
    try:
        B = cholesky(bbt, psd_tol=psd_tol)
    except NotPSDError as exc:
        raise InfeasibleCovarianceError("implied noise covariance B B^T is not PSD") from exc
    return Var2Model(A0, A1, B, reg_weights)


def sample_var2(model, h0, h1, steps, rng):
    """Trajectory of the order-2 recursion; rows 0 and 1 are ``h0`` and ``h1``."""
    n = model.n
    h0 = as_tensor(h0, ndim=1, name="h0")
    h1 = as_tensor(h1, ndim=1, name="h1")
    if h0.shape[0] != n or h1.shape[0] != n:
        raise ShapeError(f"initial states must have length {n}")
    steps = max(int(steps), 0)
    out = np.zeros((steps, n))
    if steps == 0:
        return out
    out[0] = h0
    if steps > 1:
        out[1] = h1
    if steps <= 2:
        return out
    drive = rng.gaussian((steps - 2, n)) @ model.B.T
    a0t, a1t = model.A0.T, model.A1.T
    for t in range(2, steps):
        out[t] = out[t - 2] @ a0t + out[t - 1] @ a1t + drive[t - 2]
    return out


def order2_stationary_lags(model):
    """Stationary ``(cov(h, h), cov(h_{t+1}, h_t), cov(h_{t+2}, h_t))`` of an order-2 model.

    Solves the discrete Lyapunov equation of the companion form
    ``z_{t+1} = M z_t + w`` with ``z_t = [h_t; h_{t+1}]``.
    """
    n = model.n
    z = np.zeros((n, n))
    M = np.block([[z, np.eye(n)], [model.A0, model.A1]])
    if spectral_radius(M) >= 1.0:
        raise DegenerateDynamicsError("order-2 model is not stable")
    Q = np.zeros((2 * n, 2 * n))
    Q[n:, n:] = model.B @ model.B.T
    P = solve_discrete_lyapunov(M, Q)
    gamma0 = 0.5 * (P[:n, :n] + P[:n, :n].T)
    gamma1 = P[n:, :n]
    gamma2 = model.A0 @ gamma0 + model.A1 @ gamma1
    return gamma0, gamma1, gamma2


def standardize_var2(model):
    """Equivalent order-2 model whose stationary marginal covariance is the identity."""
    gamma0, _, _ = order2_stationary_lags(model)
    L = cholesky(gamma0)
    inv = np.linalg.inv(L)
    return Var2Model(inv @ model.A0 @ L, inv @ model.A1 @ L, inv @ model.B, model.reg_weights)

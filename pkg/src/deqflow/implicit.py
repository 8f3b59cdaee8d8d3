"""Implicit-function-theorem derivatives of the equilibrium.

Per sample ``i`` with activation mask ``D_i`` the linearized fixed-point map is
``Q_i = I - gamma D_i A^T`` (an m x m block).  Then

    dz_i          = Q_i^{-1} gamma D_i dA^T z_i
    d f(x_i)/d A  = gamma / sqrt(m) * outer(z_i, J_i),   J_i^T = D_i Q_i^{-T} b.

Everything here works block by block.  :func:`dense_kronecker_reference`
builds the literal nm x nm vectorized objects and exists only as a test
oracle for small problems.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, SingularBlock, SizeGuard
from .model import (
    DEFAULT_TOL,
    EquilibriumBatch,
    ModelParams,
    features,
    solve_equilibrium,
)

DENSE_SIZE_CAP = 4000
BACKWARD_TOL = 1e-12


@dataclasses.dataclass(frozen=True, eq=False)
class ActivationPattern:
    mask: np.ndarray  # n x m, entries 0.0 / 1.0

    @property
    def diag(self):
        return self.mask


@dataclasses.dataclass(frozen=True, eq=False)
class NtkFactors:
    """Per-sample NTK factors stacked row-wise: ``z[i]``, ``J[i]``."""

    z: np.ndarray
    J: np.ndarray
    residual: np.ndarray
    x: np.ndarray = None  # unmasked solve of Q_i^T x = b, reusable as a warm start

    def __len__(self):
        return self.z.shape[0]


@dataclasses.dataclass(frozen=True, eq=False)
class LossGradient:
    G: np.ndarray
    grad_norm: float


def activation_pattern(params: ModelParams, Z, Phi) -> ActivationPattern:
    # Strict inequality: relu'(0) is taken to be 0.
    pre = params.gamma * (np.asarray(Z) @ params.A) + np.asarray(Phi)
    return ActivationPattern(mask=(pre > 0.0).astype(np.float64))


def _solve_blocks_lu(params, mask, rhs, transpose):
    """Solve ``Q_i x_i = rhs_i`` (or ``Q_i^T x_i = rhs_i``) for every sample."""
    m = params.m
    gamma = params.gamma
    eye = np.eye(m)
    out = np.empty_like(rhs)
    resid = np.empty(rhs.shape[0])
    for i in range(rhs.shape[0]):
        Qi = eye - gamma * mask[i][:, None] * params.A.T
        if transpose:
            Qi = Qi.T
        try:
            lu = scipy.linalg.lu_factor(Qi, check_finite=False)
            xi = scipy.linalg.lu_solve(lu, rhs[i], check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularBlock(f"block {i} could not be factorized: {exc}") from exc
        if not np.all(np.isfinite(xi)):
            raise SingularBlock(f"block {i} is numerically singular")
        out[i] = xi
        resid[i] = np.linalg.norm(Qi @ xi - rhs[i])
    return out, resid


def _backward_iterative(params, mask, tol, max_iter, X0=None):
    # Q_i^T x = b  <=>  x = b + gamma A (D_i x); contraction factor <= gamma ||A||.
    gAT = params.gamma * params.A.T
    b = params.b
    X = np.broadcast_to(b, mask.shape).copy() if X0 is None else np.array(X0)
    for _ in range(max_iter):
        X_next = b + (mask * X) @ gAT
        resid = np.linalg.norm(X_next - X, axis=1)
        X = X_next
        if resid.max() <= tol:
            return X, resid
    raise SingularBlock(
        f"backward iteration did not reach {tol:.1e} in {max_iter} steps "
        f"(max residual {resid.max():.3e})")


def ntk_factors(params: ModelParams, equilibrium: EquilibriumBatch,
                pattern: ActivationPattern, method="lu", tol=BACKWARD_TOL,
                max_iter=2000, warm=None) -> NtkFactors:
    """Compute ``z_i`` and ``J_i`` for every sample.

    ``method="lu"`` does one pivoted LU solve per sample.  ``"iterative"``
    runs the batched transposed fixed-point iteration, which is much cheaper
    when ``gamma ||A||`` is small; ``warm`` may hold the previous unmasked
    solution ``x``.
    """
    mask = pattern.mask
    if mask.shape != equilibrium.Z.shape:
        raise DimensionMismatch("pattern and equilibrium shapes differ")
    if method == "lu":
        rhs = np.broadcast_to(params.b, mask.shape).copy()
        X, resid = _solve_blocks_lu(params, mask, rhs, transpose=True)
    elif method == "iterative":
        X, resid = _backward_iterative(params, mask, tol, max_iter, warm)
    else:
        raise ValueError(f"unknown method {method!r}")
    return NtkFactors(z=equilibrium.Z, J=mask * X, residual=resid, x=X)


def loss_grad_A(params: ModelParams, equilibrium: EquilibriumBatch,
                factors: NtkFactors, u, y) -> LossGradient:
    """Gradient of ``0.5 ||u - y||^2`` with respect to ``A``."""
    r = np.asarray(u, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    if r.shape != (factors.z.shape[0],):
        raise DimensionMismatch("u and y must have one entry per sample")
    scale = params.gamma / math.sqrt(params.m)
    G = scale * ((factors.z * r[:, None]).T @ factors.J)
    return LossGradient(G=G, grad_norm=float(np.linalg.norm(G)))


def feature_map(params: ModelParams, x, tol=DEFAULT_TOL, spectral=None,
                method="lu") -> NtkFactors:
    """NTK factors of arbitrary inputs: ``df(x)/dA = gamma/sqrt(m) outer(z_x, J_x)``.

    Accepts a single unit vector or a matrix of unit rows.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    Phi = features(params, X)
    eq = solve_equilibrium(params, Phi, tol=tol, spectral=spectral)
    pattern = activation_pattern(params, eq.Z, Phi)
    return ntk_factors(params, eq, pattern, method=method)


def dZ_dA_action(params: ModelParams, equilibrium: EquilibriumBatch,
                 pattern: ActivationPattern, dA) -> np.ndarray:
    """Directional derivative of the equilibrium ``Z`` along ``dA`` (n x m)."""
    dA = np.asarray(dA, dtype=np.float64)
    if dA.shape != params.A.shape:
        raise DimensionMismatch("dA must match A")
    rhs = params.gamma * pattern.mask * (equilibrium.Z @ dA)
    dZ, _ = _solve_blocks_lu(params, pattern.mask, rhs, transpose=False)
    return dZ


def vec(M):
    """Column-stacking vectorization."""
    return np.asarray(M).reshape(-1, order="F")


@dataclasses.dataclass(frozen=True, eq=False)
class DenseReference:
    Q: np.ndarray
    D: np.ndarray
    J: np.ndarray
    H: np.ndarray
    Z: np.ndarray
    gamma: float

    def J_rows(self):
        """Per-sample rows ``J_i`` read off the block-sparse n x nm matrix."""
        n = self.J.shape[0]
        m = self.J.shape[1] // n
        return self.J.reshape(n, m, n)[np.arange(n), :, np.arange(n)]

    def dZ_action(self, dA):
        """``vec(dZ) = gamma Q^{-1} D (I_m kron Z) vec(dA)``, reshaped to n x m."""
        n, m = self.Z.shape
        IZ = np.kron(np.eye(m), self.Z)
        v = self.gamma * np.linalg.solve(self.Q, self.D @ (IZ @ vec(dA)))
        return v.reshape((n, m), order="F")


def dense_kronecker_reference(params: ModelParams, equilibrium: EquilibriumBatch,
                              pattern: ActivationPattern) -> DenseReference:
    """Literal vectorized construction of ``Q``, ``D``, ``J`` and ``H``."""
    Z = equilibrium.Z
    n, m = Z.shape
    if n * m > DENSE_SIZE_CAP:
        raise SizeGuard(f"n*m = {n * m} exceeds the dense oracle cap {DENSE_SIZE_CAP}")
    gamma = params.gamma
    D = np.diag(vec(pattern.mask))
    Q = np.eye(n * m) - gamma * D @ np.kron(params.A.T, np.eye(n))
    B = np.kron(params.b[None, :], np.eye(n))
    J = B @ np.linalg.solve(Q, D)
    H = gamma**2 / m * J @ np.kron(np.eye(m), Z @ Z.T) @ J.T
    return DenseReference(Q=Q, D=D, J=J, H=H, Z=Z, gamma=gamma)

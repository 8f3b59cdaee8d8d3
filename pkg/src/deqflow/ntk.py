"""Empirical NTK Gram matrices, limiting kernels and their spectra."""

from __future__ import annotations

import dataclasses
import math
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, NonUnitRows, PreconditionViolated, SchemeMismatch
from .implicit import NtkFactors, activation_pattern, feature_map, ntk_factors
from .model import ModelParams, features, init_params, solve_equilibrium


@dataclasses.dataclass(frozen=True, eq=False)
class GramSnapshot:
    t: float
    H: np.ndarray
    eigenvalues: np.ndarray
    factors: NtkFactors = None

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])


@dataclasses.dataclass(frozen=True, eq=False)
class LimitingKernelEstimate:
    H_inf: np.ndarray
    reps: int
    m_mc: int
    standard_error: np.ndarray


def _kernel(params, za, Ja, zb, Jb):
    return params.gamma**2 / params.m * (za @ zb.T) * (Ja @ Jb.T)


def gram(params: ModelParams, factors: NtkFactors, t=0.0) -> GramSnapshot:
    """``H_ij = gamma^2/m (z_i . z_j)(J_i . J_j)``, symmetrized, with its spectrum."""
    H = _kernel(params, factors.z, factors.J, factors.z, factors.J)
    H = 0.5 * (H + H.T)
    return GramSnapshot(t=float(t), H=H, eigenvalues=np.linalg.eigvalsh(H),
                        factors=factors)


def kernel_cross(params: ModelParams, train_factors: NtkFactors, x0,
                 spectral=None) -> np.ndarray:
    """``k(x0, X)`` against the training set.

    ``x0`` may be a unit vector, a matrix of unit rows (one kernel row each)
    or precomputed :class:`NtkFactors`.
    """
    if isinstance(x0, NtkFactors):
        probe = x0
        single = False
    else:
        x0 = np.asarray(x0, dtype=np.float64)
        single = x0.ndim == 1
        probe = feature_map(params, x0, spectral=spectral)
    k = _kernel(params, probe.z, probe.J, train_factors.z, train_factors.J)
    return k[0] if single else k


def gram_drift(H_t: GramSnapshot, H_0: GramSnapshot):
    """Spectral and Frobenius norms of ``H(t) - H(0)``."""
    if H_t.H.shape != H_0.H.shape:
        raise DimensionMismatch("snapshots have different sizes")
    diff = H_t.H - H_0.H
    ev = np.linalg.eigvalsh(0.5 * (diff + diff.T))
    return float(np.max(np.abs(ev))), float(np.linalg.norm(diff))


def initial_gram(params: ModelParams, X, method="lu", tol=1e-10) -> GramSnapshot:
    Phi = features(params, X)
    eq = solve_equilibrium(params, Phi, tol=tol)
    pattern = activation_pattern(params, eq.Z, Phi)
    return gram(params, ntk_factors(params, eq, pattern, method=method))


def limiting_ntk_mc(d, scheme, gamma0, X, m_mc, reps, seed=0, phi_kind="relu",
                    method="iterative") -> LimitingKernelEstimate:
    """Monte-Carlo estimate of the infinite-width kernel: mean of ``H(0)`` over
    ``reps`` independent initializations at width ``m_mc``."""
    if reps < 2:
        raise InvalidConfig("limiting_ntk_mc needs reps >= 2")
    X = np.asarray(X, dtype=np.float64)
    draws = np.empty((reps, X.shape[0], X.shape[0]))
    for k in range(reps):
        params = init_params(d, m_mc, gamma0, scheme, seed=(seed, k), phi_kind=phi_kind)
        draws[k] = initial_gram(params, X, method=method).H
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(reps)
    return LimitingKernelEstimate(H_inf=0.5 * (mean + mean.T), reps=reps, m_mc=m_mc,
                                  standard_error=se)


def relu_expectation_kernel(X) -> np.ndarray:
    """``E_w[relu(Xw) relu(Xw)^T]`` for unit rows, via the arc-cosine formula."""
    X = np.asarray(X, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(X, axis=1) - 1.0) > 1e-12):
        raise NonUnitRows("relu_expectation_kernel needs unit-norm rows")
    cos = np.clip(X @ X.T, -1.0, 1.0)
    theta = np.arccos(cos)
    G = (np.sin(theta) + (math.pi - theta) * cos) / (2.0 * math.pi)
    return 0.5 * (G + G.T)


class HalfNormalBound(NamedTuple):
    lhs: float
    rhs: float
    prefactor: float
    q_factor: float


def halfnormal_min_eig_bound(params: ModelParams, X, tol=1e-12) -> HalfNormalBound:
    """Lower bound on ``lambda_min(H(0))`` for the half-normal scheme.

    With every unit active, all samples share ``Q0 = I - gamma A^T`` and
    ``Z = Phi Q0^{-T}``, so ``H(0) = gamma^2/m ||Q0^{-T} b||^2 Z Z^T`` and

        H(0) >= gamma^2 ||b||^2 q^2 * (1/m) relu(XW) relu(XW)^T,

    where ``q = lambda_min(Q0^{-1} Q0^{-T}) = 1 / sigma_max(Q0)^2``.  Returns
    ``lhs = lambda_min(H(0))`` and ``rhs`` = the smallest eigenvalue of the
    right-hand side.
    """
    if params.scheme != "half_normal_A" or params.phi_kind != "relu":
        raise SchemeMismatch("bound requires the half_normal_A scheme with relu features")
    Phi = features(params, X)
    eq = solve_equilibrium(params, Phi, tol=tol)
    pattern = activation_pattern(params, eq.Z, Phi)
    if not np.all(pattern.mask == 1.0):
        raise PreconditionViolated("activation pattern is not all ones")
    lhs = gram(params, ntk_factors(params, eq, pattern)).lambda_min
    Q0 = np.eye(params.m) - params.gamma * params.A.T
    q = 1.0 / np.linalg.norm(Q0, 2) ** 2
    prefactor = params.gamma**2 * float(params.b @ params.b) * q * q
    feat_gram = Phi @ Phi.T / params.m
    rhs = prefactor * float(np.linalg.eigvalsh(0.5 * (feat_gram + feat_gram.T))[0])
    return HalfNormalBound(lhs=lhs, rhs=rhs, prefactor=prefactor, q_factor=q)

"""ReLU deep equilibrium model: parameters, initialization and forward pass.

The hidden state of a sample ``x`` is the fixed point

    z = relu(gamma * A^T z + phi(W^T x)),

and the network output is ``f(x) = z . b / sqrt(m)``.  In batch form with one
sample per row this reads ``Z = relu(gamma * Z A + Phi)``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import NamedTuple, Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidConfig,
    MaxIterExceeded,
    NonContractive,
    PreconditionViolated,
)

SCHEMES = ("subgaussian", "half_normal_A", "diagonal_A")
PHI_KINDS = ("relu", "identity", "tanh")

DEFAULT_TOL = 1e-10
MAX_ITER_CAP = 10000


def relu(x):
    return np.maximum(x, 0.0)


_PHI = {"relu": relu, "identity": lambda x: x, "tanh": np.tanh}


@dataclasses.dataclass(frozen=True, eq=False)
class ModelParams:
    W: np.ndarray
    A: np.ndarray
    b: np.ndarray
    gamma0: float
    phi_kind: str = "relu"
    scheme: str = "subgaussian"

    def __post_init__(self):
        d, m = self.W.shape
        if self.A.shape != (m, m):
            raise DimensionMismatch(f"A must be {m}x{m}, got {self.A.shape}")
        if self.b.shape != (m,):
            raise DimensionMismatch(f"b must have length {m}, got {self.b.shape}")
        if not 0.0 < self.gamma0 < 1.0:
            raise InvalidConfig(f"gamma0 must lie in (0, 1), got {self.gamma0}")
        if self.phi_kind not in _PHI:
            raise InvalidConfig(f"unknown phi_kind {self.phi_kind!r}")
        if self.scheme not in SCHEMES:
            raise InvalidConfig(f"unknown scheme {self.scheme!r}")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def m(self) -> int:
        return self.W.shape[1]

    @property
    def gamma(self) -> float:
        return self.gamma0 / math.sqrt(self.m)

    def with_A(self, A: np.ndarray) -> "ModelParams":
        """Copy with a new implicit-layer matrix; W and b are shared (frozen)."""
        return dataclasses.replace(self, A=np.asarray(A, dtype=np.float64))


@dataclasses.dataclass(frozen=True, eq=False)
class DataBatch:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise DimensionMismatch("X must be n x d and y of length n")
        norms = np.linalg.norm(self.X, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise InvalidConfig("every row of X must have unit Euclidean norm")
        if np.any(np.abs(self.y) > 1.0):
            raise InvalidConfig("labels must satisfy |y| <= 1")

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclasses.dataclass(frozen=True, eq=False)
class EquilibriumBatch:
    Phi: np.ndarray
    Z: np.ndarray
    iterations: int
    residual: float
    spectral_estimate: float
    history: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0))


class SpectralEstimate(NamedTuple):
    value: float
    converged: bool
    iterations: int
    vector: np.ndarray


def init_params(d, m, gamma0, scheme="subgaussian", seed=0, phi_kind="relu"):
    """Draw (W, A, b) for one of the three initialization schemes.

    ``b`` is uniform on {-1, +1}; ``W`` is standard normal.  ``A`` is standard
    normal (``subgaussian``), half-normal (``half_normal_A``) or diagonal with
    standard normal diagonal (``diagonal_A``).  Each parameter block has its
    own child stream of ``SeedSequence(seed)``.
    """
    if d < 1 or m < 1:
        raise InvalidConfig("d and m must be positive")
    if not 0.0 < gamma0 < 1.0:
        raise InvalidConfig(f"gamma0 must lie in (0, 1), got {gamma0}")
    if scheme not in SCHEMES:
        raise InvalidConfig(f"unknown scheme {scheme!r}")
    rng_W, rng_A, rng_b = (np.random.default_rng(s)
                           for s in np.random.SeedSequence(seed).spawn(3))
    W = rng_W.standard_normal((d, m))
    if scheme == "subgaussian":
        A = rng_A.standard_normal((m, m))
    elif scheme == "half_normal_A":
        A = np.abs(rng_A.standard_normal((m, m)))
    else:
        A = np.diag(rng_A.standard_normal(m))
    b = rng_b.choice(np.array([-1.0, 1.0]), size=m)
    return ModelParams(W=W, A=A, b=b, gamma0=float(gamma0),
                       phi_kind=phi_kind, scheme=scheme)


def features(params: ModelParams, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.d:
        raise DimensionMismatch(f"X has {X.shape[1]} columns, expected d={params.d}")
    return _PHI[params.phi_kind](X @ params.W)


def spectral_norm_estimate(A, tol=1e-6, max_iter=5000, v0=None,
                           seed=0) -> SpectralEstimate:
    """Power iteration on ``A^T A`` for the largest singular value of ``A``.

    Stops once the Rayleigh residual ``||A^T A v - s^2 v|| <= tol * s^2``.
    Pass the previous ``vector`` as ``v0`` to warm start on a slowly moving
    matrix.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch("spectral_norm_estimate expects a square matrix")
    if v0 is None:
        v = np.random.default_rng(seed).standard_normal(A.shape[1])
    else:
        v = np.array(v0, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return SpectralEstimate(0.0, True, 0, v)
    v /= nv
    s2 = 0.0
    for it in range(1, max_iter + 1):
        w = A.T @ (A @ v)
        s2 = float(v @ w)
        if s2 <= 0.0:
            return SpectralEstimate(0.0, True, it, v)
        resid = np.linalg.norm(w - s2 * v)
        v = w / np.linalg.norm(w)
        if resid <= tol * s2:
            return SpectralEstimate(math.sqrt(s2), True, it, v)
    return SpectralEstimate(math.sqrt(s2), False, max_iter, v)


def default_max_iter(contraction, phi_norm, tol):
    # Picard error decays like contraction**k from ||Phi||_F.
    base = 10 * math.ceil(1.0 / (1.0 - contraction))
    if phi_norm > tol and contraction > 0.0:
        base *= max(1, math.ceil(math.log(phi_norm / tol)))
    return min(MAX_ITER_CAP, base)


def solve_equilibrium(params: ModelParams, Phi, tol=DEFAULT_TOL, max_iter=None,
                      Z0=None, spectral=None) -> EquilibriumBatch:
    """Picard iteration ``Z <- relu(gamma Z A + Phi)`` from ``Z0`` (zero by default).

    ``spectral`` may carry a precomputed estimate of ``||A||`` so callers that
    track A along a trajectory can skip the power iteration.
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    if Phi.ndim != 2 or Phi.shape[1] != params.m:
        raise DimensionMismatch(f"Phi must have {params.m} columns")
    if spectral is None:
        spectral = spectral_norm_estimate(params.A).value
    rho = params.gamma * spectral
    if rho >= 1.0:
        raise NonContractive(f"gamma*||A|| = {rho:.6f} >= 1")
    if max_iter is None:
        max_iter = default_max_iter(rho, np.linalg.norm(Phi), tol)

    gA = params.gamma * params.A
    Z = np.zeros_like(Phi) if Z0 is None else np.array(Z0, dtype=np.float64)
    history = []
    for it in range(1, max_iter + 1):
        Z_next = relu(Z @ gA + Phi)
        r = float(np.linalg.norm(Z_next - Z))
        history.append(r)
        Z = Z_next
        if r <= tol:
            return EquilibriumBatch(Phi=Phi, Z=Z, iterations=it, residual=r,
                                    spectral_estimate=rho,
                                    history=np.asarray(history))
    raise MaxIterExceeded(
        f"residual {history[-1]:.3e} > tol {tol:.1e} after {max_iter} iterations")


def closed_form_equilibrium_nonneg(params: ModelParams, Phi) -> np.ndarray:
    """Neumann-series equilibrium ``Z = Phi (I - gamma A)^{-1}``.

    Valid when ``A`` and ``Phi`` are entrywise nonnegative, in which case the
    ReLU is the identity on every pre-activation.
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    if np.any(params.A < 0.0):
        raise PreconditionViolated("A has negative entries")
    if np.any(Phi < 0.0):
        raise PreconditionViolated("Phi has negative entries")
    rho = params.gamma * spectral_norm_estimate(params.A).value
    if rho >= 1.0:
        raise PreconditionViolated(f"gamma*||A|| = {rho:.6f} >= 1")
    M = np.eye(params.m) - params.gamma * params.A
    return np.linalg.solve(M.T, Phi.T).T


def predict(params: ModelParams, Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[-1] != params.m:
        raise DimensionMismatch(f"Z must have {params.m} columns")
    return Z @ params.b / math.sqrt(params.m)


def forward(params: ModelParams, X, tol=DEFAULT_TOL, **kwargs):
    """Features, equilibrium and predictions in one call."""
    eq = solve_equilibrium(params, features(params, X), tol=tol, **kwargs)
    return eq, predict(params, eq.Z)

"""Frozen-kernel (linearized) dynamics and kernel generalization bounds.

With the kernel frozen at initialization the training predictions follow
``du/dt = -H(0)(u - y)`` and any query point follows
``df/dt = k_0(x, X)(y - u(t))``.  Both are solved in closed form through the
eigendecomposition ``H(0) = Q diag(lam) Q^T``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch, SingularKernel
from .implicit import NtkFactors, feature_map
from .model import DataBatch, ModelParams, forward, predict
from .ntk import GramSnapshot, LimitingKernelEstimate, kernel_cross

EIG_FLOOR_REL = 1e-10


@dataclasses.dataclass(frozen=True, eq=False)
class FrozenKernelModel:
    H0_eigvecs: np.ndarray
    H0_eigvals: np.ndarray
    u0: np.ndarray
    y: np.ndarray
    residual0: np.ndarray  # y - u(0)
    floor: float
    alpha_inf: Optional[np.ndarray]  # H(0)^{-1}(y - u(0)); None when singular

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def singular(self):
        return self.alpha_inf is None

    def below_floor(self):
        return self.H0_eigvals[self.H0_eigvals <= self.floor]


@dataclasses.dataclass(frozen=True, eq=False)
class GenBoundReport:
    b_squared: float
    rademacher: float
    leading_term: float
    confidence_term: float
    bound_rhs: float
    delta: float
    n: int
    lambda_spectrum: np.ndarray
    alignment: np.ndarray
    test_error: Optional[float] = None
    initialization_independent: bool = False

    def to_json_dict(self):
        return {
            "b_squared": self.b_squared,
            "rademacher": self.rademacher,
            "bound_rhs": self.bound_rhs,
            "delta": self.delta,
            "lambda_spectrum": [float(v) for v in self.lambda_spectrum],
            "alignment": [float(v) for v in self.alignment],
            "test_error": self.test_error,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_json_dict(), indent=2, sort_keys=False)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def build_frozen_model(H0, u0, y, floor_rel=EIG_FLOOR_REL) -> FrozenKernelModel:
    """Eigendecompose ``H(0)`` and precompute ``alpha = H(0)^{-1}(y - u(0))``.

    ``H0`` may be a :class:`GramSnapshot` or a symmetric matrix.  Eigenvalues
    at or below ``floor_rel * lambda_max`` make the model singular: the finite
    time dynamics still work, anything needing the inverse raises.
    """
    H = H0.H if isinstance(H0, GramSnapshot) else np.asarray(H0, dtype=np.float64)
    u0 = np.asarray(u0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if H.shape != (y.shape[0], y.shape[0]) or u0.shape != y.shape:
        raise DimensionMismatch("H0, u0 and y sizes disagree")
    lam, Q = np.linalg.eigh(0.5 * (H + H.T))
    floor = floor_rel * max(float(lam[-1]), 0.0)
    r0 = y - u0
    alpha = None
    if lam[0] > floor:
        alpha = Q @ ((Q.T @ r0) / lam)
    return FrozenKernelModel(H0_eigvecs=Q, H0_eigvals=lam, u0=u0, y=y,
                             residual0=r0, floor=floor, alpha_inf=alpha)


def _require_invertible(model):
    if model.singular:
        bad = model.below_floor()
        raise SingularKernel(
            f"{bad.size} eigenvalue(s) of H(0) below floor {model.floor:.3e}: "
            f"{np.array2string(bad, precision=3)}", eigenvalues=bad)


def u_hat(model: FrozenKernelModel, t):
    """``u_hat(t) = y - Q exp(-lam t) Q^T (y - u(0))``; ``t`` scalar or 1-d array."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    Q, lam = model.H0_eigvecs, model.H0_eigvals
    coef = Q.T @ model.residual0
    decay = np.exp(-np.outer(t_arr, np.maximum(lam, 0.0)))
    out = model.y - (decay * coef) @ Q.T
    return out[0] if np.ndim(t) == 0 else out


def _integrated_decay(lam, t):
    # int_0^t exp(-lam s) ds, with the removable singularity at lam = 0.
    pos = lam > 0.0
    safe = np.where(pos, lam, 1.0)
    return np.where(pos, -np.expm1(-safe * t) / safe, t)


def f_hat(model: FrozenKernelModel, kernel_row, t, f0_x0):
    """Frozen-kernel prediction at query points.

    ``kernel_row`` is ``k_0(x0, X)`` (length n, or p x n for p queries) and
    ``f0_x0`` the initial network output there.  ``t = np.inf`` gives the
    limit ``f0 + k_0(x0, X) alpha``.
    """
    k = np.asarray(kernel_row, dtype=np.float64)
    if k.shape[-1] != model.n:
        raise DimensionMismatch("kernel row length must equal n")
    if math.isinf(t):
        _require_invertible(model)
        return f0_x0 + k @ model.alpha_inf
    Q, lam = model.H0_eigvecs, model.H0_eigvals
    weights = _integrated_decay(lam, float(t)) * (Q.T @ model.residual0)
    return f0_x0 + (k @ Q) @ weights


def coupling_gap_train(trace, model: FrozenKernelModel) -> np.ndarray:
    """``||u(t) - u_hat(t)||`` at each record point of a training trace."""
    U = np.asarray(trace.u)
    return np.linalg.norm(U - u_hat(model, trace.times), axis=1)


def gen_bound(model: FrozenKernelModel, delta, n=None, test_error=None) -> GenBoundReport:
    """Initialization-sensitive kernel bound built from ``B^2 = r0^T H(0)^{-1} r0``."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    _require_invertible(model)
    n = model.n if n is None else int(n)
    Q, lam = model.H0_eigvecs, model.H0_eigvals
    align = (Q.T @ model.residual0) ** 2
    b2 = float(np.sum(align / lam))
    trace_H = float(np.sum(lam))
    return _report(b2, trace_H, lam, align, delta, n, math.log(1.0 / delta), test_error)


def gen_bound_ntk_inf(H_inf, y, delta, n=None, floor_rel=EIG_FLOOR_REL,
                      test_error=None) -> GenBoundReport:
    """Initialization-free variant with ``B^2 = y^T (H_inf)^{-1} y`` and a
    ``log(n / delta)`` confidence term."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    H = H_inf.H_inf if isinstance(H_inf, LimitingKernelEstimate) else np.asarray(H_inf)
    y = np.asarray(y, dtype=np.float64)
    model = build_frozen_model(H, np.zeros_like(y), y, floor_rel=floor_rel)
    _require_invertible(model)
    n = model.n if n is None else int(n)
    Q, lam = model.H0_eigvecs, model.H0_eigvals
    align = (Q.T @ y) ** 2
    b2 = float(np.sum(align / lam))
    rep = _report(b2, float(np.sum(lam)), lam, align, delta, n,
                  math.log(n / delta), test_error)
    return dataclasses.replace(rep, initialization_independent=True)


def _report(b2, trace_H, lam, align, delta, n, log_term, test_error):
    b2 = max(b2, 0.0)
    lead = math.sqrt(b2 / n)
    conf = math.sqrt(log_term / n)
    return GenBoundReport(
        b_squared=b2, rademacher=math.sqrt(b2) / n * math.sqrt(max(trace_H, 0.0)),
        leading_term=lead, confidence_term=conf, bound_rhs=lead + conf,
        delta=float(delta), n=n, lambda_spectrum=lam.copy(), alignment=align,
        test_error=test_error)


def ramp_loss(f, y):
    """``min(1, max(0, 1 - y f))``: 1-Lipschitz in f, bounded in [0, 1]."""
    return np.clip(1.0 - np.asarray(y) * np.asarray(f), 0.0, 1.0)


def squared_capped_loss(f, y):
    # (f - y)^2 / 4 is 1-Lipschitz while |f - y| <= 2, i.e. below the cap.
    return np.minimum(1.0, (np.asarray(f) - np.asarray(y)) ** 2 / 4.0)


LOSSES = {"ramp": ramp_loss, "squared_capped": squared_capped_loss}


def evaluate_test(predictor, test_batch: DataBatch, loss_kind="ramp") -> float:
    """Mean bounded loss of a predictor on a test batch.

    ``predictor`` is either trained :class:`ModelParams` (evaluated through
    the equilibrium) or a callable mapping an input matrix to predictions.
    """
    if isinstance(predictor, ModelParams):
        _, f = forward(predictor, test_batch.X)
    else:
        f = np.asarray(predictor(test_batch.X), dtype=np.float64)
    return float(np.mean(LOSSES[loss_kind](f, test_batch.y)))


def kernel_machine_predictor(model: FrozenKernelModel, params0: ModelParams,
                             train_factors0: NtkFactors, t=math.inf,
                             method="iterative") -> Callable:
    """Callable ``X -> f_hat_t(X)`` built on the initial kernel and outputs.

    ``method`` selects how the query points' backward systems are solved (see
    ``ntk_factors``); the iterative solver is far cheaper for many queries.
    """

    def _predict(X):
        probe = feature_map(params0, X, method=method)
        k = kernel_cross(params0, train_factors0, probe)
        f0 = predict(params0, probe.z)
        return f_hat(model, k, t, f0)

    return _predict

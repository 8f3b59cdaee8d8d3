"""Gradient flow on the implicit layer ``dA/dt = -dL/dA`` with W and b frozen.

Every right-hand-side evaluation re-solves the equilibrium (warm started from
the previous one) and the transposed backward system, so the integrator
follows the exact continuous-time flow up to discretization error.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import warnings

import numpy as np

from .errors import NonContractive, StepRejected
from .implicit import activation_pattern, loss_grad_A, ntk_factors
from .model import DataBatch, ModelParams, features, predict, solve_equilibrium, spectral_norm_estimate
from .ntk import gram, gram_drift

log = logging.getLogger(__name__)

TRAIN_TOL = 1e-12
METHODS = ("euler", "rk4", "exponential")
# lambda_min(H(0)) at or below this fraction of lambda_max counts as zero.
SINGULAR_REL = 1e-12
TRACE_COLUMNS = ("t", "loss", "res_norm", "lambda_min", "h_drift_spec",
                 "h_drift_fro", "a_drift", "z_drift", "guard", "envelope")


@dataclasses.dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    params: ModelParams
    y: np.ndarray
    equilibrium: object
    factors: object
    u: np.ndarray
    loss: float
    grad: np.ndarray
    spectral: object  # SpectralEstimate of ||A||, reused as a warm start


def evaluate(params: ModelParams, Phi, y, t=0.0, previous: FlowState = None,
             tol=TRAIN_TOL) -> FlowState:
    """Forward solve, backward factors, predictions and loss gradient at ``params``."""
    v0 = previous.spectral.vector if previous is not None else None
    spec = spectral_norm_estimate(params.A, v0=v0)
    Z0 = previous.equilibrium.Z if previous is not None else None
    eq = solve_equilibrium(params, Phi, tol=tol, Z0=Z0, spectral=spec.value)
    pattern = activation_pattern(params, eq.Z, Phi)
    warm = previous.factors.x if previous is not None else None
    factors = ntk_factors(params, eq, pattern, method="iterative", warm=warm,
                          tol=tol)
    u = predict(params, eq.Z)
    r = u - y
    G = loss_grad_A(params, eq, factors, u, y).G
    return FlowState(t=float(t), params=params, y=y, equilibrium=eq,
                     factors=factors, u=u, loss=0.5 * float(r @ r), grad=G,
                     spectral=spec)


def initial_state(data: DataBatch, params0: ModelParams, tol=TRAIN_TOL) -> FlowState:
    return evaluate(params0, features(params0, data.X), data.y, tol=tol)


def _integrated_residual(params, factors, r0, dt):
    """``int_0^dt r(s) ds`` for ``dr/ds = -H r``, ``r(0) = r0``, with ``H`` the
    tangent kernel built from ``factors``."""
    lam, V = np.linalg.eigh(gram(params, factors).H)
    lam = np.maximum(lam, 0.0)
    x = lam * dt
    weight = np.where(x > 1e-8, -np.expm1(-x) / np.where(lam > 0, lam, 1.0),
                      dt * (1.0 - 0.5 * x))
    return V @ (weight * (V.T @ r0))


def _kernel_step(params, factors, r0, dt):
    """``A`` displacement of the linear flow with the kernel frozen at ``factors``."""
    c = _integrated_residual(params, factors, r0, dt)
    scale = params.gamma / math.sqrt(params.m)
    return -scale * ((factors.z * c[:, None]).T @ factors.J)


def flow_step(state: FlowState, dt, method="rk4", tol=TRAIN_TOL) -> FlowState:
    """Advance ``A`` by ``dt`` with explicit Euler, classical RK4 or an
    exponential midpoint step.

    The exponential step treats the residual exactly under a frozen tangent
    kernel, ``c = H^{-1}(I - exp(-dt H)) r``, and moves ``A`` by
    ``-(gamma/sqrt(m)) sum_i c_i outer(z_i, J_i)``.  A half step with the
    kernel at ``t`` supplies the midpoint kernel used for the full step, which
    makes the scheme second order.  It is stable for any ``dt``; explicit
    methods need ``dt < 2.8 / lambda_max``, which is prohibitive when
    ``lambda_max / lambda_min`` is large.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if not np.any(state.grad):
        return dataclasses.replace(state, t=state.t + dt)
    Phi = state.equilibrium.Phi
    A = state.params.A
    p = state.params

    if method == "euler":
        A_new = A - dt * state.grad
    elif method == "rk4":
        k1 = state.grad
        s2 = evaluate(p.with_A(A - 0.5 * dt * k1), Phi, state.y, previous=state, tol=tol)
        k2 = s2.grad
        s3 = evaluate(p.with_A(A - 0.5 * dt * k2), Phi, state.y, previous=s2, tol=tol)
        k3 = s3.grad
        s4 = evaluate(p.with_A(A - dt * k3), Phi, state.y, previous=s3, tol=tol)
        k4 = s4.grad
        A_new = A - dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    elif method == "exponential":
        r0 = state.u - state.y
        mid = evaluate(p.with_A(A + _kernel_step(p, state.factors, r0, 0.5 * dt)), Phi,
                       state.y, previous=state, tol=tol)
        A_new = A + _kernel_step(mid.params, mid.factors, r0, dt)
    else:
        raise ValueError(f"unknown integrator {method!r}")

    new = evaluate(p.with_A(A_new), Phi, state.y, t=state.t + dt,
                   previous=state, tol=tol)
    if new.loss > state.loss + 1e-9 * (1.0 + state.loss):
        raise StepRejected(f"loss rose from {state.loss:.6e} to {new.loss:.6e} (dt={dt:.3e})")
    return new


@dataclasses.dataclass(eq=False)
class FlowTrace:
    """Append-only record of a training run."""

    loss0: float
    H0: object
    dt: float
    records: dict = dataclasses.field(
        default_factory=lambda: {c: [] for c in TRACE_COLUMNS})
    u: list = dataclasses.field(default_factory=list)
    probe_u: list = dataclasses.field(default_factory=list)
    steps: int = 0
    rejected: int = 0
    final_state: FlowState = None

    def __getattr__(self, name):
        records = self.__dict__.get("records")
        if records is not None and name in records:
            return np.asarray(records[name])
        raise AttributeError(name)

    @property
    def times(self):
        return np.asarray(self.records["t"])

    def __len__(self):
        return len(self.records["t"])

    def append(self, **row):
        for c in TRACE_COLUMNS:
            self.records[c].append(float(row[c]))


def _record(trace, state, state0, probe_fn):
    snap = gram(state.params, state.factors, t=state.t)
    spec, fro = gram_drift(snap, trace.H0)
    lam = snap.lambda_min
    prev_bar = trace.records["lambda_min"]
    lam_bar = min([lam] + prev_bar)
    env = trace.loss0 * math.exp(-max(lam_bar, 0.0) * state.t) if lam_bar > 0 else trace.loss0
    if trace.records["envelope"]:
        env = min(env, trace.records["envelope"][-1])
    trace.append(
        t=state.t, loss=state.loss, res_norm=math.sqrt(2.0 * state.loss),
        lambda_min=lam, h_drift_spec=spec, h_drift_fro=fro,
        a_drift=np.linalg.norm(state.params.A - state0.params.A),
        z_drift=np.linalg.norm(state.equilibrium.Z - state0.equilibrium.Z),
        guard=state.params.gamma * state.spectral.value, envelope=env)
    trace.u.append(state.u.copy())
    if probe_fn is not None:
        trace.probe_u.append(probe_fn(state))


class _ProbeTracker:
    """Network outputs on held-out inputs, warm-starting their equilibria."""

    def __init__(self, params0, X, tol):
        self.Phi = features(params0, X)
        self.Z = None
        self.tol = tol

    def __call__(self, state):
        eq = solve_equilibrium(state.params, self.Phi, tol=self.tol, Z0=self.Z,
                               spectral=state.spectral.value)
        self.Z = eq.Z
        return predict(state.params, eq.Z)


def train(data: DataBatch, params0: ModelParams, t_end, dt=None, record_every=1,
          method="rk4", probes=None, tol=TRAIN_TOL, max_halvings=30,
          stop_loss=None) -> FlowTrace:
    """Integrate the flow from ``params0`` up to ``t_end``.

    ``dt`` defaults to ``0.1 / lambda_max(H(0))``.  Rejected steps are retried
    with half the step size.  ``probes`` (unit rows) are evaluated at every
    record point into ``trace.probe_u``.  With ``stop_loss`` the run ends at
    the first step whose loss is below it, which is always recorded.

    On :class:`NonContractive` the exception carries the partial trace as
    ``exc.trace``, ending with the last accepted state.
    """
    state0 = initial_state(data, params0, tol=tol)
    H0 = gram(params0, state0.factors, t=0.0)
    if H0.lambda_min <= SINGULAR_REL * max(H0.lambda_max, 0.0):
        warnings.warn(f"lambda_min(H(0)) = {H0.lambda_min:.3e} is numerically zero; "
                      "linear convergence is not guaranteed", RuntimeWarning)
    if dt is None:
        dt = 0.1 / H0.lambda_max
    trace = FlowTrace(loss0=state0.loss, H0=H0, dt=float(dt))
    probe_fn = _ProbeTracker(params0, probes, tol) if probes is not None else None
    _record(trace, state0, state0, probe_fn)

    state = state0
    n_steps = max(1, int(math.ceil(t_end / dt - 1e-9)))
    try:
        for k in range(1, n_steps + 1):
            target = min(k * dt, t_end)
            state = _advance(state, target - state.t, method, tol, max_halvings, trace)
            trace.steps = k
            stop = stop_loss is not None and state.loss < stop_loss
            if k % record_every == 0 or k == n_steps or stop:
                _record(trace, state, state0, probe_fn)
            if stop:
                break
    except NonContractive as exc:
        # keep the last accepted (sub)step so the partial trace ends where the run stopped
        state = getattr(exc, "state", state)
        if state.t > trace.records["t"][-1]:
            _record(trace, state, state0, probe_fn)
        exc.trace = trace
        trace.final_state = state
        raise
    trace.final_state = state
    return trace


def _advance(state, h, method, tol, max_halvings, trace):
    """Cover a time span ``h``, splitting it after a rejected step."""
    remaining = h
    sub = h
    halvings = 0
    while remaining > 1e-15 * max(1.0, h):
        step = min(sub, remaining)
        try:
            state = flow_step(state, step, method=method, tol=tol)
        except (StepRejected, NonContractive) as exc:
            # a trial step that overshoots the contraction region is retried
            # shorter; the error only surfaces once halving stops helping
            trace.rejected += 1
            halvings += 1
            if halvings > max_halvings:
                exc.state = state  # last accepted sub-step
                raise
            sub = step / 2.0
            continue
        remaining -= step
    return state


def du_dt_consistency(state: FlowState, h, tol=1e-14) -> float:
    """``||(u(t+h) - u(t-h)) / 2h + H(t)(u(t) - y)||`` with fresh forward solves."""
    p = state.params
    Phi = state.equilibrium.Phi
    if not np.any(state.grad):
        return 0.0
    plus = solve_equilibrium(p.with_A(p.A - h * state.grad), Phi, tol=tol)
    minus = solve_equilibrium(p.with_A(p.A + h * state.grad), Phi, tol=tol)
    du = (predict(p, plus.Z) - predict(p, minus.Z)) / (2.0 * h)
    H = gram(p, state.factors).H
    return float(np.linalg.norm(du + H @ (state.u - state.y)))


def write_trace_csv(trace: FlowTrace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        cols = [trace.records[c] for c in TRACE_COLUMNS]
        for row in zip(*cols):
            writer.writerow([repr(float(v)) for v in row])

import functools
import sys

import numpy as np
import pytest

import deqflow.model
from deqflow.model import DataBatch, init_params

_original_solve = deqflow.model.solve_equilibrium


class SolveAudit:
    """Checks ``||Z||_F <= ||Phi||_F / (1 - gamma ||A||)`` on every equilibrium solve."""

    solves = 0
    violations = 0

    @classmethod
    def wrap(cls, fn):
        @functools.wraps(fn)
        def audited(params, Phi, *args, **kwargs):
            eq = fn(params, Phi, *args, **kwargs)
            cls.solves += 1
            rho = eq.spectral_estimate
            bound = np.linalg.norm(eq.Phi) / (1.0 - rho)
            if np.linalg.norm(eq.Z) > bound * (1 + 1e-6) + 10 * eq.residual:
                cls.violations += 1
                raise AssertionError(
                    f"norm bound violated: ||Z|| = {np.linalg.norm(eq.Z):.6e} > {bound:.6e}")
            return eq

        return audited


def _install_audit():
    audited = SolveAudit.wrap(_original_solve)
    for name, mod in list(sys.modules.items()):
        if name == "deqflow" or name.startswith("deqflow."):
            if getattr(mod, "solve_equilibrium", None) is _original_solve:
                setattr(mod, "solve_equilibrium", audited)
    return audited


def pytest_configure(config):
    import deqflow.experiments  # noqa: F401  (load every module before patching)
    import deqflow.flow  # noqa: F401
    import deqflow.kernel_machine  # noqa: F401

    _install_audit()
    # The oracles module imports solve_equilibrium by name as well.
    import oracles

    oracles.solve_equilibrium = deqflow.model.solve_equilibrium


@pytest.fixture
def solve_audit():
    return SolveAudit


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def small_problem(seed, n=4, d=3, m=6, scheme="subgaussian", phi_kind="relu", gamma0=0.4):
    rng = np.random.default_rng((seed, 99))
    X = unit_rows(rng, n, d)
    y = rng.uniform(-1, 1, n)
    params = init_params(d, m, gamma0, scheme, seed=seed, phi_kind=phi_kind)
    return params, DataBatch(X=X, y=y)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


class AcceptanceReport:
    """One PASS/FAIL line per acceptance criterion, printed at the end of the run."""

    lines = {}

    @classmethod
    def record(cls, number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        cls.lines[number] = line
        print(line)
        return passed


@pytest.fixture
def acceptance():
    return AcceptanceReport


def pytest_terminal_summary(terminalreporter):
    if AcceptanceReport.lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(AcceptanceReport.lines):
            terminalreporter.write_line(AcceptanceReport.lines[number])
    terminalreporter.write_line(
        f"equilibrium norm audit: {SolveAudit.solves} solves, {SolveAudit.violations} violations")

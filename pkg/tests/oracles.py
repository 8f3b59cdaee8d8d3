"""Independent reference computations used by the tests.

Nothing here calls the implicit-derivative code under test: gradients come
from re-solving the equilibrium at perturbed A, linear ODEs from a
hand-written RK4 loop, expectations from Monte Carlo and integrals from
adaptive quadrature.
"""

import math

import numpy as np
import scipy.integrate

from deqflow.model import features, predict, solve_equilibrium


def fixed_point_brute(params, Phi, iters=5000):
    """Equilibrium by plain Picard sweeps with no stopping test."""
    Z = np.zeros_like(Phi)
    gA = params.gamma * params.A
    for _ in range(iters):
        Z = np.maximum(Z @ gA + Phi, 0.0)
    return Z


def loss_at(params, X, y, A):
    p = params.with_A(A)
    eq = solve_equilibrium(p, features(p, X), tol=1e-14)
    r = predict(p, eq.Z) - y
    return 0.5 * float(r @ r)


def fd_grad(params, X, y, h=1e-5):
    """Central differences of the loss over every entry of A."""
    A = params.A
    G = np.zeros_like(A)
    for r in range(A.shape[0]):
        for s in range(A.shape[1]):
            E = np.zeros_like(A)
            E[r, s] = h
            G[r, s] = (loss_at(params, X, y, A + E) - loss_at(params, X, y, A - E)) / (2 * h)
    return G


def fd_equilibrium_direction(params, X, dA, h=1e-5):
    Phi = features(params, X)
    plus = solve_equilibrium(params.with_A(params.A + h * dA), Phi, tol=1e-14).Z
    minus = solve_equilibrium(params.with_A(params.A - h * dA), Phi, tol=1e-14).Z
    return (plus - minus) / (2 * h)


def fd_output_direction(params, x, dA, h=1e-5):
    Phi = features(params, np.atleast_2d(x))
    f = []
    for s in (1.0, -1.0):
        p = params.with_A(params.A + s * h * dA)
        f.append(predict(p, solve_equilibrium(p, Phi, tol=1e-14).Z))
    return (f[0] - f[1]) / (2 * h)


def pattern_stable(params, X, dA, h):
    """True when no pre-activation changes sign between A - h dA and A + h dA."""
    Phi = features(params, X)
    signs = []
    for s in (-1.0, 0.0, 1.0):
        p = params.with_A(params.A + s * h * dA)
        Z = solve_equilibrium(p, Phi, tol=1e-14).Z
        signs.append(p.gamma * Z @ p.A + Phi > 0)
    return all(np.array_equal(signs[1], s) for s in signs)


def rk4_linear(H, y, u0, t, steps=4000):
    """Classical RK4 for du/dt = -H (u - y) up to time t."""
    u = np.array(u0, dtype=float)
    h = t / steps
    f = lambda v: -H @ (v - y)
    for _ in range(steps):
        k1 = f(u)
        k2 = f(u + 0.5 * h * k1)
        k3 = f(u + 0.5 * h * k2)
        k4 = f(u + h * k3)
        u = u + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


def f_hat_quadrature(H, y, u0, k_row, f0, t):
    """f0 + int_0^t k (y - u_hat(s)) ds with u_hat from scipy's expm."""
    import scipy.linalg

    r0 = y - u0

    def integrand(s):
        return k_row @ (scipy.linalg.expm(-H * s) @ r0)

    val, _ = scipy.integrate.quad_vec(integrand, 0.0, t, epsabs=1e-12, epsrel=1e-12)
    return f0 + val


def relu_kernel_mc(cos_angle, draws, seed=0):
    """Monte-Carlo E[relu(g1) relu(g2)] for unit vectors at the given cosine."""
    rng = np.random.default_rng(seed)
    g1 = rng.standard_normal(draws)
    g2 = cos_angle * g1 + math.sqrt(max(0.0, 1 - cos_angle**2)) * rng.standard_normal(draws)
    v = np.maximum(g1, 0) * np.maximum(g2, 0)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(draws))


def loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])

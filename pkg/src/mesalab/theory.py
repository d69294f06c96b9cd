"""Closed-form training theory: flow ODE, surrogate objective, fixed points, probes.

With moments kappa1 = E[x_j^4], kappa2 = E[x_j^6], kappa3 = sum_{r!=j} E[x_j^2 x_r^4]
of the initial token and training length T, define

    c1 = (T-2) kappa2 + kappa3 * sum_{t=2}^{T-1} 1/(t-1),     c2 = (T-2) kappa1.

The diagonal scalars (a, b) of the two driving parameter blocks then follow the
gradient flow

    da/dtau = -a b^2 c1 + b c2,     db/dtau = -a^2 b c1 + a c2,

which is exactly gradient flow on the non-convex surrogate
l(a, b) = (c2 - c1 a b)^2 / (2 c1).  Its global minima satisfy a b = c2/c1,
a^2 - b^2 is conserved along trajectories, and the squared gradient norm equals
2 c1 (a^2 + b^2) (l - min l) pointwise, so flow from any a0 b0 != 0 start
reaches the fixed-point product.  The all-ones-token case with off-diagonal
gradient masking obeys the same system with synthetic moments (1, 1, d-1).
For that token without masking, the closed-form population gradients of the
two driving blocks are dense; ones_gradient_probe evaluates them in full.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from mesalab.ar_data import Gaussian, Moments, closed_form_moments


@dataclass(frozen=True)
class FlowCoefficients:
    c1: float
    c2: float
    T: int
    moments: Moments

    def __post_init__(self):
        if self.c1 <= 0:
            raise ValueError("c1 must be positive for the supported distributions")


@dataclass(frozen=True)
class FlowState:
    a: float
    b: float
    tau: float


@dataclass
class FlowResult:
    """Integrated trajectory plus convergence verdict."""

    tau: np.ndarray
    a: np.ndarray
    b: np.ndarray
    coeffs: FlowCoefficients
    converged: bool
    steps: int

    @property
    def ab(self) -> np.ndarray:
        return self.a * self.b

    @property
    def final(self) -> FlowState:
        return FlowState(float(self.a[-1]), float(self.b[-1]), float(self.tau[-1]))


def harmonic_number(m: int, power: int = 1) -> float:
    """sum_{k=1}^{m} 1/k^power, evaluated directly."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    return float(np.sum(1.0 / np.arange(1, m + 1, dtype=float) ** power))


def flow_coefficients(moments: Moments, T: int) -> FlowCoefficients:
    if T < 3:
        raise ValueError("T must be >= 3")
    h = harmonic_number(T - 2)
    c1 = (T - 2) * moments.kappa2 + moments.kappa3 * h
    c2 = (T - 2) * moments.kappa1
    return FlowCoefficients(c1, c2, T, moments)


def fixed_point_ab(moments: Moments, T: int) -> float:
    """Limiting product of the diagonal scalars: c2/c1, i.e.
    kappa1 / (kappa2 + kappa3/(T-2) * sum_{t=2}^{T-1} 1/(t-1))."""
    coeffs = flow_coefficients(moments, T)
    return coeffs.c2 / coeffs.c1


def fixed_point_ab_ones(d: int, T: int) -> float:
    """All-ones token with masked off-diagonal gradients:
    1 / (1 + (d-1)/(T-2) * sum_{t=2}^{T-1} 1/(t-1)).  Equals 1 when d = 1."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return fixed_point_ab(Moments(1.0, 1.0, float(d - 1), d), T)


def ones_flow_coefficients(d: int, T: int) -> FlowCoefficients:
    """Synthetic coefficients reproducing the masked all-ones dynamics."""
    return flow_coefficients(Moments(1.0, 1.0, float(d - 1), d), T)


def ode_rhs(state: FlowState, coeffs: FlowCoefficients) -> tuple[float, float]:
    """(da/dtau, db/dtau) of the diagonal-scalar gradient flow."""
    a, b = state.a, state.b
    da = -a * b * b * coeffs.c1 + b * coeffs.c2
    db = -a * a * b * coeffs.c1 + a * coeffs.c2
    return da, db


def surrogate_loss(a: float, b: float, coeffs: FlowCoefficients) -> float:
    """(c2 - c1 a b)^2 / (2 c1); zero exactly on the fixed-point hyperbola."""
    r = coeffs.c2 - coeffs.c1 * a * b
    return r * r / (2.0 * coeffs.c1)


@dataclass(frozen=True)
class PLCheck:
    lhs: float  # squared gradient norm of the surrogate
    rhs: float  # 2 c1 (a^2 + b^2) (loss - min loss)
    holds: bool
    roundoff_floor: float = 0.0  # absolute fp noise floor of either side


def pl_check(a: float, b: float, coeffs: FlowCoefficients) -> PLCheck:
    """Gradient-domination check; the two sides are equal identically.

    Near the fixed-point hyperbola both sides are (a^2+b^2) r^2 with
    r = c2 - c1 a b ~ 0, so the comparison needs the roundoff floor of r
    in addition to the 1e-12 relative band.
    """
    da, db = ode_rhs(FlowState(a, b, 0.0), coeffs)
    lhs = da * da + db * db
    rhs = 2.0 * coeffs.c1 * (a * a + b * b) * surrogate_loss(a, b, coeffs)
    eps_r = 2.3e-16 * (abs(coeffs.c2) + abs(coeffs.c1 * a * b))
    floor = 64.0 * (1.0 + a * a + b * b) * eps_r * eps_r
    return PLCheck(lhs, rhs, lhs - rhs >= -(1e-12 * abs(lhs) + floor), floor)


def integrate_flow(
    a0: float,
    b0: float,
    coeffs: FlowCoefficients,
    dt: float | None = None,
    max_steps: int = 2_000_000,
    tol: float = 1e-6,
    record_every: int = 10,
) -> FlowResult:
    """Classical explicit fourth-order integration of the flow.

    Fixed step dt (default 1e-3/c1, which keeps the stiffest term tame);
    stops once |ab - c2/c1| < tol, else reports non-convergence after
    max_steps (e.g. the exactly stationary origin never moves).
    """
    if dt is None:
        dt = 1e-3 / coeffs.c1
    if dt <= 0:
        raise ValueError("dt must be positive")
    target = coeffs.c2 / coeffs.c1

    def rhs(a, b):
        return (
            -a * b * b * coeffs.c1 + b * coeffs.c2,
            -a * a * b * coeffs.c1 + a * coeffs.c2,
        )

    taus = [0.0]
    avals = [a0]
    bvals = [b0]
    a, b = a0, b0
    converged = abs(a * b - target) < tol
    step = 0
    while not converged and step < max_steps:
        k1a, k1b = rhs(a, b)
        k2a, k2b = rhs(a + 0.5 * dt * k1a, b + 0.5 * dt * k1b)
        k3a, k3b = rhs(a + 0.5 * dt * k2a, b + 0.5 * dt * k2b)
        k4a, k4b = rhs(a + dt * k3a, b + dt * k3b)
        a += dt * (k1a + 2 * k2a + 2 * k3a + k4a) / 6.0
        b += dt * (k1b + 2 * k2b + 2 * k3b + k4b) / 6.0
        step += 1
        converged = abs(a * b - target) < tol
        if step % record_every == 0 or converged:
            taus.append(step * dt)
            avals.append(a)
            bvals.append(b)
    if len(taus) == 1 or taus[-1] != step * dt:
        taus.append(step * dt)
        avals.append(a)
        bvals.append(b)
    return FlowResult(
        np.array(taus), np.array(avals), np.array(bvals), coeffs, converged, step
    )


def gaussian_ratio_prediction(sigma: float, T_tr: int, d: int = 5) -> float:
    """Predicted mean elementwise ratio yhat_j / (W x)_j for Gaussian tokens.

    Equals fixed_point_ab(gaussian moments, T_tr) * sigma^2; sigma cancels,
    and the value tends to 1/5 as T_tr grows.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ab = fixed_point_ab(closed_form_moments(Gaussian(sigma, d)), T_tr)
    return ab * sigma * sigma


def ones_gradient_probe(a: float, b: float, d: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form population gradients of the two driving blocks for the
    all-ones token at diagonal parameters (a, b), without masking.

    Returns (gradient of kq32, gradient of pv12), each d x d.  Diagonal
    entries reproduce the masked dynamics; off-diagonal entries are generically
    nonzero, which is exactly why the unmasked flow leaves the diagonal
    manifold for this token.
    """
    if T < 3:
        raise ValueError("T must be >= 3")
    h1 = harmonic_number(T - 2)
    h2 = harmonic_number(T - 2, power=2)
    diag_kq = a * b * b * ((T - 2) + (d - 1) * h1) - b * (T - 2)
    off_kq = a * b * b * (2.0 * h1 + (d - 2) * h2) - b * h1
    diag_pv = a * a * b * ((T - 2) + (d - 1) * h1) - a * (T - 2)
    off_pv = a * a * b * h1
    g_kq = np.full((d, d), off_kq)
    np.fill_diagonal(g_kq, diag_kq)
    g_pv = np.full((d, d), off_pv)
    np.fill_diagonal(g_pv, diag_pv)
    return g_kq, g_pv


FLOW_HEADER = "tau,a,b,ab,surrogate_loss"


def save_flow_csv(path: Union[str, Path], result: FlowResult) -> None:
    lines = [FLOW_HEADER]
    for tau, a, b in zip(result.tau, result.a, result.b):
        tau, a, b = float(tau), float(a), float(b)
        lines.append(
            f"{tau!r},{a!r},{b!r},{a * b!r},{surrogate_loss(a, b, result.coeffs)!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")

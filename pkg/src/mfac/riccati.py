"""Stationary Riccati system of the discounted mean-field LQ problem.

The optimal value of an :class:`~mfac.models.LQRModel` is the quadratic

    V(s, mu) = -((s - mbar)' K (s - mbar) + mbar' Lambda mbar + 2 Y' s + R)

and the optimal policy is Gaussian with affine mean.  ``K`` and ``Lambda``
solve two discount-shifted algebraic Riccati equations, which are solved
here by Kleinman-Newton iteration from a stabilizing gain.  ``Y`` follows
from one linear solve and ``R`` from a scalar formula that carries the
entropy constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _linalg
from .exceptions import RiccatiConvergenceError, RiccatiSolvabilityError
from .models import LQRModel, check_lqr_assumptions
from .policy import AffineFeatureMap, GaussianPolicy, population_mean

__all__ = [
    "RiccatiSolution",
    "HurwitzReport",
    "solve_riccati",
    "riccati_residuals",
    "optimal_policy",
    "optimal_value",
    "verify_hurwitz",
    "discount_diagnostics",
    "reference_targets",
]

NEWTON_TOL = 1e-12
NEWTON_MAX_STEPS = 200


@dataclass(frozen=True)
class RiccatiSolution:
    K: np.ndarray
    Lambda: np.ndarray
    Y: np.ndarray
    R: float
    S: np.ndarray
    U: np.ndarray
    W: np.ndarray
    O: np.ndarray  # noqa: E741
    newton_steps: tuple = (0, 0)
    scalar_check: float | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "Lambda": self.Lambda.tolist(),
            "Y": self.Y.tolist(),
            "R": self.R,
            "S": self.S.tolist(),
            "U": self.U.tolist(),
            "W": self.W.tolist(),
            "O": self.O.tolist(),
            "newton_steps": list(self.newton_steps),
        }


def _k_operator_parts(spec: LQRModel, K):
    S = spec.N + spec.F.T @ K @ spec.F
    U = spec.I + spec.B.T @ K + spec.F.T @ K @ spec.D
    return S, U


def _lambda_parts(spec: LQRModel, K, Lam):
    dd = spec.D + spec.Dbar
    S = spec.N + spec.F.T @ K @ spec.F
    W = spec.I + spec.B.T @ Lam + spec.F.T @ K @ dd
    return S, W


def _newton_k(spec, a_beta, theta):
    """Policy iteration for the representative equation."""
    K = None
    for step in range(1, NEWTON_MAX_STEPS + 1):
        a_cl = a_beta + spec.B @ theta
        c_cl = spec.D + spec.F @ theta
        q_cl = spec.Q + theta.T @ spec.N @ theta + theta.T @ spec.I + spec.I.T @ theta
        K_new = _linalg.solve_generalized_lyapunov(a_cl, q_cl, c_cl)
        S, U = _k_operator_parts(spec, K_new)
        theta = -np.linalg.solve(S, U)
        if K is not None and np.abs(K_new - K).max() <= NEWTON_TOL * (1 + np.abs(K_new).max()):
            return K_new, step
        K = K_new
    raise RiccatiConvergenceError(
        f"Newton iteration for K did not converge in {NEWTON_MAX_STEPS} steps",
        residual=float(np.abs(_k_residual(spec, K)).max()),
    )


def _newton_lambda(spec, a_tilde, K, theta):
    dd = spec.D + spec.Dbar
    S = spec.N + spec.F.T @ K @ spec.F
    cross = spec.I + spec.F.T @ K @ dd
    base = spec.Q + spec.Qbar + dd.T @ K @ dd
    Lam = None
    for step in range(1, NEWTON_MAX_STEPS + 1):
        a_cl = a_tilde + spec.B @ theta
        q_cl = base + theta.T @ S @ theta + theta.T @ cross + cross.T @ theta
        L_new = _linalg.solve_generalized_lyapunov(a_cl, q_cl)
        theta = -np.linalg.solve(S, cross + spec.B.T @ L_new)
        if Lam is not None and np.abs(L_new - Lam).max() <= NEWTON_TOL * (1 + np.abs(L_new).max()):
            return L_new, step
        Lam = L_new
    raise RiccatiConvergenceError(
        f"Newton iteration for Lambda did not converge in {NEWTON_MAX_STEPS} steps",
        residual=float(np.abs(_lambda_residual(spec, K, Lam)).max()),
    )


def _k_residual(spec, K):
    beta = spec.discount
    S, U = _k_operator_parts(spec, K)
    return (
        spec.Q + K @ spec.A + spec.A.T @ K + spec.D.T @ K @ spec.D
        - U.T @ np.linalg.solve(S, U) - beta * K
    )


def _lambda_residual(spec, K, Lam):
    beta = spec.discount
    dd = spec.D + spec.Dbar
    at = spec.A + spec.Abar
    S, W = _lambda_parts(spec, K, Lam)
    return (
        spec.Q + spec.Qbar + Lam @ at + at.T @ Lam + dd.T @ K @ dd
        - W.T @ np.linalg.solve(S, W) - beta * Lam
    )


def _scalar_roots(spec: LQRModel):
    """Closed-form positive roots when ``d = m = 1`` and ``F = 0``."""
    a, abar, b = spec.A[0, 0], spec.Abar[0, 0], spec.B[0, 0]
    dd, ddb = spec.D[0, 0], spec.Dbar[0, 0]
    q, qb, n, i = spec.Q[0, 0], spec.Qbar[0, 0], spec.N[0, 0], spec.I[0, 0]
    beta = spec.discount

    def positive_root(c2, c1, c0):
        # c2 x^2 + c1 x + c0 = 0 with c2 < 0 < c0 (or c2 = 0)
        if c2 == 0:
            return -c0 / c1
        disc = c1 * c1 - 4 * c2 * c0
        roots = [(-c1 + sgn * math.sqrt(disc)) / (2 * c2) for sgn in (1, -1)]
        return max(roots)

    k = positive_root(-b * b / n, 2 * a - beta + dd * dd - 2 * i * b / n, q - i * i / n)
    lam = positive_root(
        -b * b / n,
        2 * (a + abar) - beta - 2 * i * b / n,
        q + qb + (dd + ddb) ** 2 * k - i * i / n,
    )
    return k, lam


def solve_riccati(spec: LQRModel, diagnostics=None) -> RiccatiSolution:
    """Stabilizing solution of the stationary mean-field Riccati system.

    Raises
    ------
    RiccatiSolvabilityError
        If the definiteness conditions fail or no stabilizing initial gain is
        found.
    RiccatiConvergenceError
        If Newton iteration stalls.
    """
    diag = diagnostics if diagnostics is not None else check_lqr_assumptions(spec)
    if not diag.h1:
        raise RiccatiSolvabilityError("; ".join(diag.messages) or "definiteness conditions fail")
    if diag.certificate_gain is None:
        raise RiccatiSolvabilityError("no mean-square stabilizing initial gain found")
    if diag.gain is None:
        raise RiccatiSolvabilityError("no stabilizing initial gain for the mean equation")

    d = spec.state_dim
    beta = spec.discount
    eye = np.eye(d)
    a_beta = spec.A - 0.5 * beta * eye
    a_tilde = spec.A + spec.Abar - 0.5 * beta * eye

    K, k_steps = _newton_k(spec, a_beta, diag.certificate_gain)
    Lam, l_steps = _newton_lambda(spec, a_tilde, K, diag.gain)

    S, U = _k_operator_parts(spec, K)
    _, W = _lambda_parts(spec, K, Lam)
    gain = np.linalg.solve(S, U)
    a_cl = spec.A - spec.B @ gain
    rhs = spec.M + spec.D.T @ K @ spec.gamma - U.T @ np.linalg.solve(S, spec.H + spec.F.T @ K @ spec.gamma)
    Y = np.linalg.solve(a_cl.T - beta * eye, -rhs)
    O = spec.H + spec.B.T @ Y + spec.F.T @ K @ spec.gamma  # noqa: E741

    m = spec.action_dim
    lam = spec.temperature
    _, logdet = np.linalg.slogdet(S)
    R = (
        spec.gamma @ K @ spec.gamma
        - O @ np.linalg.solve(S, O)
        - 0.5 * lam * (m * math.log(math.pi * lam) - logdet)
    ) / beta

    check = None
    if d == 1 and m == 1 and not np.any(spec.F):
        k_s, l_s = _scalar_roots(spec)
        check = max(abs(k_s - K[0, 0]), abs(l_s - Lam[0, 0]))
        if check > 1e-8 * (1 + abs(k_s) + abs(l_s)):
            raise RiccatiConvergenceError(
                f"Newton solution disagrees with the scalar closed form by {check:.3e}",
                residual=check,
            )

    sol = RiccatiSolution(K, Lam, Y, float(R), S, U, W, O, (k_steps, l_steps), check)
    if not _linalg.is_positive_definite(K) or not _linalg.is_positive_definite(Lam):
        raise RiccatiSolvabilityError("Newton iteration reached a non positive definite solution")
    return sol


def riccati_residuals(sol: RiccatiSolution, spec: LQRModel) -> dict:
    """Max-norm residuals of the four stationary equations after back-substitution."""
    beta = spec.discount
    K, Lam, Y, R = sol.K, sol.Lambda, sol.Y, sol.R
    S, U = _k_operator_parts(spec, K)
    _, W = _lambda_parts(spec, K, Lam)
    O = spec.H + spec.B.T @ Y + spec.F.T @ K @ spec.gamma  # noqa: E741
    y_res = spec.M + spec.A.T @ Y + spec.D.T @ K @ spec.gamma - U.T @ np.linalg.solve(S, O) - beta * Y
    m = spec.action_dim
    lam = spec.temperature
    r_res = (
        spec.gamma @ K @ spec.gamma
        - O @ np.linalg.solve(S, O)
        - 0.5 * lam * (m * math.log(math.pi * lam) - np.linalg.slogdet(S)[1])
        - beta * R
    )
    return {
        "K": float(np.abs(_k_residual(spec, K)).max()),
        "Lambda": float(np.abs(_lambda_residual(spec, K, Lam)).max()),
        "Y": float(np.abs(y_res).max()),
        "R": float(abs(r_res)),
    }


def optimal_policy(sol: RiccatiSolution, spec: LQRModel) -> GaussianPolicy:
    """Optimal Gaussian feedback over the features ``(1, s, mbar)``."""
    d = spec.state_dim
    Sinv = np.linalg.inv(sol.S)
    weights = np.hstack([(-Sinv @ sol.O)[:, None], -Sinv @ sol.U, -Sinv @ (sol.W - sol.U)])
    cov = 0.5 * spec.temperature * Sinv
    return GaussianPolicy(weights, 0.5 * (cov + cov.T), AffineFeatureMap.affine(d))


def optimal_value(sol: RiccatiSolution, spec: LQRModel, s, mu):
    """Riccati quadratic ``-(dev'K dev + mbar'Lambda mbar + 2 s'Y + R)`` at ``(s, mu)``.

    ``mu`` may be a measure or its mean.  This is the planner's value seen by
    an agent sitting at the population mean, and its population average
    equals the optimal social value.  A representative agent away from the
    mean generally also carries a cross term in ``(s - mbar, mbar)``, so the
    Monte-Carlo return from ``(s, mu)`` agrees with this quadratic on the
    lines ``s = mbar`` and ``mbar = 0`` but not elsewhere.
    """
    s = np.asarray(s, dtype=float)
    mbar = population_mean(mu)
    dev = s - mbar
    return -(
        np.einsum("...i,ij,...j->...", dev, sol.K, dev)
        + np.einsum("...i,ij,...j->...", mbar, sol.Lambda, mbar)
        + 2.0 * s @ sol.Y
        + sol.R
    )


@dataclass(frozen=True)
class HurwitzReport:
    representative_abscissa: float
    mean_abscissa: float

    @property
    def passed(self) -> bool:
        return self.representative_abscissa < 0 and self.mean_abscissa < 0


def verify_hurwitz(sol: RiccatiSolution, spec: LQRModel) -> HurwitzReport:
    """Spectral abscissae of the two discount-shifted closed-loop matrices."""
    d = spec.state_dim
    beta = spec.discount
    eye = np.eye(d)
    a_beta = spec.A - 0.5 * beta * eye
    a_tilde = spec.A + spec.Abar - 0.5 * beta * eye
    rep = a_beta - spec.B @ np.linalg.solve(sol.S, sol.U)
    avg = a_tilde - spec.B @ np.linalg.solve(sol.S, sol.W)
    return HurwitzReport(_linalg.spectral_abscissa(rep), _linalg.spectral_abscissa(avg))


def discount_diagnostics(k_pi: float, d: int) -> tuple[float, float]:
    """Sufficient discount thresholds for a policy with growth constant ``k_pi``.

    Returns ``(beta0, beta_var)`` for second moments in dimension ``d``.
    """
    if k_pi < 0:
        raise ValueError("growth constant must be nonnegative")
    if d < 1:
        raise ValueError("dimension must be positive")
    beta0 = 5 * k_pi + 6 * k_pi**2
    poly = 32 + 32 * d + 64 * math.sqrt(d) + 144 * d**2 + 32 * d**3 + 64 * d**2.5 + 112 * d**4
    return beta0, poly * k_pi**2


def reference_targets(sol: RiccatiSolution, spec: LQRModel) -> dict:
    """Optimal actor and critic coefficients in the parametrizations used for training.

    ``omega`` is expressed over the features ``(s - mbar, mbar)`` (rows per
    action), ``theta`` over the basis ``(1, mbar^2, (s - mbar)^2)`` for the
    scalar case.  Only defined when the optimal mean has no intercept.
    """
    Sinv = np.linalg.inv(sol.S)
    dev_gain = -Sinv @ sol.U
    mean_gain = -Sinv @ sol.W
    out = {
        "omega": np.hstack([dev_gain, mean_gain]),
        "intercept": -Sinv @ sol.O,
    }
    if spec.state_dim == 1:
        out["theta"] = np.array([-sol.R, -sol.Lambda[0, 0], -sol.K[0, 0]])
    return out

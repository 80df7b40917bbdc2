"""Galerkin policy evaluation.

For a basis ``phi_1..phi_n`` the critic ``V = sum_i theta_i phi_i`` is
chosen so that the stationary HJB residual ``(L - beta) V + r_lambda`` is
orthogonal to every basis function in ``L^2`` of an occupancy sample set:

    A_ji = sum_eta w_eta phi_j (beta phi_i - L phi_i),
    b_j  = sum_eta w_eta r_lambda phi_j,

followed by ``(A + ridge I) theta = b``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .cylindrical import CylindricalBasis, CylindricalEval
from .exceptions import AssemblyError, SingularSystemError
from .measures import EmpiricalMeasure, moment_map
from .policy import regularized_reward
from .simulate import OccupancySampleSet

__all__ = [
    "GalerkinSystem",
    "CriticCoefficients",
    "assemble",
    "solve",
    "critic_eval",
    "hjb_residual",
    "galerkin_orthogonality",
    "CONDITION_LIMIT",
]

CONDITION_LIMIT = 1e12


@dataclass(eq=False)
class GalerkinSystem:
    matrix: np.ndarray
    rhs: np.ndarray
    n_samples: int
    ridge: float
    condition: float
    basis: CylindricalBasis | None = None

    @property
    def regularized(self) -> np.ndarray:
        return self.matrix + self.ridge * np.eye(self.matrix.shape[0])

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "rhs": self.rhs.tolist(),
            "n_samples": self.n_samples,
            "ridge": self.ridge,
            "condition": self.condition,
        }


@dataclass(eq=False)
class CriticCoefficients:
    theta: np.ndarray
    basis: CylindricalBasis
    residual_norm: float = 0.0
    condition: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.name,
            "theta": self.theta.tolist(),
            "residual_norm": self.residual_norm,
            "condition": self.condition,
        }


def _condition(mat):
    with warnings.catch_warnings():
        # exact singularity is reported through the condition estimate instead
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(mat, check_finite=False)
    anorm = np.abs(mat).sum(axis=0).max()
    rcond, info = scipy.linalg.lapack.dgecon(lu, anorm, norm="1")
    cond = np.inf if rcond == 0 or info != 0 else 1.0 / rcond
    return (lu, piv), float(cond)


def _locate_bad_function(basis, s, mu):
    try:
        m = moment_map(mu, basis.family)
    except (ValueError, IndexError):
        return 0, f"feature family expects {basis.family.dim}-dimensional particles, got {mu.dim}"
    for j, f in enumerate(basis.functions):
        try:
            out = f.outer(s, m)
        except Exception as exc:  # report the first function that cannot be evaluated
            return j, str(exc)
        if out.grad_s.shape[-1] != s.shape[-1]:
            return j, "state gradient has the wrong dimension"
    return None, None


def assemble(
    basis: CylindricalBasis,
    policy,
    model,
    samples: OccupancySampleSet,
    ridge: float = 0.0,
    rng: np.random.Generator | None = None,
    n_actions: int = 64,
) -> GalerkinSystem:
    """Empirical Galerkin system; temperature and discount come from ``model``."""
    if ridge < 0:
        raise AssemblyError("ridge must be nonnegative")
    s = samples.states
    mu = samples.measure
    if s.shape[-1] != basis.dim or mu.dim != basis.family.dim:
        j, why = _locate_bad_function(basis, s[:1], EmpiricalMeasure(mu.particles[:1]))
        raise AssemblyError(
            f"basis function {j if j is not None else 0} does not match the "
            f"{s.shape[-1]}-dimensional samples" + (f": {why}" if why else ""),
            basis_index=j if j is not None else 0,
        )
    try:
        ev = basis.evaluate(s, mu)
        gen = basis.generator(policy, model, s, mu, rng, ev=ev)
    except (ValueError, IndexError) as exc:
        j, why = _locate_bad_function(basis, s[:1], EmpiricalMeasure(mu.particles[:1]))
        raise AssemblyError(
            f"basis function {j} could not be evaluated: {why or exc}", basis_index=j
        ) from exc
    phi = ev.values
    w = samples.weights
    beta = model.discount
    r = regularized_reward(policy, model, s, mu, rng, n_actions)
    mat = (phi * w[:, None]).T @ (beta * phi - gen)
    rhs = phi.T @ (w * r)
    if not (np.all(np.isfinite(mat)) and np.all(np.isfinite(rhs))):
        raise AssemblyError("non-finite entries in the Galerkin system")
    _, cond = _condition(mat + ridge * np.eye(len(basis)))
    return GalerkinSystem(mat, rhs, samples.size, float(ridge), cond, basis)


def solve(system: GalerkinSystem, basis: CylindricalBasis | None = None) -> CriticCoefficients:
    """Solve ``(A + ridge I) theta = b`` by pivoted LU."""
    basis = basis if basis is not None else system.basis
    mat = system.regularized
    (lu, piv), cond = _condition(mat)
    if not np.isfinite(cond) or cond >= CONDITION_LIMIT:
        raise SingularSystemError(cond)
    theta = scipy.linalg.lu_solve((lu, piv), system.rhs, check_finite=False)
    res = float(np.linalg.norm(mat @ theta - system.rhs))
    return CriticCoefficients(theta, basis, res, cond)


def critic_eval(critic: CriticCoefficients, s, mu: EmpiricalMeasure) -> CylindricalEval:
    """Value and derivatives of ``sum_i theta_i phi_i`` at ``(s, mu)``."""
    ev = critic.basis.evaluate(np.asarray(s, dtype=float), mu)
    th = critic.theta
    return CylindricalEval(
        ev.values @ th,
        np.einsum("n,...nd->...d", th, ev.grad_s),
        np.einsum("n,...nij->...ij", th, ev.hess_s),
        ev.moment_coef(th),
        critic.basis.family,
    )


def hjb_residual(critic: CriticCoefficients, policy, model, s, mu, rng=None, n_actions=64):
    """Pointwise ``(L - beta) V + r_lambda`` of the critic under ``policy``."""
    s = np.asarray(s, dtype=float)
    ev = critic.basis.evaluate(s, mu)
    gen = critic.basis.generator(policy, model, s, mu, rng, ev=ev)
    r = regularized_reward(policy, model, s, mu, rng, n_actions)
    return (gen - model.discount * ev.values) @ critic.theta + r


def galerkin_orthogonality(critic, policy, model, samples: OccupancySampleSet, rng=None):
    """``sum_eta w_eta residual_eta phi_j(eta)`` for every basis function."""
    mu = samples.measure
    res = hjb_residual(critic, policy, model, samples.states, mu, rng)
    phi = critic.basis.values(samples.states, mu)
    return phi.T @ (samples.weights * res)

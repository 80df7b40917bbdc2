"""Advantage functions, policy gradients and the actor-critic loop.

The policy gradient is estimated as

    (1 / beta) sum_eta w_eta [ E_a q_rep(s, mu, a) score(a | s)
                               + E_xi E_a q_pop(s, mu, xi, a) score(a | xi) ]

over an occupancy sample set.  Action expectations are taken either by
Monte Carlo or, for models whose advantage is quadratic in the action, in
closed form: Gaussian integration by parts turns ``E[q score]`` into
``grad_a q(mean) f^T`` (the ``log p`` part of ``q_rep`` has zero gradient
at the mean and drops out).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .critic import CriticCoefficients, assemble, critic_eval, solve
from .cylindrical import CylindricalBasis
from .exceptions import MFACError, ParameterError, PerturbationError, TrainingError
from .measures import EmpiricalMeasure
from .policy import GaussianPolicy, population_mean
from .simulate import (
    InitialCondition,
    OccupancySampleSet,
    child_sequence,
    discounted_returns,
    occupancy_samples,
    seed_sequence,
    simulate,
)

__all__ = [
    "q_rep",
    "q_pop",
    "GradientEstimate",
    "GateauxEstimate",
    "policy_gradient",
    "gateaux_gradient",
    "TrainingSchedule",
    "TrainingRecord",
    "TrainingLog",
    "TrainingResult",
    "train",
    "evaluate_critic",
]

_CHUNK = 512


def _generator(seq):
    return np.random.Generator(np.random.PCG64(seq))


def q_rep(critic: CriticCoefficients, policy: GaussianPolicy, model, s, mu, a, ce=None):
    """Representative advantage at actions ``a`` (leading sample axes allowed)."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    ce = ce if ce is not None else critic_eval(critic, s, mu)
    mbar = population_mean(mu)
    b = model.drift(s, mbar, a)
    sig = model.diffusion(s, mbar, a)
    cov = np.einsum("...in,...jn->...ij", sig, sig)
    return (
        model.reward(s, mu, a)
        - model.temperature * policy.log_density(a, s, mbar)
        + np.einsum("...d,...d->...", b, ce.grad_s)
        + 0.5 * np.einsum("...ij,...ij->...", cov, ce.hess_ss)
    )


def q_pop(critic: CriticCoefficients, policy, model, s, mu, xi, a, ce=None):
    """Population advantage at particle positions ``xi`` and actions ``a``."""
    xi = np.asarray(xi, dtype=float)
    a = np.asarray(a, dtype=float)
    ce = ce if ce is not None else critic_eval(critic, s, mu)
    mbar = population_mean(mu)
    if xi.ndim > mbar.ndim:
        mbar = np.expand_dims(mbar, tuple(range(mbar.ndim - 1, xi.ndim - 1)))
    lions = ce.lions(xi)
    jac = ce.lions_jac(xi)
    b = model.drift(xi, mbar, a)
    sig = model.diffusion(xi, mbar, a)
    cov = np.einsum("...in,...jn->...ij", sig, sig)
    return np.einsum("...d,...d->...", b, lions) + 0.5 * np.einsum("...ij,...ij->...", cov, jac)


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    """Policy-gradient estimate shaped like the actor weights.

    ``std_err`` is the between-trajectory standard error of ``gradient``.
    """

    gradient: np.ndarray
    representative: np.ndarray
    population: np.ndarray
    std_err: np.ndarray


class GateauxEstimate(NamedTuple):
    value: float
    std_err: float
    action_std_err: float


def _trajectory_stderr(contrib, traj, n_traj):
    """Standard error of ``contrib.sum(0)`` treating trajectories as i.i.d."""
    if n_traj < 2:
        return np.full(contrib.shape[1:], np.nan)
    per = np.zeros((n_traj,) + contrib.shape[1:])
    np.add.at(per, traj, contrib)
    return np.sqrt(n_traj) * per.std(axis=0, ddof=1)


def _population_view(samples: OccupancySampleSet, n_xi, rng):
    """Particles and weights for the inner population average."""
    x = samples.population
    P = x.shape[1]
    if P <= n_xi:
        return x, np.full(x.shape[:2], 1.0 / P)
    if rng is None:
        raise ParameterError("a random generator is required to subsample the population")
    idx = np.stack([rng.choice(P, n_xi, replace=False) for _ in range(x.shape[0])])
    return np.take_along_axis(x, idx[..., None], axis=1), np.full((x.shape[0], n_xi), 1.0 / n_xi)


def _closed_form_terms(critic, policy, model, s, mu, xs, xw):
    ce = critic_eval(critic, s, mu)
    mbar = population_mean(mu)
    m_s = policy.mean_action(s, mbar)
    f_s = policy.features(s, mbar)
    g = model.reward_action_grad(s, mu, m_s)
    g = g + np.einsum("dm,...d->...m", np.atleast_2d(model.drift_action_matrix(s, mbar)), ce.grad_s)
    g = g + model.diffusion_action_grad(s, mbar, m_s, ce.hess_ss)
    rep = g[..., :, None] * f_s[..., None, :]

    mb = mbar[:, None, :]
    m_x = policy.mean_action(xs, mb)
    f_x = policy.features(xs, mb)
    lions = ce.lions(xs)
    jac = ce.lions_jac(xs)
    gp = np.einsum("dm,...d->...m", np.atleast_2d(model.drift_action_matrix(xs, mb)), lions)
    gp = gp + model.diffusion_action_grad(xs, mb, m_x, jac)
    pop = np.einsum("bp,bpm,bpf->bmf", xw, gp, f_x)
    return rep, pop


def _monte_carlo_terms(critic, policy, model, s, mu, xs, xw, n_actions, rng, psi=None):
    """Per-sample action averages; also returns per-sample MC variances."""
    ce = critic_eval(critic, s, mu)
    mbar = population_mean(mu)
    a = policy.sample_action(s, mbar, rng, size=n_actions)  # (M, B, m)
    q = q_rep(critic, policy, model, s, mu, a, ce)
    mb = mbar[:, None, :]
    a_x = policy.sample_action(xs, mb, rng, size=n_actions)  # (M, B, P, m)
    qp = q_pop(critic, policy, model, s, mu, xs, a_x, ce)
    if psi is None:
        rep_draws = q[..., None, None] * policy.score(a, s, mbar)
        pop_draws = np.einsum(
            "bp,kbp,kbpmf->kbmf", xw, qp, policy.score(a_x, xs, mb)
        )
    else:
        rep_draws = q * psi(s, mu, a)
        pop_mu = EmpiricalMeasure(mu.particles[:, None], mu.weights[:, None])
        pop_draws = np.einsum("bp,kbp->kb", xw, qp * psi(xs, pop_mu, a_x))
    total = rep_draws + pop_draws
    var = total.var(axis=0, ddof=1) / n_actions if n_actions > 1 else np.zeros(total.shape[1:])
    return rep_draws.mean(axis=0), pop_draws.mean(axis=0), var


def _chunks(n):
    for start in range(0, n, _CHUNK):
        yield slice(start, min(start + _CHUNK, n))


def _resolve_method(model, method):
    if method == "auto":
        return "closed_form" if model.quadratic_in_action else "monte_carlo"
    if method == "closed_form" and not model.quadratic_in_action:
        raise ParameterError("closed-form gradients need a model quadratic in the action")
    if method not in ("closed_form", "monte_carlo"):
        raise ParameterError(f"unknown gradient method {method!r}")
    return method


def policy_gradient(
    critic: CriticCoefficients,
    policy: GaussianPolicy,
    model,
    samples: OccupancySampleSet,
    *,
    method: str = "auto",
    n_actions: int = 64,
    n_xi: int = 64,
    rng: np.random.Generator | None = None,
) -> GradientEstimate:
    """Two-term policy gradient in the actor weights.

    ``method`` is ``"closed_form"``, ``"monte_carlo"`` or ``"auto"`` (closed
    form whenever the model allows it).
    """
    if samples.size == 0:
        raise ParameterError("empty sample set")
    method = _resolve_method(model, method)
    if method == "monte_carlo" and rng is None:
        raise ParameterError("Monte-Carlo gradients need a random generator")
    xs_all, xw_all = _population_view(samples, n_xi, rng)
    mu_all = samples.measure
    shape = policy.weights.shape
    rep_c = np.empty((samples.size,) + shape)
    pop_c = np.empty((samples.size,) + shape)
    for sl in _chunks(samples.size):
        s = samples.states[sl]
        mu = EmpiricalMeasure(mu_all.particles[sl], mu_all.weights[sl])
        if method == "closed_form":
            rep, pop = _closed_form_terms(critic, policy, model, s, mu, xs_all[sl], xw_all[sl])
        else:
            rep, pop, _ = _monte_carlo_terms(
                critic, policy, model, s, mu, xs_all[sl], xw_all[sl], n_actions, rng
            )
        rep_c[sl] = rep
        pop_c[sl] = pop
    scale = samples.weights[:, None, None] / model.discount
    rep_c *= scale
    pop_c *= scale
    rep = rep_c.sum(axis=0)
    pop = pop_c.sum(axis=0)
    err = _trajectory_stderr(rep_c + pop_c, samples.trajectory, samples.n_traj)
    return GradientEstimate(rep + pop, rep, pop, err)


def gateaux_gradient(
    critic: CriticCoefficients,
    policy: GaussianPolicy,
    model,
    psi: Callable,
    samples: OccupancySampleSet,
    *,
    n_actions: int = 64,
    n_xi: int = 64,
    rng: np.random.Generator,
    n_check: int = 4096,
    check_tol: float = 1e-2,
) -> GateauxEstimate:
    """Directional derivative along the perturbation ``psi(x, mu, a) pi(da | x, mu)``.

    ``psi`` must be vectorized: ``x`` has shape ``batch + (d,)``, ``a`` has
    leading sample axes and ``mu`` is an EmpiricalMeasure broadcasting
    against ``x``.  Before estimation, ``psi`` is checked to integrate to
    zero under the policy at a few sample points.
    """
    probe = np.linspace(0, samples.size - 1, min(8, samples.size)).astype(int)
    s_p = samples.states[probe]
    mu_p = EmpiricalMeasure(samples.population[probe])
    a_p = policy.sample_action(s_p, mu_p, rng, size=n_check)
    vals = psi(s_p, mu_p, a_p)
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(n_check)
    if np.any(np.abs(mean) > check_tol + 4 * se):
        raise PerturbationError(
            f"perturbation does not integrate to zero under the policy (max |mean| {np.abs(mean).max():.3g})"
        )

    xs_all, xw_all = _population_view(samples, n_xi, rng)
    mu_all = samples.measure
    contrib = np.empty(samples.size)
    var = np.empty(samples.size)
    for sl in _chunks(samples.size):
        mu = EmpiricalMeasure(mu_all.particles[sl], mu_all.weights[sl])
        rep, pop, v = _monte_carlo_terms(
            critic, policy, model, samples.states[sl], mu, xs_all[sl], xw_all[sl], n_actions, rng, psi
        )
        contrib[sl] = rep + pop
        var[sl] = v
    scale = samples.weights / model.discount
    contrib *= scale
    traj_err = _trajectory_stderr(contrib[:, None], samples.trajectory, samples.n_traj)[0]
    action_err = float(np.sqrt(np.sum(scale**2 * var)))
    return GateauxEstimate(float(contrib.sum()), float(traj_err), action_err)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingSchedule:
    """Hyperparameters of the actor-critic loop.

    ``final_trajectories`` sets the sample size of the separate policy
    evaluation run after the last update (defaults to ``trajectories``).
    """

    iterations: int
    stepsize: float
    horizon: float
    dt: float
    trajectories: int
    occupancy: str = "discounted"
    action_samples: int = 64
    population_subsample: int = 64
    ridge: float = 0.0
    clip: float | None = None
    decay: bool = False
    gradient: str = "auto"
    simulation: str = "auto"
    final_trajectories: int | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ParameterError("iterations must be nonnegative")
        if not self.stepsize > 0:
            raise ParameterError("stepsize must be positive")
        if self.trajectories < 1:
            raise ParameterError("need at least one trajectory")
        if self.occupancy not in ("discounted", "uniform"):
            raise ParameterError(f"unknown occupancy mode {self.occupancy!r}")
        if self.clip is not None and not self.clip > 0:
            raise ParameterError("clip bound must be positive")

    def step(self, k: int) -> float:
        return self.stepsize / np.sqrt(k + 1) if self.decay else self.stepsize

    @classmethod
    def from_dict(cls, data: dict):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown schedule fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainingRecord:
    iteration: int
    omega: np.ndarray
    theta: np.ndarray
    J_hat: float
    grad_norm: float
    seconds: float
    seed: int


@dataclass
class TrainingLog:
    """Per-iteration records; ``omega`` holds the weights used at that iteration."""

    records: list = field(default_factory=list)
    seed: int = 0

    def __len__(self):
        return len(self.records)

    def append(self, rec: TrainingRecord):
        if self.records and rec.iteration != self.records[-1].iteration + 1:
            raise ValueError("iterations must be consecutive")
        self.records.append(rec)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([r.omega for r in self.records])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.records])

    @property
    def values(self) -> np.ndarray:
        return np.array([r.J_hat for r in self.records])

    def header(self, n_omega, n_theta, reference=None):
        cols = ["iteration"] + [f"omega_{i + 1}" for i in range(n_omega)]
        cols += [f"theta_{i + 1}" for i in range(n_theta)] + ["J_hat", "grad_norm", "seed"]
        if reference is not None:
            cols += [f"omega_star_{i + 1}" for i in range(len(reference["omega"]))]
            cols += [f"theta_star_{i + 1}" for i in range(len(reference["theta"]))]
        return cols

    @staticmethod
    def row(rec: TrainingRecord, reference=None):
        row = [rec.iteration] + [repr(float(v)) for v in rec.omega] + [repr(float(v)) for v in rec.theta]
        row += [repr(float(rec.J_hat)), repr(float(rec.grad_norm)), rec.seed]
        if reference is not None:
            row += [repr(float(v)) for v in reference["omega"]]
            row += [repr(float(v)) for v in reference["theta"]]
        return row

    def to_csv(self, path, reference=None, n_omega=None, n_theta=None):
        """Write the log; wall-clock times go to :meth:`timing_to_csv` instead."""
        if self.records:
            n_omega = len(self.records[0].omega)
            n_theta = len(self.records[0].theta)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header(n_omega or 0, n_theta or 0, reference))
            for rec in self.records:
                w.writerow(self.row(rec, reference))

    def timing_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "seconds"])
            for rec in self.records:
                w.writerow([rec.iteration, f"{rec.seconds:.6f}"])


@dataclass(eq=False)
class TrainingResult:
    policy: GaussianPolicy
    critic: CriticCoefficients | None
    log: TrainingLog


def evaluate_critic(model, policy, basis, schedule: TrainingSchedule, initial, seed, n_traj=None,
                    threads=None):
    """Galerkin evaluation of ``policy`` on a fresh batch of trajectories."""
    seq = seed_sequence(seed)
    batch = simulate(
        model, policy, initial, schedule.horizon, schedule.dt, n_traj or schedule.trajectories,
        child_sequence(seq, 0), method=schedule.simulation, threads=threads,
    )
    samples = occupancy_samples(batch, schedule.occupancy, model.discount)
    rng = _generator(child_sequence(seq, 2))
    system = assemble(basis, policy, model, samples, schedule.ridge, rng, schedule.action_samples)
    return solve(system, basis), batch, samples


def train(
    model,
    policy0: GaussianPolicy,
    basis: CylindricalBasis,
    schedule: TrainingSchedule,
    initial: InitialCondition,
    seed: int = 0,
    *,
    callback: Callable | None = None,
    threads: int | None = None,
) -> TrainingResult:
    """Actor-critic iteration with fresh trajectories every step.

    ``callback(record, critic)`` runs after every iteration.

    Iteration ``k`` derives all of its randomness from the child stream
    ``(k,)`` of ``SeedSequence(seed)``: ``(k, 0)`` for simulation, ``(k, 1)``
    for the gradient, ``(k, 2)`` for assembly and ``(k, 3)`` for the
    reported return.  The final critic is
    computed from stream ``(iterations,)``.

    Raises
    ------
    TrainingError
        Wrapping the simulation or solver failure; carries the partial log.
    """
    root = seed_sequence(seed)
    log = TrainingLog(seed=int(seed) if not isinstance(seed, np.random.SeedSequence) else 0)
    policy = policy0
    for k in range(schedule.iterations):
        t0 = time.perf_counter()
        seq = child_sequence(root, k)
        try:
            critic, batch, samples = evaluate_critic(
                model, policy, basis, schedule, initial, seq, threads=threads
            )
            returns = discounted_returns(batch, model, policy, _generator(child_sequence(seq, 3)),
                                         schedule.action_samples)
            grad = policy_gradient(
                critic, policy, model, samples,
                method=schedule.gradient,
                n_actions=schedule.action_samples,
                n_xi=schedule.population_subsample,
                rng=_generator(child_sequence(seq, 1)),
            )
        except MFACError as exc:
            raise TrainingError(k, log, exc) from exc
        rec = TrainingRecord(
            iteration=k,
            omega=policy.weights.ravel().copy(),
            theta=critic.theta.copy(),
            J_hat=float(returns.mean()),
            grad_norm=float(np.linalg.norm(grad.gradient)),
            seconds=time.perf_counter() - t0,
            seed=log.seed,
        )
        log.append(rec)
        if callback is not None:
            callback(rec, critic)
        w = policy.weights + schedule.step(k) * grad.gradient
        if schedule.clip is not None:
            w = np.clip(w, -schedule.clip, schedule.clip)
        policy = policy.with_weights(w)

    if schedule.iterations == 0:
        return TrainingResult(policy, None, log)
    try:
        critic, _, _ = evaluate_critic(
            model, policy, basis, schedule, initial, child_sequence(root, schedule.iterations),
            schedule.final_trajectories, threads,
        )
    except MFACError as exc:
        raise TrainingError(schedule.iterations, log, exc) from exc
    return TrainingResult(policy, critic, log)

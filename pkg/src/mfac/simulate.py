"""Simulation of the coupled representative/population system.

Every trajectory ``l`` owns a family of random streams derived from one
:class:`numpy.random.SeedSequence`:

* key ``(l, 0)`` drives the representative (initial draw, then increments),
* key ``(l, 1 + p)`` drives population particle ``p``.

Each stream first draws its initial state and then all of its Gaussian
increments at once, so results do not depend on how work is spread over
threads.  Two simulators are provided: Euler-Maruyama on the
policy-averaged coefficients, and exact Gaussian transitions for closed
loops that are affine in the joint state.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .exceptions import ParameterError, SimulationOverflowError, UnsupportedModelError
from .measures import EmpiricalMeasure
from .policy import GaussianPolicy, averaged_coefficients, regularized_reward

__all__ = [
    "InitialCondition",
    "TrajectoryBatch",
    "OccupancySampleSet",
    "ValueEstimate",
    "simulate_euler",
    "simulate_affine_exact",
    "simulate",
    "occupancy_samples",
    "discounted_returns",
    "estimate_value",
    "seed_sequence",
    "child_sequence",
]

OVERFLOW_BOUND = 1e8


def seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def child_sequence(parent: np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    """Deterministic child stream addressed by an integer key path."""
    return np.random.SeedSequence(parent.entropy, spawn_key=tuple(parent.spawn_key) + tuple(key))


def _generator(seq):
    return np.random.Generator(np.random.PCG64(seq))


@dataclass(frozen=True, eq=False)
class InitialCondition:
    """Initial laws of the representative and of the population.

    The representative starts from ``N(state_mean, state_cov)``.  The
    population is either

    * mean-only (default): a single particle at ``pop_mean`` that moves
      deterministically along the mean flow,
    * ``n_particles`` i.i.d. draws from ``N(pop_mean, pop_cov)``, or
    * an explicit cloud ``particles`` shared by all trajectories.
    """

    state_mean: np.ndarray
    state_cov: np.ndarray
    pop_mean: np.ndarray
    pop_cov: np.ndarray = None
    n_particles: int | None = None
    particles: np.ndarray | None = None

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.state_mean, dtype=float))
        d = m.shape[0]
        c = np.asarray(self.state_cov, dtype=float).reshape(d, d)
        pm = np.atleast_1d(np.asarray(self.pop_mean, dtype=float))
        pc = np.zeros((d, d)) if self.pop_cov is None else np.asarray(self.pop_cov, float).reshape(d, d)
        if pm.shape != (d,):
            raise ParameterError("population mean has the wrong dimension")
        parts = self.particles
        if parts is not None:
            parts = np.asarray(parts, dtype=float).reshape(-1, d)
        if self.n_particles is not None and self.n_particles < 1:
            raise ParameterError("need at least one population particle")
        for name, val in (("state_mean", m), ("state_cov", c), ("pop_mean", pm), ("pop_cov", pc)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "particles", parts)

    @property
    def dim(self):
        return self.state_mean.shape[0]

    @property
    def mean_only(self) -> bool:
        return self.particles is None and self.n_particles is None

    @property
    def population_size(self) -> int:
        if self.particles is not None:
            return self.particles.shape[0]
        return 1 if self.n_particles is None else int(self.n_particles)

    def to_dict(self) -> dict:
        out = {
            "state_mean": self.state_mean.tolist(),
            "state_cov": self.state_cov.tolist(),
            "pop_mean": self.pop_mean.tolist(),
            "pop_cov": self.pop_cov.tolist(),
        }
        if self.n_particles is not None:
            out["particles"] = int(self.n_particles)
        return out


def _psd_sqrt(cov):
    # symmetric square root; tiny negative eigenvalues from rounding are clamped
    vals, vecs = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    vals = np.clip(vals, 0.0, None)
    return np.einsum("...ik,...k,...jk->...ij", vecs, np.sqrt(vals), vecs)


class _Noise(NamedTuple):
    rep_init: np.ndarray  # (L, d) standard normals
    rep: np.ndarray  # (L, steps, d)
    pop_init: np.ndarray | None  # (L, P, d)
    pop: np.ndarray | None  # (L, P, steps, d)


def _draw_noise(seq, n_traj, n_particles, steps, d, threads):
    """Standard normal draws for every stream; layout independent of threads."""

    def one(l):
        g = _generator(child_sequence(seq, l, 0))
        r0 = g.standard_normal(d)
        r = g.standard_normal((steps, d))
        if n_particles is None:
            return r0, r, None, None
        p0 = np.empty((n_particles, d))
        p = np.empty((n_particles, steps, d))
        for j in range(n_particles):
            gj = _generator(child_sequence(seq, l, 1 + j))
            p0[j] = gj.standard_normal(d)
            p[j] = gj.standard_normal((steps, d))
        return r0, r, p0, p

    if threads and threads > 1 and n_traj > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, range(n_traj)))
    else:
        parts = [one(l) for l in range(n_traj)]
    rep_init = np.stack([p[0] for p in parts])
    rep = np.stack([p[1] for p in parts])
    if n_particles is None:
        return _Noise(rep_init, rep, None, None)
    return _Noise(rep_init, rep, np.stack([p[2] for p in parts]), np.stack([p[3] for p in parts]))


@dataclass(eq=False)
class TrajectoryBatch:
    """Simulated paths on the grid ``t = 0, dt, ..., (N-1) dt``.

    ``population`` has shape ``(L, N, P, d)`` with uniform particle weights;
    in mean-only batches ``P = 1`` and the single particle is the mean.
    """

    times: np.ndarray
    dt: float
    states: np.ndarray
    population: np.ndarray
    mean_only: bool
    method: str
    seed: dict = field(default_factory=dict)

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1]

    @property
    def population_mean(self) -> np.ndarray:
        return self.population.mean(axis=-2)

    def to_csv(self, path) -> None:
        """Columns: trajectory, step, time, state coords, population mean coords."""
        d = self.states.shape[-1]
        mbar = self.population_mean
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["trajectory", "step", "time"]
                + [f"s{i + 1}" for i in range(d)]
                + [f"mbar{i + 1}" for i in range(d)]
            )
            for l in range(self.n_traj):
                for k in range(self.n_steps):
                    w.writerow(
                        [l, k, repr(float(self.times[k]))]
                        + [repr(float(v)) for v in self.states[l, k]]
                        + [repr(float(v)) for v in mbar[l, k]]
                    )


def _grid(horizon, dt):
    if not dt > 0:
        raise ParameterError("time step must be positive")
    if not horizon >= dt:
        raise ParameterError("horizon must be at least one time step")
    n = int(round(horizon / dt))
    if abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ParameterError("horizon must be an integer multiple of the time step")
    return np.arange(n) * dt


def _initial_states(initial: InitialCondition, noise: _Noise):
    s0 = initial.state_mean + noise.rep_init @ _psd_sqrt(initial.state_cov).T
    L = s0.shape[0]
    d = initial.dim
    if initial.particles is not None:
        x0 = np.broadcast_to(initial.particles, (L,) + initial.particles.shape).copy()
    elif initial.n_particles is not None:
        x0 = initial.pop_mean + noise.pop_init @ _psd_sqrt(initial.pop_cov).T
    else:
        x0 = np.broadcast_to(initial.pop_mean, (L, 1, d)).copy()
    return s0, x0


def _check_overflow(arrays, step, bound):
    for arr in arrays:
        bad = ~(np.abs(arr) <= bound)
        if bad.any():
            traj = int(np.argwhere(bad.reshape(arr.shape[0], -1).any(axis=1))[0, 0])
            raise SimulationOverflowError(traj, step, bound)


def _seed_record(seq):
    return {"entropy": int(seq.entropy), "spawn_key": list(seq.spawn_key)}


def _prepare(initial, policy, model, horizon, dt, n_traj, seed, threads):
    if n_traj < 1:
        raise ParameterError("need at least one trajectory")
    if initial.dim != model.state_dim or policy.features.state_dim != model.state_dim:
        raise ParameterError("initial condition, policy and model disagree on the state dimension")
    if policy.action_dim != model.action_dim:
        raise ParameterError("policy and model disagree on the action dimension")
    times = _grid(horizon, dt)
    seq = seed_sequence(seed)
    n_pop = initial.population_size if initial.particles is not None else initial.n_particles
    noise = _draw_noise(seq, n_traj, n_pop, len(times) - 1, initial.dim, threads)
    if initial.particles is not None:
        noise = noise._replace(pop_init=None)
    return times, seq, noise


def propagate_euler(model, policy, s0, x0, rep_noise, pop_noise, dt, mean_only, rng=None,
                    overflow_bound=OVERFLOW_BOUND):
    """Euler-Maruyama kernel on explicit noise arrays.

    ``s0`` has shape ``(L, d)``, ``x0`` ``(L, P, d)``; ``rep_noise`` is
    ``(L, steps, d)`` and ``pop_noise`` ``(L, P, steps, d)`` (ignored when
    ``mean_only``).  Returns paths of shape ``(L, steps + 1, d)`` and
    ``(L, steps + 1, P, d)``.
    """
    steps = rep_noise.shape[1]
    L, P, d = x0.shape
    states = np.empty((L, steps + 1, d))
    pop = np.empty((L, steps + 1, P, d))
    states[:, 0] = s0
    pop[:, 0] = x0
    s, x = s0.copy(), x0.copy()
    sq = np.sqrt(dt)
    _check_overflow((s, x), 0, overflow_bound)
    for k in range(steps):
        mbar = x.mean(axis=1)
        coef_x = averaged_coefficients(policy, model, x, mbar[:, None, :], rng)
        coef_s = averaged_coefficients(policy, model, s, mbar, rng)
        sig_s = _psd_sqrt(coef_s.cov)
        s = s + coef_s.drift * dt + sq * np.einsum("...ij,...j->...i", sig_s, rep_noise[:, k])
        if mean_only:
            x = x + coef_x.drift * dt
        else:
            sig_x = _psd_sqrt(coef_x.cov)
            x = x + coef_x.drift * dt + sq * np.einsum("...ij,...j->...i", sig_x, pop_noise[:, :, k])
        _check_overflow((s, x), k + 1, overflow_bound)
        states[:, k + 1] = s
        pop[:, k + 1] = x
    return states, pop


def simulate_euler(
    model,
    policy: GaussianPolicy,
    initial: InitialCondition,
    horizon: float,
    dt: float,
    n_traj: int,
    seed=0,
    *,
    overflow_bound: float = OVERFLOW_BOUND,
    threads: int | None = None,
) -> TrajectoryBatch:
    """Euler-Maruyama on the policy-averaged coefficients.

    Each step adds ``b_pi dt + sqrt(Sigma_pi) sqrt(dt) xi`` to the
    representative and to every particle, with the population evaluated at
    the current empirical cloud.  In mean-only mode the population mean
    follows its own drift without noise.
    """
    times, seq, noise = _prepare(initial, policy, model, horizon, dt, n_traj, seed, threads)
    s0, x0 = _initial_states(initial, noise)
    rng = _generator(child_sequence(seq, 2**31 - 1))
    states, pop = propagate_euler(
        model, policy, s0, x0, noise.rep, noise.pop, dt, initial.mean_only, rng, overflow_bound
    )
    return TrajectoryBatch(times, dt, states, pop, initial.mean_only, "euler", _seed_record(seq))


class _ClosedLoop(NamedTuple):
    transition: np.ndarray
    offset: np.ndarray
    noise_sqrt: np.ndarray


def closed_loop_transition(model, policy: GaussianPolicy, n_particles: int, dt: float,
                           mean_only: bool) -> _ClosedLoop:
    """Exact one-step law ``z' = T z + c + S eps`` of the joint affine system."""
    dyn = model.affine_dynamics()
    if dyn is None or not model.affine_in_action or not model.diffusion_action_free:
        raise UnsupportedModelError(
            f"{type(model).__name__} does not have affine closed-loop dynamics with "
            "action-free additive noise; use simulate_euler instead"
        )
    fm = policy.features
    gain = dyn.action @ policy.weights
    mx = dyn.state + gain @ fm.state
    mm = dyn.mean + gain @ fm.mean
    c = dyn.offset + gain @ fm.offset
    g = dyn.noise
    d = mx.shape[0]
    if mean_only:
        big = np.block([[mx, mm], [np.zeros((d, d)), mx + mm]])
        off = np.r_[c, c]
        noise = np.vstack([g, np.zeros_like(g)])
    else:
        P = n_particles
        n = 1 + P
        big = np.zeros((n * d, n * d))
        coupling = np.tile(mm / P, (1, P))
        for i in range(n):
            rows = slice(i * d, (i + 1) * d)
            big[rows, i * d:(i + 1) * d] += mx
            big[rows, d:] += coupling
        off = np.tile(c, n)
        noise = np.kron(np.eye(n), g)
    D = big.shape[0]
    aug = np.zeros((D + 1, D + 1))
    aug[:D, :D] = big
    aug[:D, D] = off
    e = scipy.linalg.expm(aug * dt)
    trans, shift = e[:D, :D], e[:D, D]
    van = np.zeros((2 * D, 2 * D))
    van[:D, :D] = -big
    van[:D, D:] = noise @ noise.T
    van[D:, D:] = big.T
    ev = scipy.linalg.expm(van * dt)
    cov = trans @ ev[:D, D:]
    return _ClosedLoop(trans, shift, _psd_sqrt(cov))


def simulate_affine_exact(
    model,
    policy: GaussianPolicy,
    initial: InitialCondition,
    horizon: float,
    dt: float,
    n_traj: int,
    seed=0,
    *,
    overflow_bound: float = OVERFLOW_BOUND,
    threads: int | None = None,
) -> TrajectoryBatch:
    """Sample the joint system from its exact Gaussian transition law.

    The representative and all particles (or the population mean in
    mean-only mode) are stacked into one affine SDE; its transition matrix
    and integrated covariance over ``dt`` come from matrix exponentials.
    """
    times, seq, noise = _prepare(initial, policy, model, horizon, dt, n_traj, seed, threads)
    s0, x0 = _initial_states(initial, noise)
    L, P, d = x0.shape
    loop = closed_loop_transition(model, policy, P, dt, initial.mean_only)
    steps = len(times) - 1
    if initial.mean_only:
        eps = np.concatenate([noise.rep, np.zeros_like(noise.rep)], axis=-1)
    else:
        pop_eps = np.moveaxis(noise.pop, 2, 1).reshape(L, steps, P * d)
        eps = np.concatenate([noise.rep, pop_eps], axis=-1)
    z = np.concatenate([s0, x0.reshape(L, P * d)], axis=-1)
    path = np.empty((L, steps + 1, z.shape[1]))
    path[:, 0] = z
    _check_overflow((z,), 0, overflow_bound)
    tt, ss = loop.transition.T, loop.noise_sqrt.T
    for k in range(steps):
        z = z @ tt + loop.offset + eps[:, k] @ ss
        _check_overflow((z,), k + 1, overflow_bound)
        path[:, k + 1] = z
    states = path[..., :d]
    pop = path[..., d:].reshape(L, steps + 1, P, d)
    return TrajectoryBatch(times, dt, states, pop, initial.mean_only, "exact", _seed_record(seq))


def supports_exact(model) -> bool:
    return (
        model.affine_dynamics() is not None
        and model.affine_in_action
        and model.diffusion_action_free
    )


def simulate(model, policy, initial, horizon, dt, n_traj, seed=0, *, method="auto", **kw):
    """Dispatch to the exact sampler when possible (``method='auto'``)."""
    if method == "auto":
        method = "exact" if supports_exact(model) else "euler"
    if method == "exact":
        return simulate_affine_exact(model, policy, initial, horizon, dt, n_traj, seed, **kw)
    if method == "euler":
        return simulate_euler(model, policy, initial, horizon, dt, n_traj, seed, **kw)
    raise ParameterError(f"unknown simulation method {method!r}")


@dataclass(eq=False)
class OccupancySampleSet:
    """Flattened ``(s, mu)`` observations with occupancy weights.

    ``population`` holds uniformly weighted clouds of shape ``(N_D, P, d)``;
    ``trajectory`` records which path each observation came from.
    """

    states: np.ndarray
    population: np.ndarray
    weights: np.ndarray
    times: np.ndarray
    trajectory: np.ndarray
    n_traj: int
    mode: str = "discounted"

    def __post_init__(self):
        if self.states.shape[0] == 0:
            raise ParameterError("empty sample set")
        self._measure = None

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def measure(self) -> EmpiricalMeasure:
        if self._measure is None:
            self._measure = EmpiricalMeasure(self.population)
        return self._measure

    @property
    def population_mean(self) -> np.ndarray:
        return self.population.mean(axis=-2)

    def scaled(self, c: float):
        return OccupancySampleSet(
            self.states, self.population, self.weights * c, self.times, self.trajectory,
            self.n_traj, self.mode,
        )

    def subset(self, index):
        index = np.asarray(index)
        return OccupancySampleSet(
            self.states[index], self.population[index], self.weights[index], self.times[index],
            self.trajectory[index], self.n_traj, self.mode,
        )


def occupancy_samples(batch: TrajectoryBatch, mode: str = "discounted", beta: float = 1.0):
    """Empirical occupancy measure of a batch.

    ``discounted``: weight ``exp(-beta t) dt / L`` per grid point;
    ``uniform``: weight ``1 / (L N)``.
    """
    L, N = batch.n_traj, batch.n_steps
    if mode == "discounted":
        w = np.exp(-beta * batch.times) * batch.dt / L
    elif mode == "uniform":
        w = np.full(N, 1.0 / (L * N))
    else:
        raise ParameterError(f"unknown occupancy mode {mode!r}")
    d = batch.states.shape[-1]
    P = batch.population.shape[2]
    return OccupancySampleSet(
        states=batch.states.reshape(L * N, d),
        population=batch.population.reshape(L * N, P, d),
        weights=np.tile(w, L),
        times=np.tile(batch.times, L),
        trajectory=np.repeat(np.arange(L), N),
        n_traj=L,
        mode=mode,
    )


def discounted_returns(batch: TrajectoryBatch, model, policy, rng=None, n_actions=64):
    """Per-trajectory ``sum_k exp(-beta t_k) r_lambda(s_k, mu_k) dt``."""
    L, N, d = batch.states.shape
    mu = EmpiricalMeasure(batch.population.reshape(L * N, -1, d))
    r = regularized_reward(policy, model, batch.states.reshape(L * N, d), mu, rng, n_actions)
    disc = np.exp(-model.discount * batch.times) * batch.dt
    return (r.reshape(L, N) * disc).sum(axis=1)


class ValueEstimate(NamedTuple):
    value: float
    std_err: float
    returns: np.ndarray


def estimate_value(
    model,
    policy,
    initial,
    horizon,
    dt,
    n_traj,
    seed=0,
    *,
    method="auto",
    n_actions=64,
    threads=None,
) -> ValueEstimate:
    """Monte-Carlo estimate of the truncated discounted objective."""
    batch = simulate(model, policy, initial, horizon, dt, n_traj, seed, method=method, threads=threads)
    rng = _generator(child_sequence(seed_sequence(seed), 2**31 - 2))
    ret = discounted_returns(batch, model, policy, rng, n_actions)
    err = ret.std(ddof=1) / np.sqrt(n_traj) if n_traj > 1 else float("nan")
    return ValueEstimate(float(ret.mean()), float(err), ret)

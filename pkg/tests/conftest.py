import numpy as np
import pytest
import scipy.linalg

from mfac.config import shipped_config
from mfac.experiment import load_experiment
from mfac.models import LQRModel, MeanFieldModel
from mfac.policy import AffineFeatureMap, GaussianPolicy
from mfac.riccati import optimal_policy, solve_riccati
from mfac.simulate import InitialCondition

SYSRISK = dict(A=-1.0, Abar=1.0, B=1.0, gamma=0.5, Q=1.0, Qbar=1.0, N=0.5, temperature=0.2, discount=1.0)


@pytest.fixture(scope="session")
def sysrisk():
    return LQRModel.from_dict(SYSRISK)


@pytest.fixture(scope="session")
def sysrisk_solution(sysrisk):
    return solve_riccati(sysrisk)


@pytest.fixture(scope="session")
def sysrisk_optimal(sysrisk, sysrisk_solution):
    return optimal_policy(sysrisk_solution, sysrisk)


def sysrisk_policy(w1, w2, var=0.2):
    return GaussianPolicy(np.array([[w1, w2]]), np.array([[var]]), AffineFeatureMap.deviation_and_mean(1))


@pytest.fixture(scope="session")
def sysrisk_initial():
    return InitialCondition([1.0], [[1.0]], [1.0])


@pytest.fixture(scope="session")
def crowd_experiment():
    return load_experiment(shipped_config("crowd"))


@pytest.fixture(scope="session")
def sysrisk_experiment():
    return load_experiment(shipped_config("sysrisk"))


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def sysrisk_policy_value(w1, w2, var=0.2, params=SYSRISK):
    """Exact value of a deviation/mean feedback on the scalar systemic-risk model.

    In ``y = s - mbar`` and ``m = mbar`` the closed loop is linear with
    ``dy = (A + B w1) y dt + gamma dW`` and ``dm = (A + Abar + B w2) m dt``, so
    ``V = -(z'Pz + c)`` with ``P`` from a Lyapunov equation.  Returns the
    coefficients on ``(1, mbar^2, (s - mbar) mbar, (s - mbar)^2)``.
    """
    p = params
    A, Ab, B, g, Q, Qb, N = (p[k] for k in ("A", "Abar", "B", "gamma", "Q", "Qbar", "N"))
    lam, beta = p["temperature"], p["discount"]
    M = np.array([[A + B * w1, 0.0], [0.0, A + Ab + B * w2]])
    # reward Q s^2 + Qbar m^2 + N a^2 with s = y + m and a = w1 y + w2 m
    C = np.array([
        [Q + N * w1**2, Q + N * w1 * w2],
        [Q + N * w1 * w2, Q + Qb + N * w2**2],
    ])
    P = scipy.linalg.solve_continuous_lyapunov((M - beta / 2 * np.eye(2)).T, -C)
    entropy = 0.5 * np.log(2 * np.pi * np.e * var)
    c = (g**2 * P[0, 0] + N * var - lam * entropy) / beta
    return np.array([-c, -P[1, 1], -2 * P[0, 1], -P[0, 0]])


class ConstantRewardModel(MeanFieldModel):
    """Zero dynamics, reward ``c`` everywhere; no closed-form expectations."""

    state_dim = action_dim = noise_dim = 1
    temperature = 0.0

    def __init__(self, c, discount=1.0):
        self.c = c
        self.discount = discount

    def drift(self, x, mbar, a):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(a)))

    def diffusion(self, x, mbar, a):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(a)) + (1,))

    def reward(self, x, mu, a):
        return np.full(np.shape(a)[:-1], float(self.c))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

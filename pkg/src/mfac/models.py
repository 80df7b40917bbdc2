"""Controlled mean-field dynamics and rewards.

A model supplies pointwise coefficients ``b(x, mu, a)``, ``sigma(x, mu, a)``
and ``r(x, mu, a)`` plus structure flags telling the simulator, critic and
actor which closed-form shortcuts are valid.  Drift and diffusion only see
the population through its mean; the reward may see the whole cloud.

All evaluators broadcast over leading axes.  Extra sample axes for actions
must be *leading* axes, e.g. actions of shape ``(k, B, m)`` against states
of shape ``(B, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _linalg
from .config import as_matrix, as_vector, read_config
from .exceptions import ConfigError, ParameterError
from .measures import EmpiricalMeasure, kernel_convolution
from .policy import population_mean

__all__ = [
    "MeanFieldModel",
    "AffineDynamics",
    "LQRModel",
    "CrowdModel",
    "LQRDiagnostics",
    "lqr_reward",
    "crowd_reward",
    "check_lqr_assumptions",
    "model_from_dict",
    "load_model",
]


class AffineDynamics(NamedTuple):
    """``dx = (state x + mean mbar + action a + offset) dt + noise dW``."""

    state: np.ndarray
    mean: np.ndarray
    action: np.ndarray
    offset: np.ndarray
    noise: np.ndarray


class MeanFieldModel:
    """Interface for controlled mean-field models.

    Subclasses must implement :meth:`drift`, :meth:`diffusion` and
    :meth:`reward`.  The remaining hooks return ``None`` when no closed form
    is available, in which case callers fall back to Monte Carlo.
    """

    state_dim: int
    action_dim: int
    noise_dim: int
    temperature: float
    discount: float

    affine_in_action = False
    mean_field_via_mean_only = False
    diffusion_action_free = False
    # reward and sigma sigma^T quadratic, drift affine in the action
    quadratic_in_action = False

    name = "model"

    def drift(self, x, mbar, a):
        raise NotImplementedError

    def diffusion(self, x, mbar, a):
        raise NotImplementedError

    def reward(self, x, mu, a):
        raise NotImplementedError

    def averaged_drift(self, x, mbar, mean, cov):
        if self.affine_in_action:
            return self.drift(x, mbar, mean)
        return None

    def averaged_diffusion(self, x, mbar, mean, cov):
        if self.diffusion_action_free:
            sig = self.diffusion(x, mbar, mean)
            return np.einsum("...in,...jn->...ij", sig, sig)
        return None

    def expected_reward(self, x, mu, mean, cov):
        return None

    def reward_action_grad(self, x, mu, a):
        return None

    def drift_action_matrix(self, x, mbar):
        return None

    def diffusion_action_grad(self, x, mbar, a, hess):
        """Gradient in ``a`` of ``0.5 sigma sigma^T : hess``."""
        if self.diffusion_action_free:
            shape = np.broadcast_shapes(np.shape(a), np.shape(hess)[:-2] + (self.action_dim,))
            return np.zeros(shape)
        return None

    def affine_dynamics(self) -> AffineDynamics | None:
        return None


@dataclass(frozen=True, eq=False)
class LQRModel(MeanFieldModel):
    """Mean-field linear-quadratic model driven by one Brownian motion.

    ``dx = (A x + Abar mbar + B a) dt + (gamma + D x + Dbar mbar + F a) dW``
    with reward
    ``-(x'Qx + mbar'Qbar mbar + a'Na + 2a'Ix + 2M'x + 2H'a)``.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    N: np.ndarray
    Abar: np.ndarray = None
    D: np.ndarray = None
    Dbar: np.ndarray = None
    F: np.ndarray = None
    gamma: np.ndarray = None
    Qbar: np.ndarray = None
    I: np.ndarray = None  # noqa: E741
    M: np.ndarray = None
    H: np.ndarray = None
    temperature: float = 1.0
    discount: float = 1.0
    name: str = field(default="lqr", compare=False)

    affine_in_action = True
    mean_field_via_mean_only = True
    quadratic_in_action = True

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d = A.shape[0]
        B = np.asarray(self.B, dtype=float)
        B = B.reshape(d, -1) if B.ndim < 2 else B
        m = B.shape[1]

        def mat(v, shape, name):
            if v is None:
                return np.zeros(shape)
            arr = np.asarray(v, dtype=float)
            if arr.size == np.prod(shape) and arr.shape != shape:
                arr = arr.reshape(shape)
            if arr.shape != shape:
                raise ParameterError(f"{name} must have shape {shape}, got {arr.shape}")
            return arr

        vals = {
            "A": mat(A, (d, d), "A"),
            "B": mat(B, (d, m), "B"),
            "Abar": mat(self.Abar, (d, d), "Abar"),
            "D": mat(self.D, (d, d), "D"),
            "Dbar": mat(self.Dbar, (d, d), "Dbar"),
            "F": mat(self.F, (d, m), "F"),
            "gamma": mat(self.gamma, (d,), "gamma"),
            "Q": mat(self.Q, (d, d), "Q"),
            "Qbar": mat(self.Qbar, (d, d), "Qbar"),
            "N": mat(self.N, (m, m), "N"),
            "I": mat(self.I, (m, d), "I"),
            "M": mat(self.M, (d,), "M"),
            "H": mat(self.H, (m,), "H"),
        }
        for key in ("Q", "Qbar", "N"):
            if not np.allclose(vals[key], vals[key].T):
                raise ParameterError(f"{key} must be symmetric")
        if not _linalg.is_positive_definite(vals["N"]):
            raise ParameterError("N must be positive definite")
        for key in ("Q", "Qbar"):
            if np.linalg.eigvalsh(vals[key]).min() < -1e-12:
                raise ParameterError(f"{key} must be positive semidefinite")
        if not self.temperature > 0 or not self.discount > 0:
            raise ParameterError("temperature and discount must be positive")
        for key, arr in vals.items():
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)

    @property
    def state_dim(self):
        return self.A.shape[0]

    @property
    def action_dim(self):
        return self.B.shape[1]

    @property
    def noise_dim(self):
        return 1

    @property
    def diffusion_action_free(self):
        return not np.any(self.F)

    @property
    def state_independent_noise(self):
        return not (np.any(self.D) or np.any(self.Dbar))

    def drift(self, x, mbar, a):
        return x @ self.A.T + np.asarray(mbar) @ self.Abar.T + np.asarray(a) @ self.B.T

    def _noise_vector(self, x, mbar, a):
        v = self.gamma
        if np.any(self.D):
            v = v + np.asarray(x) @ self.D.T
        if np.any(self.Dbar):
            v = v + np.asarray(mbar) @ self.Dbar.T
        if np.any(self.F):
            v = v + np.asarray(a) @ self.F.T
        return v

    def diffusion(self, x, mbar, a):
        v = self._noise_vector(x, mbar, a)
        shape = np.broadcast_shapes(np.shape(x), np.shape(mbar), np.shape(a)[:-1] + (self.state_dim,))
        return np.broadcast_to(v, shape)[..., None]

    def averaged_diffusion(self, x, mbar, mean, cov):
        v = self._noise_vector(x, mbar, mean)
        out = v[..., :, None] * v[..., None, :]
        if np.any(self.F):
            out = out + self.F @ cov @ self.F.T
        return out

    def reward(self, x, mu, a):
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        mbar = population_mean(mu)
        quad = np.einsum("...i,ij,...j->...", x, self.Q, x)
        quad = quad + np.einsum("...i,ij,...j->...", mbar, self.Qbar, mbar)
        quad = quad + 2.0 * (x @ self.M)
        act = np.einsum("...i,ij,...j->...", a, self.N, a) + 2.0 * np.einsum(
            "...i,ij,...j->...", a, self.I, x
        ) + 2.0 * (a @ self.H)
        return -(quad + act)

    def expected_reward(self, x, mu, mean, cov):
        return self.reward(x, mu, mean) - np.trace(self.N @ cov)

    def reward_action_grad(self, x, mu, a):
        return -2.0 * (np.asarray(a) @ self.N + np.asarray(x) @ self.I.T + self.H)

    def drift_action_matrix(self, x, mbar):
        return self.B

    def diffusion_action_grad(self, x, mbar, a, hess):
        if not np.any(self.F):
            return super().diffusion_action_grad(x, mbar, a, hess)
        v = self._noise_vector(x, mbar, a)
        return np.einsum("ji,...jk,...k->...i", self.F, hess, v)

    def affine_dynamics(self):
        if np.any(self.F) or np.any(self.D) or np.any(self.Dbar):
            return None
        return AffineDynamics(self.A, self.Abar, self.B, np.zeros(self.state_dim), self.gamma[:, None])

    @classmethod
    def from_dict(cls, data: dict):
        try:
            A = as_matrix(data["A"], name="A")
            d = A.shape[0]
            B = as_matrix(data["B"], name="B")
            B = B.reshape(d, -1)
            m = B.shape[1]
            kw = dict(
                A=A,
                B=B,
                Q=as_matrix(data["Q"], (d, d), "Q"),
                N=as_matrix(data["N"], (m, m), "N"),
                temperature=float(data["temperature"]),
                discount=float(data["discount"]),
            )
        except KeyError as exc:
            raise ConfigError(f"model: missing required field {exc.args[0]!r}") from None
        shapes = {"Abar": (d, d), "D": (d, d), "Dbar": (d, d), "F": (d, m), "Qbar": (d, d), "I": (m, d)}
        for key, shape in shapes.items():
            if key in data:
                kw[key] = as_matrix(data[key], shape, key)
        for key, size in {"gamma": d, "M": d, "H": m}.items():
            if key in data:
                kw[key] = as_vector(data[key], size, key)
        kw["name"] = data.get("name", "lqr")
        try:
            return cls(**kw)
        except ParameterError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def to_dict(self) -> dict:
        out = {"kind": "lqr", "name": self.name}
        for key in ("A", "Abar", "B", "D", "Dbar", "F", "gamma", "Q", "Qbar", "N", "I", "M", "H"):
            out[key] = getattr(self, key).tolist()
        out["temperature"] = self.temperature
        out["discount"] = self.discount
        return out


@dataclass(frozen=True, eq=False)
class CrowdModel(MeanFieldModel):
    """Crowd-aversion model: ``dx = a dt + sigma dW`` with reward
    ``-(|a|^2/2 + kappa/2 |x - target|^2 + crowd_weight (K_eta * mu)(x) + rho/2 |x|^2)``.
    """

    sigma: float
    kappa: float
    crowd_weight: float
    eta: float
    rho: float
    target: np.ndarray
    temperature: float = 1.0
    discount: float = 1.0
    name: str = field(default="crowd", compare=False)

    affine_in_action = True
    mean_field_via_mean_only = False
    diffusion_action_free = True
    quadratic_in_action = True

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.target, dtype=float))
        t.setflags(write=False)
        object.__setattr__(self, "target", t)
        if not (self.sigma > 0 and self.eta > 0):
            raise ParameterError("sigma and eta must be positive")
        if self.kappa < 0 or self.crowd_weight < 0 or self.rho < 0:
            raise ParameterError("kappa, crowd_weight and rho must be nonnegative")
        if not self.temperature > 0 or not self.discount > 0:
            raise ParameterError("temperature and discount must be positive")

    @property
    def state_dim(self):
        return self.target.shape[0]

    @property
    def action_dim(self):
        return self.state_dim

    @property
    def noise_dim(self):
        return self.state_dim

    def drift(self, x, mbar, a):
        shape = np.broadcast_shapes(np.shape(x), np.shape(a))
        return np.broadcast_to(np.asarray(a, dtype=float), shape)

    def diffusion(self, x, mbar, a):
        shape = np.broadcast_shapes(np.shape(x), np.shape(a))
        return np.broadcast_to(self.sigma * np.eye(self.state_dim), shape + (self.state_dim,))

    def averaged_diffusion(self, x, mbar, mean, cov):
        return self.sigma**2 * np.eye(self.state_dim)

    def state_cost(self, x, mu):
        """Action-independent part of the reward (nonpositive)."""
        x = np.asarray(x, dtype=float)
        dt = x - self.target
        cost = 0.5 * self.kappa * np.einsum("...i,...i->...", dt, dt)
        cost = cost + 0.5 * self.rho * np.einsum("...i,...i->...", x, x)
        if self.crowd_weight:
            cost = cost + self.crowd_weight * kernel_convolution(mu, x, self.eta)
        return -cost

    def reward(self, x, mu, a):
        a = np.asarray(a, dtype=float)
        return self.state_cost(x, mu) - 0.5 * np.einsum("...i,...i->...", a, a)

    def expected_reward(self, x, mu, mean, cov):
        return self.reward(x, mu, mean) - 0.5 * np.trace(cov)

    def reward_action_grad(self, x, mu, a):
        return -np.asarray(a, dtype=float)

    def drift_action_matrix(self, x, mbar):
        return np.eye(self.state_dim)

    def affine_dynamics(self):
        d = self.state_dim
        z = np.zeros((d, d))
        return AffineDynamics(z, z, np.eye(d), np.zeros(d), self.sigma * np.eye(d))

    @classmethod
    def from_dict(cls, data: dict):
        try:
            kw = dict(
                sigma=float(data["sigma"]),
                kappa=float(data["kappa"]),
                crowd_weight=float(data["crowd_weight"]),
                eta=float(data["eta"]),
                rho=float(data["rho"]),
                target=as_vector(data["target"], name="target"),
                temperature=float(data["temperature"]),
                discount=float(data["discount"]),
                name=data.get("name", "crowd"),
            )
        except KeyError as exc:
            raise ConfigError(f"model: missing required field {exc.args[0]!r}") from None
        try:
            return cls(**kw)
        except ParameterError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "kind": "crowd",
            "name": self.name,
            "sigma": self.sigma,
            "kappa": self.kappa,
            "crowd_weight": self.crowd_weight,
            "eta": self.eta,
            "rho": self.rho,
            "target": self.target.tolist(),
            "temperature": self.temperature,
            "discount": self.discount,
        }


def lqr_reward(spec: LQRModel, x, mu, a):
    """Running LQ reward at ``(x, mu, a)``; ``mu`` may be a measure or its mean."""
    return spec.reward(x, mu, a)


def crowd_reward(spec: CrowdModel, x, mu: EmpiricalMeasure, a):
    return spec.reward(x, mu, a)


@dataclass
class LQRDiagnostics:
    """Outcome of :func:`check_lqr_assumptions`.

    ``gain`` is a feedback ``Theta`` stabilizing the shifted mean dynamics,
    ``certificate_gain``/``certificate`` the pair found for the mean-square
    Lyapunov inequality.  Both are ``None`` when the search failed.
    """

    n_positive_definite: bool
    q_condition: bool
    q_plus_qbar_condition: bool
    stabilizable: bool
    certificate_found: bool
    gain: np.ndarray | None = None
    certificate_gain: np.ndarray | None = None
    certificate: np.ndarray | None = None
    trials: int = 0
    messages: list = field(default_factory=list)

    @property
    def h1(self) -> bool:
        return self.n_positive_definite and self.q_condition and self.q_plus_qbar_condition

    @property
    def h2(self) -> bool:
        return self.stabilizable and self.certificate_found

    @property
    def ok(self) -> bool:
        return self.h1 and self.h2


def _candidate_gains(a, b, rng, trials):
    m, d = b.shape[1], a.shape[0]
    yield np.zeros((m, d))
    for weight in (1.0, 10.0, 100.0, 0.1):
        g = _linalg.lqr_gain(a, b, weight)
        if g is not None:
            yield g
    scale = 1.0 + np.abs(a).max()
    for k in range(trials):
        yield rng.standard_normal((m, d)) * scale * 2.0 ** (k % 8 - 3)


def _mean_square_certificate(a_cl, c_cl):
    """``P > 0`` with ``a'P + Pa + c'Pc = -I``, or ``None``."""
    if not _linalg.is_hurwitz(a_cl):
        return None
    try:
        p = _linalg.solve_generalized_lyapunov(a_cl, np.eye(a_cl.shape[0]), c_cl)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(p)) or not _linalg.is_positive_definite(p):
        return None
    return p


def check_lqr_assumptions(spec: LQRModel, max_trials: int = 100, seed: int = 0) -> LQRDiagnostics:
    """Check definiteness and stabilizability conditions of an LQ model.

    Stabilizing gains are searched among ``0``, an auxiliary CARE gain and up
    to ``max_trials`` random gains.  Never raises; inspect the report.
    """
    d = spec.state_dim
    beta = spec.discount
    eye = np.eye(d)
    msgs = []
    n_pd = _linalg.is_positive_definite(spec.N)
    if n_pd:
        cross = spec.I.T @ np.linalg.solve(spec.N, spec.I)
        q_ok = _linalg.is_positive_definite(spec.Q - cross)
        qq_ok = _linalg.is_positive_definite(spec.Q + spec.Qbar - cross)
    else:
        q_ok = qq_ok = False
        msgs.append("N is not positive definite")
    if n_pd and not q_ok:
        msgs.append("Q - I'N^-1 I is not positive definite")
    if n_pd and not qq_ok:
        msgs.append("Q + Qbar - I'N^-1 I is not positive definite")

    a_beta = spec.A - 0.5 * beta * eye
    a_tilde = spec.A + spec.Abar - 0.5 * beta * eye
    rng = np.random.default_rng(seed)

    gain = None
    trials = 0
    for theta in _candidate_gains(a_tilde, spec.B, rng, max_trials):
        trials += 1
        if _linalg.is_hurwitz(a_tilde + spec.B @ theta):
            gain = theta
            break
    if gain is None:
        msgs.append("no stabilizing gain found for the shifted mean dynamics")

    cert_gain = cert = None
    for theta in _candidate_gains(a_beta, spec.B, rng, max_trials):
        trials += 1
        p = _mean_square_certificate(a_beta + spec.B @ theta, spec.D + spec.F @ theta)
        if p is not None:
            cert_gain, cert = theta, p
            break
    if cert is None:
        msgs.append("no mean-square Lyapunov certificate found")

    return LQRDiagnostics(
        n_positive_definite=n_pd,
        q_condition=q_ok,
        q_plus_qbar_condition=qq_ok,
        stabilizable=gain is not None,
        certificate_found=cert is not None,
        gain=gain,
        certificate_gain=cert_gain,
        certificate=cert,
        trials=trials,
        messages=msgs,
    )


_REGISTRY = {
    "lqr-systemic-risk": LQRModel,
    "lqr": LQRModel,
    "crowd-aversion": CrowdModel,
    "crowd": CrowdModel,
}


def model_from_dict(data: dict) -> MeanFieldModel:
    """Build a model from the ``[model]`` table of a configuration."""
    name = data.get("name", data.get("kind"))
    if name not in _REGISTRY:
        raise ConfigError(f"unknown model {name!r}; expected one of {sorted(_REGISTRY)}")
    return _REGISTRY[name].from_dict({**data, "name": name})


def load_model(path) -> MeanFieldModel:
    cfg = read_config(path)
    if "model" not in cfg:
        raise ConfigError(f"{path}: missing [model] table")
    return model_from_dict(cfg["model"])

"""Gaussian feedback policies over affine features of ``(s, mean(mu))``.

A policy draws actions from ``N(W f(s, mu), Sigma0)`` where ``f`` is an
:class:`AffineFeatureMap` and the covariance ``Sigma0`` does not depend on
the state.  Wherever a population argument ``mu`` is expected, either an
:class:`~mfac.measures.EmpiricalMeasure` or its mean vector may be passed,
since the features only see the mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import ParameterError
from .measures import EmpiricalMeasure, mean as measure_mean

__all__ = [
    "AffineFeatureMap",
    "GaussianPolicy",
    "AveragedCoefficients",
    "averaged_coefficients",
    "population_mean",
    "regularized_reward",
]


def population_mean(mu) -> np.ndarray:
    """Mean of an EmpiricalMeasure, or ``mu`` itself if it is already an array."""
    if isinstance(mu, EmpiricalMeasure):
        return measure_mean(mu)
    return np.asarray(mu, dtype=float)


def _matrix_to_json(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def _matrix_from_json(obj):
    if isinstance(obj, dict):
        return np.asarray(obj["data"], dtype=float).reshape(obj["shape"])
    return np.asarray(obj, dtype=float)


@dataclass(frozen=True, eq=False)
class AffineFeatureMap:
    """``f(s, mu) = offset + state @ s + mean @ mean(mu)``.

    Parameters
    ----------
    offset : array, shape (d_f,)
    state, mean : arrays, shape (d_f, d)
    names : tuple of str, optional
        Column labels used in logs.
    """

    offset: np.ndarray
    state: np.ndarray
    mean: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        off = np.atleast_1d(np.asarray(self.offset, dtype=float))
        st = np.atleast_2d(np.asarray(self.state, dtype=float))
        mn = np.atleast_2d(np.asarray(self.mean, dtype=float))
        if st.shape != mn.shape or st.shape[0] != off.shape[0]:
            raise ParameterError(
                f"inconsistent feature map shapes {off.shape}, {st.shape}, {mn.shape}"
            )
        names = tuple(self.names) or tuple(f"f{i + 1}" for i in range(off.shape[0]))
        if len(names) != off.shape[0]:
            raise ParameterError("one name per feature is required")
        for arr in (off, st, mn):
            arr.setflags(write=False)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "state", st)
        object.__setattr__(self, "mean", mn)
        object.__setattr__(self, "names", names)

    @property
    def dim(self) -> int:
        return self.offset.shape[0]

    @property
    def state_dim(self) -> int:
        return self.state.shape[1]

    def __call__(self, s, mu) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        mbar = population_mean(mu)
        return self.offset + s @ self.state.T + mbar @ self.mean.T

    @classmethod
    def deviation_and_mean(cls, d: int = 1):
        """Features ``(s - mean, mean)``; used by the systemic-risk actor."""
        eye = np.eye(d)
        names = tuple(f"dev{i + 1}" for i in range(d)) + tuple(f"mbar{i + 1}" for i in range(d))
        return cls(np.zeros(2 * d), np.vstack([eye, 0 * eye]), np.vstack([-eye, eye]), names)

    @classmethod
    def affine(cls, d: int):
        """Features ``(1, s, mean)``; spans every affine feedback."""
        eye = np.eye(d)
        zero = np.zeros((1, d))
        names = ("one",) + tuple(f"s{i + 1}" for i in range(d)) + tuple(
            f"mbar{i + 1}" for i in range(d)
        )
        off = np.r_[1.0, np.zeros(2 * d)]
        return cls(off, np.vstack([zero, eye, 0 * eye]), np.vstack([zero, 0 * eye, eye]), names)

    @classmethod
    def target_tracking(cls, target):
        """Features ``(1, s, s - target, mean)``; used by the crowd actor."""
        t = np.atleast_1d(np.asarray(target, dtype=float))
        d = t.shape[0]
        eye = np.eye(d)
        zero = np.zeros((1, d))
        off = np.r_[1.0, np.zeros(d), -t, np.zeros(d)]
        names = (
            ("one",)
            + tuple(f"s{i + 1}" for i in range(d))
            + tuple(f"s{i + 1}_minus_target" for i in range(d))
            + tuple(f"mbar{i + 1}" for i in range(d))
        )
        return cls(off, np.vstack([zero, eye, eye, 0 * eye]), np.vstack([zero, 0 * eye, 0 * eye, eye]), names)

    def to_dict(self) -> dict:
        return {
            "offset": self.offset.tolist(),
            "state": _matrix_to_json(self.state),
            "mean": _matrix_to_json(self.mean),
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, data: dict):
        kind = data.get("kind")
        if kind == "deviation_and_mean":
            return cls.deviation_and_mean(int(data.get("dim", 1)))
        if kind == "affine":
            return cls.affine(int(data["dim"]))
        if kind == "target_tracking":
            return cls.target_tracking(data["target"])
        if kind is not None:
            raise ParameterError(f"unknown feature map kind {kind!r}")
        return cls(
            np.asarray(data["offset"], dtype=float),
            _matrix_from_json(data["state"]),
            _matrix_from_json(data["mean"]),
            tuple(data.get("names", ())),
        )


@dataclass(frozen=True, eq=False)
class GaussianPolicy:
    """Randomized feedback ``a ~ N(W f(s, mu), Sigma0)``.

    Parameters
    ----------
    weights : array, shape (m, d_f)
        Actor parameter ``W``.
    covariance : array, shape (m, m)
        Symmetric positive definite action covariance.
    features : AffineFeatureMap
    """

    weights: np.ndarray
    covariance: np.ndarray
    features: AffineFeatureMap

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if w.shape[1] != self.features.dim:
            raise ParameterError(
                f"weights have {w.shape[1]} columns but the feature map has {self.features.dim}"
            )
        if cov.shape != (w.shape[0], w.shape[0]):
            raise ParameterError(f"covariance shape {cov.shape} does not match {w.shape[0]} actions")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * (1 + np.abs(cov).max())):
            raise ParameterError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ParameterError("covariance must be positive definite") from None
        for arr in (w, cov, chol):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_precision", np.linalg.inv(cov))

    @property
    def action_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def cholesky(self) -> np.ndarray:
        return self._chol

    @property
    def precision(self) -> np.ndarray:
        return self._precision

    def with_weights(self, weights):
        return GaussianPolicy(weights, self.covariance, self.features)

    def with_covariance(self, covariance):
        return GaussianPolicy(self.weights, covariance, self.features)

    def mean_action(self, s, mu) -> np.ndarray:
        return self.features(s, mu) @ self.weights.T

    def log_density(self, a, s, mu) -> np.ndarray:
        dev = np.asarray(a, dtype=float) - self.mean_action(s, mu)
        quad = np.einsum("...i,ij,...j->...", dev, self._precision, dev)
        logdet = 2.0 * np.log(np.diag(self._chol)).sum()
        return -0.5 * (quad + logdet + self.action_dim * math.log(2 * math.pi))

    def score(self, a, s, mu) -> np.ndarray:
        """Gradient of the log-density in ``W``, shape ``(..., m, d_f)``."""
        f = self.features(s, mu)
        dev = np.asarray(a, dtype=float) - f @ self.weights.T
        return (dev @ self._precision)[..., :, None] * f[..., None, :]

    def entropy(self) -> float:
        logdet = 2.0 * np.log(np.diag(self._chol)).sum()
        return 0.5 * (self.action_dim * math.log(2 * math.pi * math.e) + logdet)

    def sample_action(self, s, mu, rng: np.random.Generator, size=None) -> np.ndarray:
        """Draw actions; ``size`` prepends sample axes to the broadcast shape."""
        m = self.mean_action(s, mu)
        shape = (() if size is None else tuple(np.atleast_1d(size))) + m.shape
        z = rng.standard_normal(shape)
        return m + z @ self._chol.T

    def to_dict(self) -> dict:
        return {
            "weights": _matrix_to_json(self.weights),
            "covariance_cholesky": _matrix_to_json(self._chol),
            "features": self.features.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict):
        w = _matrix_from_json(data["weights"])
        chol = _matrix_from_json(data["covariance_cholesky"])
        if np.any(np.triu(chol, 1) != 0):
            raise ParameterError("covariance factor must be lower triangular")
        return cls(w, chol @ chol.T, AffineFeatureMap.from_dict(data["features"]))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class AveragedCoefficients(NamedTuple):
    """Policy-averaged drift and squared diffusion at a batch of points."""

    drift: np.ndarray
    cov: np.ndarray
    clamped: bool


def _psd_clamp(cov, tol=1e-10):
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    scale = np.maximum(1.0, np.abs(vals).max(axis=-1, keepdims=True))
    if np.all(vals >= -tol * scale):
        return sym, False
    vals = np.clip(vals, 0.0, None)
    return np.einsum("...ik,...k,...jk->...ij", vecs, vals, vecs), True


def averaged_coefficients(
    policy: GaussianPolicy,
    model,
    s,
    mu,
    rng: np.random.Generator | None = None,
    n_actions: int = 64,
) -> AveragedCoefficients:
    """Drift and ``sigma sigma^T`` averaged over the policy's action law.

    Closed Gaussian moments are used when the model provides them; otherwise
    ``n_actions`` draws from ``rng`` are averaged.
    """
    s = np.asarray(s, dtype=float)
    mbar = population_mean(mu)
    m = policy.mean_action(s, mbar)
    drift = model.averaged_drift(s, mbar, m, policy.covariance)
    cov = model.averaged_diffusion(s, mbar, m, policy.covariance)
    if drift is None or cov is None:
        if rng is None:
            raise ParameterError("a random generator is required for Monte-Carlo averaging")
        a = policy.sample_action(s, mbar, rng, size=n_actions)
        if drift is None:
            drift = model.drift(s, mbar, a).mean(axis=0)
        if cov is None:
            sig = model.diffusion(s, mbar, a)
            cov = np.einsum("k...in,k...jn->...ij", sig, sig) / n_actions
    drift = np.broadcast_to(drift, np.broadcast_shapes(np.shape(drift), s.shape))
    cov, clamped = _psd_clamp(np.asarray(cov, dtype=float))
    return AveragedCoefficients(drift, cov, clamped)


def regularized_reward(
    policy: GaussianPolicy,
    model,
    s,
    mu,
    rng: np.random.Generator | None = None,
    n_actions: int = 64,
) -> np.ndarray:
    """Action-averaged reward plus ``temperature * entropy``.

    The Gaussian expectation is taken in closed form when the model offers
    one and by ``n_actions`` Monte-Carlo draws otherwise.
    """
    s = np.asarray(s, dtype=float)
    m = policy.mean_action(s, mu)
    r = model.expected_reward(s, mu, m, policy.covariance)
    if r is None:
        if rng is None:
            raise ParameterError("a random generator is required for Monte-Carlo averaging")
        a = policy.sample_action(s, mu, rng, size=n_actions)
        r = model.reward(s, mu, a).mean(axis=0)
    return r + model.temperature * policy.entropy()

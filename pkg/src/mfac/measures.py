"""Weighted particle clouds and the measure functionals built on them.

A population law is represented by an :class:`EmpiricalMeasure`, i.e. a set
of particles with nonnegative weights summing to one.  Leading batch axes are
allowed, so ``particles`` of shape ``(B, N, d)`` with ``weights`` of shape
``(B, N)`` stores ``B`` independent clouds; every functional in this module
broadcasts over those axes.

Feature families map particles to finitely many scalar observables.  Each
feature carries hand-written first and second derivatives so that Lions
derivatives of cylindrical functions can be formed in closed form.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import FeatureEvaluationError, ParameterError

__all__ = [
    "EmpiricalMeasure",
    "Feature",
    "Monomial",
    "GaussianBump",
    "FeatureFamily",
    "mean",
    "second_moment",
    "moment_map",
    "kernel_convolution",
    "measure_to_csv",
    "measure_from_csv",
]

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted particle cloud, optionally batched.

    Parameters
    ----------
    particles : array_like, shape (..., N, d)
        Particle coordinates.  A 1-D input is read as ``N`` scalar particles.
    weights : array_like, shape (..., N), optional
        Nonnegative weights summing to one along the last axis.  Defaults to
        uniform weights ``1/N``.
    """

    particles: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.particles, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1, 1)
        elif x.ndim == 1:
            x = x[:, None]
        if x.shape[-2] < 1:
            raise ParameterError("an empirical measure needs at least one particle")
        if not np.all(np.isfinite(x)):
            raise ParameterError("particle coordinates must be finite")
        if self.weights is None:
            n = x.shape[-2]
            w = np.full(x.shape[:-1], 1.0 / n)
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != x.shape[:-1]:
                raise ParameterError(
                    f"weights of shape {w.shape} do not match particles {x.shape}"
                )
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ParameterError("weights must be finite and nonnegative")
            if np.any(np.abs(w.sum(axis=-1) - 1.0) > _WEIGHT_TOL):
                raise ParameterError("weights must sum to one")
        x.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "particles", x)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, point):
        """Unit mass at ``point``."""
        p = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(p[None, :])

    @property
    def dim(self) -> int:
        return self.particles.shape[-1]

    @property
    def size(self) -> int:
        return self.particles.shape[-2]

    @property
    def batch_shape(self) -> tuple:
        return self.particles.shape[:-2]

    def shift(self, c):
        """Pushforward under ``x -> x + c``."""
        return EmpiricalMeasure(self.particles + np.asarray(c, dtype=float), self.weights)

    def permute(self, order):
        """Reorder particles (weights follow their particles)."""
        order = np.asarray(order)
        return EmpiricalMeasure(self.particles[..., order, :], self.weights[..., order])


def mean(mu: EmpiricalMeasure) -> np.ndarray:
    """Weighted average of the particles, shape ``(..., d)``."""
    return np.einsum("...n,...nd->...d", mu.weights, mu.particles)


def second_moment(mu: EmpiricalMeasure) -> np.ndarray:
    """Weighted average of ``|x|^2``."""
    sq = np.einsum("...nd,...nd->...n", mu.particles, mu.particles)
    return np.einsum("...n,...n->...", mu.weights, sq)


def kernel_convolution(mu: EmpiricalMeasure, s, eta: float) -> np.ndarray:
    """Gaussian kernel average ``sum_i w_i exp(-|s - x_i|^2 / (2 eta^2))``.

    ``s`` broadcasts against the batch shape of ``mu``.
    """
    if not eta > 0:
        raise ParameterError(f"kernel bandwidth must be positive, got {eta}")
    s = np.asarray(s, dtype=float)
    diff = s[..., None, :] - mu.particles
    sq = np.einsum("...nd,...nd->...n", diff, diff)
    return np.einsum("...n,...n->...", mu.weights, np.exp(-0.5 * sq / eta**2))


# ---------------------------------------------------------------------------
# features


class Feature:
    """Scalar field on R^d with closed-form gradient and Hessian.

    Subclasses implement :meth:`value`, :meth:`grad` and :meth:`hess`, all
    vectorized over leading axes of ``x``.
    """

    dim: int

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def generator(self, x, drift, cov):
        """``drift . grad(x) + 0.5 cov : hess(x)`` evaluated pointwise."""
        g = self.grad(x)
        h = self.hess(x)
        return np.einsum("...d,...d->...", drift, g) + 0.5 * np.einsum(
            "...ij,...ij->...", cov, h
        )

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Monomial(Feature):
    """``x -> prod_i x_i ** exponents[i]``."""

    exponents: tuple

    def __post_init__(self):
        e = tuple(int(k) for k in self.exponents)
        if any(k < 0 for k in e):
            raise ParameterError("monomial exponents must be nonnegative")
        object.__setattr__(self, "exponents", e)

    @classmethod
    def coordinate(cls, i: int, d: int, power: int = 1):
        e = [0] * d
        e[i] = power
        return cls(tuple(e))

    @property
    def dim(self) -> int:
        return len(self.exponents)

    def _factor(self, x, i, order):
        # order-th derivative of x_i ** e_i
        e = self.exponents[i]
        if order > e:
            return np.zeros(x.shape[:-1])
        coef = 1.0
        for k in range(order):
            coef *= e - k
        return coef * x[..., i] ** (e - order)

    def _product(self, x, orders):
        out = np.ones(x.shape[:-1])
        for i in range(self.dim):
            out = out * self._factor(x, i, orders[i])
        return out

    def value(self, x):
        return self._product(x, [0] * self.dim)

    def grad(self, x):
        cols = []
        for j in range(self.dim):
            orders = [0] * self.dim
            orders[j] = 1
            cols.append(self._product(x, orders))
        return np.stack(cols, axis=-1)

    def hess(self, x):
        d = self.dim
        out = np.empty(x.shape[:-1] + (d, d))
        for j in range(d):
            for k in range(j, d):
                orders = [0] * d
                orders[j] += 1
                orders[k] += 1
                out[..., j, k] = out[..., k, j] = self._product(x, orders)
        return out

    def to_dict(self):
        return {"kind": "monomial", "exponents": list(self.exponents)}


@dataclass(frozen=True)
class GaussianBump(Feature):
    """``x -> exp(-|x - center|^2 / (2 bandwidth^2))``."""

    center: tuple
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ParameterError("bandwidth must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))

    @property
    def dim(self) -> int:
        return len(self.center)

    def _parts(self, x):
        diff = x - np.asarray(self.center)
        val = np.exp(-0.5 * np.einsum("...d,...d->...", diff, diff) / self.bandwidth**2)
        return diff, val

    def value(self, x):
        return self._parts(x)[1]

    def grad(self, x):
        diff, val = self._parts(x)
        return -val[..., None] * diff / self.bandwidth**2

    def hess(self, x):
        diff, val = self._parts(x)
        h2 = self.bandwidth**2
        outer = diff[..., :, None] * diff[..., None, :] / h2**2
        return val[..., None, None] * (outer - np.eye(self.dim) / h2)

    def generator(self, x, drift, cov):
        diff, val = self._parts(x)
        h2 = self.bandwidth**2
        first = -np.einsum("...d,...d->...", drift, diff) / h2
        quad = np.einsum("...i,...ij,...j->...", diff, cov, diff) / h2**2
        trace = np.trace(cov, axis1=-2, axis2=-1) / h2
        return val * (first + 0.5 * (quad - trace))

    def to_dict(self):
        return {"kind": "gaussian-bump", "center": list(self.center), "bandwidth": self.bandwidth}


class FeatureFamily:
    """Ordered collection of features sharing one input dimension.

    Parameters
    ----------
    features : sequence of Feature
    clip : (lower, upper), optional
        Box to which inputs are clamped before evaluation.  Clamping only
        affects feature evaluation; derivatives are those of the feature at
        the clamped point.
    """

    def __init__(self, features: Sequence[Feature], clip=None):
        self.features = tuple(features)
        if not self.features:
            raise ParameterError("a feature family needs at least one feature")
        dims = {f.dim for f in self.features}
        if len(dims) != 1:
            raise ParameterError(f"features disagree on dimension: {sorted(dims)}")
        self.dim = dims.pop()
        if clip is not None:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (self.dim,)) for b in clip)
            if np.any(lo > hi):
                raise ParameterError("clip box has lower > upper")
            clip = (lo.copy(), hi.copy())
        self.clip = clip

    def __len__(self):
        return len(self.features)

    def __repr__(self):
        return f"FeatureFamily({len(self)} features, dim={self.dim}, clip={self.clip is not None})"

    @classmethod
    def identity(cls, d: int):
        """Coordinate features ``x -> x_i``."""
        return cls([Monomial.coordinate(i, d) for i in range(d)])

    @classmethod
    def gaussian_grid(cls, centers, bandwidth, clip=None):
        return cls([GaussianBump(tuple(c), bandwidth) for c in np.asarray(centers, float)], clip)

    def _prepare(self, x):
        x = np.asarray(x, dtype=float)
        if self.clip is not None:
            x = np.clip(x, self.clip[0], self.clip[1])
        return x

    def values(self, x) -> np.ndarray:
        """Feature values, shape ``(..., k)``."""
        x = self._prepare(x)
        return np.stack([f.value(x) for f in self.features], axis=-1)

    def grads(self, x) -> np.ndarray:
        """Feature gradients, shape ``(..., k, d)``."""
        x = self._prepare(x)
        return np.stack([f.grad(x) for f in self.features], axis=-2)

    def hessians(self, x) -> np.ndarray:
        """Feature Hessians, shape ``(..., k, d, d)``."""
        x = self._prepare(x)
        return np.stack([f.hess(x) for f in self.features], axis=-3)

    def combined_grad(self, x, coef) -> np.ndarray:
        """``sum_i coef_i grad phi_i(x)``; ``coef`` has shape ``(..., k)``."""
        x = self._prepare(x)
        coef = np.asarray(coef)
        out = 0.0
        for i, f in enumerate(self.features):
            out = out + coef[..., i, None] * f.grad(x)
        return np.broadcast_to(out, np.broadcast_shapes(x.shape, coef.shape[:-1] + (self.dim,)))

    def combined_hess(self, x, coef) -> np.ndarray:
        """``sum_i coef_i D^2 phi_i(x)``."""
        x = self._prepare(x)
        coef = np.asarray(coef)
        out = 0.0
        for i, f in enumerate(self.features):
            out = out + coef[..., i, None, None] * f.hess(x)
        shape = np.broadcast_shapes(x.shape, coef.shape[:-1] + (self.dim,)) + (self.dim,)
        return np.broadcast_to(out, shape)

    def generator_moments(self, x, drift, cov, weights) -> np.ndarray:
        """Weighted particle sums of ``drift . grad phi_i + 0.5 cov : D^2 phi_i``.

        ``x``, ``drift`` have shape ``(..., N, d)``, ``cov`` ``(..., N, d, d)``
        and ``weights`` ``(..., N)``; the result has shape ``(..., k)``.
        """
        x = self._prepare(x)
        cols = [
            np.einsum("...n,...n->...", weights, f.generator(x, drift, cov))
            for f in self.features
        ]
        return np.stack(cols, axis=-1)

    def to_dict(self) -> dict:
        out = {"features": [f.to_dict() for f in self.features]}
        if self.clip is not None:
            out["clip"] = [self.clip[0].tolist(), self.clip[1].tolist()]
        return out

    @classmethod
    def from_dict(cls, data: dict):
        feats = []
        for spec in data["features"]:
            kind = spec["kind"]
            if kind == "monomial":
                feats.append(Monomial(tuple(spec["exponents"])))
            elif kind == "gaussian-bump":
                feats.append(GaussianBump(tuple(spec["center"]), float(spec["bandwidth"])))
            else:
                raise ParameterError(f"unknown feature kind {kind!r}")
        return cls(feats, data.get("clip"))


def moment_map(mu: EmpiricalMeasure, fam: FeatureFamily) -> np.ndarray:
    """Feature averages ``m_i(mu) = sum_j w_j phi_i(x_j)``, shape ``(..., k)``."""
    vals = fam.values(mu.particles)
    bad = ~np.isfinite(vals)
    if bad.any():
        idx = int(np.argwhere(bad.reshape(-1, len(fam)).any(axis=0))[0, 0])
        raise FeatureEvaluationError(idx)
    return np.einsum("...n,...nk->...k", mu.weights, vals)


# ---------------------------------------------------------------------------
# CSV snapshots


def measure_to_csv(mu: EmpiricalMeasure, path, include_weights: bool = True) -> None:
    """Write one row per particle; the optional last column holds the weight."""
    if mu.batch_shape:
        raise ParameterError("only unbatched measures can be written to CSV")
    header = [f"x{i + 1}" for i in range(mu.dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header + (["weight"] if include_weights else []))
        for x, w in zip(mu.particles, mu.weights):
            row = [repr(float(v)) for v in x]
            if include_weights:
                row.append(repr(float(w)))
            writer.writerow(row)


def measure_from_csv(path) -> EmpiricalMeasure:
    """Inverse of :func:`measure_to_csv`; uniform weights if no weight column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    if body.ndim == 1:
        body = body.reshape(-1, len(header))
    if header[-1] == "weight":
        return EmpiricalMeasure(body[:, :-1], body[:, -1])
    return EmpiricalMeasure(body)

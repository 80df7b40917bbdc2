"""Cylindrical test functions ``F(s, mu) = Psi(s, m(mu))``.

``m(mu)`` collects the averages of a :class:`~mfac.measures.FeatureFamily`
over the population.  The state derivatives of ``F`` are those of ``Psi``;
the Lions derivative is ``sum_i dPsi/dm_i grad phi_i(xi)`` and its
``xi``-Jacobian ``sum_i dPsi/dm_i D^2 phi_i(xi)``.

Bases are evaluated in bulk by :meth:`CylindricalBasis.evaluate`, which
returns dense state derivatives and gives access to the moment derivatives
through two contractions (dense ``(B, n, k)`` arrays get large for the RBF
product basis).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import ParameterError
from .measures import EmpiricalMeasure, FeatureFamily, Monomial, moment_map
from .policy import averaged_coefficients

__all__ = [
    "CylindricalFunction",
    "PolynomialFunction",
    "ProductRBFFunction",
    "CylindricalEval",
    "CylindricalBasis",
    "RBFProductBasis",
    "BasisEval",
    "eval_with_derivatives",
    "apply_generator",
    "population_generator",
    "systemic_risk_basis",
    "quadratic_basis",
    "crowd_basis",
    "basis_from_dict",
]


class OuterEval(NamedTuple):
    value: np.ndarray
    grad_s: np.ndarray
    hess_s: np.ndarray
    grad_m: np.ndarray


class CylindricalFunction:
    """Base class; subclasses implement :meth:`outer`."""

    family: FeatureFamily

    def outer(self, s, m) -> OuterEval:
        raise NotImplementedError

    def __call__(self, s, mu):
        return self.outer(np.asarray(s, float), moment_map(mu, self.family)).value

    def to_dict(self) -> dict:
        raise NotImplementedError


class PolynomialFunction(CylindricalFunction):
    """``Psi(s, m) = sum_t coef_t prod_i s_i^a_ti prod_j m_j^b_tj``.

    Parameters
    ----------
    family : FeatureFamily
    terms : sequence of (coef, state_exponents, moment_exponents)
    """

    def __init__(self, family: FeatureFamily, terms, label=None):
        self.family = family
        d, k = family.dim, len(family)
        parsed = []
        for coef, se, me in terms:
            se, me = tuple(se), tuple(me)
            if len(se) != d or len(me) != k:
                raise ParameterError(f"exponent table entry has the wrong length: {se}, {me}")
            parsed.append((float(coef), Monomial(se + me)))
        if not parsed:
            raise ParameterError("a polynomial needs at least one term")
        self.terms = parsed
        self.label = label

    def __repr__(self):
        return f"PolynomialFunction({self.label or len(self.terms)})"

    def outer(self, s, m):
        d = self.family.dim
        s, m = np.asarray(s, float), np.asarray(m, float)
        batch = np.broadcast_shapes(s.shape[:-1], m.shape[:-1])
        z = np.concatenate([np.broadcast_to(s, batch + s.shape[-1:]), np.broadcast_to(m, batch + m.shape[-1:])], -1)
        val = 0.0
        grad = 0.0
        hess = 0.0
        for coef, mono in self.terms:
            val = val + coef * mono.value(z)
            grad = grad + coef * mono.grad(z)
            hess = hess + coef * mono.hess(z)
        return OuterEval(
            np.broadcast_to(val, batch), grad[..., :d], hess[..., :d, :d], grad[..., d:]
        )

    def to_dict(self):
        d = self.family.dim
        return {
            "kind": "polynomial",
            "terms": [
                [c, list(mono.exponents[:d]), list(mono.exponents[d:])] for c, mono in self.terms
            ],
        }


def _rbf(s, center, width, clip):
    if clip is not None:
        s = np.clip(s, clip[0], clip[1])
    diff = s - center
    h2 = width**2
    val = np.exp(-0.5 * np.einsum("...d,...d->...", diff, diff) / h2)
    grad = -val[..., None] * diff / h2
    hess = val[..., None, None] * (diff[..., :, None] * diff[..., None, :] / h2**2 - np.eye(s.shape[-1]) / h2)
    return val, grad, hess


class ProductRBFFunction(CylindricalFunction):
    """``Psi(s, m) = rbf(s) * m_j`` (or ``rbf(s)`` when ``moment`` is None).

    The state RBF is evaluated at ``s`` clamped to the family's clip box.
    """

    def __init__(self, family, center, width, moment=None):
        self.family = family
        self.center = np.asarray(center, dtype=float)
        self.width = float(width)
        self.moment = moment

    def __repr__(self):
        return f"ProductRBFFunction(center={self.center.tolist()}, moment={self.moment})"

    def outer(self, s, m):
        s, m = np.asarray(s, float), np.asarray(m, float)
        val, grad, hess = _rbf(s, self.center, self.width, self.family.clip)
        gm = np.zeros(np.broadcast_shapes(val.shape, m.shape[:-1]) + m.shape[-1:])
        if self.moment is None:
            return OuterEval(val, grad, hess, gm)
        u = m[..., self.moment]
        gm[..., self.moment] = val
        return OuterEval(val * u, grad * u[..., None], hess * u[..., None, None], gm)

    def to_dict(self):
        return {"kind": "product-rbf", "center": self.center.tolist(), "width": self.width,
                "moment": self.moment}


@dataclass(frozen=True)
class CylindricalEval:
    """Value and derivatives of a cylindrical function at ``(s, mu)``.

    ``lions(xi)`` and ``lions_jac(xi)`` evaluate the Lions derivative and its
    Jacobian at points ``xi`` of shape ``batch + (d,)`` or
    ``batch + (P, d)``.
    """

    value: np.ndarray
    grad_s: np.ndarray
    hess_ss: np.ndarray
    moment_coef: np.ndarray
    family: FeatureFamily

    def _coef_for(self, xi):
        xi = np.asarray(xi, dtype=float)
        extra = xi.ndim - self.moment_coef.ndim
        coef = self.moment_coef.reshape(
            self.moment_coef.shape[:-1] + (1,) * max(extra, 0) + self.moment_coef.shape[-1:]
        )
        return xi, coef

    def lions(self, xi) -> np.ndarray:
        xi, coef = self._coef_for(xi)
        return self.family.combined_grad(xi, coef)

    def lions_jac(self, xi) -> np.ndarray:
        xi, coef = self._coef_for(xi)
        return self.family.combined_hess(xi, coef)


def eval_with_derivatives(F: CylindricalFunction, s, mu: EmpiricalMeasure) -> CylindricalEval:
    m = moment_map(mu, F.family)
    out = F.outer(np.asarray(s, float), m)
    return CylindricalEval(out.value, out.grad_s, out.hess_s, out.grad_m, F.family)


def population_generator(family: FeatureFamily, policy, model, mu: EmpiricalMeasure, rng=None):
    """Generator applied to the feature averages, shape ``batch + (k,)``.

    Entry ``i`` is ``sum_p w_p [b_pi(x_p) . grad phi_i(x_p) + 0.5
    Sigma_pi(x_p) : D^2 phi_i(x_p)]``.
    """
    mbar = np.einsum("...n,...nd->...d", mu.weights, mu.particles)
    coef = averaged_coefficients(policy, model, mu.particles, mbar[..., None, :], rng)
    cov = np.broadcast_to(coef.cov, mu.particles.shape + (mu.dim,))
    return family.generator_moments(mu.particles, coef.drift, cov, mu.weights)


def apply_generator(F: CylindricalFunction, policy, model, s, mu: EmpiricalMeasure, rng=None):
    """Policy generator applied to ``F`` at ``(s, mu)``."""
    basis = CylindricalBasis([F])
    return basis.generator(policy, model, s, mu, rng)[..., 0]


class BasisEval:
    """Bulk evaluation of a basis at a batch of ``(s, mu)`` pairs.

    Attributes
    ----------
    values : (B, n)
    grad_s : (B, n, d)
    hess_s : (B, n, d, d)
    moments : (B, k)
    """

    def __init__(self, values, grad_s, hess_s, moments, grad_m=None):
        self.values = values
        self.grad_s = grad_s
        self.hess_s = hess_s
        self.moments = moments
        self._grad_m = grad_m

    @property
    def grad_m(self):
        """Dense moment derivatives ``(B, n, k)``."""
        return self._grad_m

    def moment_contract(self, vec):
        """``sum_i dPsi_n/dm_i vec_i`` for each basis function, shape ``(B, n)``."""
        return np.einsum("...ni,...i->...n", self._grad_m, vec)

    def moment_coef(self, theta):
        """``sum_n theta_n dPsi_n/dm_i``, shape ``(B, k)``."""
        return np.einsum("n,...ni->...i", theta, self._grad_m)


class CylindricalBasis:
    """Ordered cylindrical functions sharing one feature family."""

    def __init__(self, functions, family: FeatureFamily | None = None, name="basis"):
        self.functions = list(functions)
        if not self.functions:
            raise ParameterError("a basis needs at least one function")
        self.family = family or self.functions[0].family
        for j, f in enumerate(self.functions):
            if f.family is not self.family:
                raise ParameterError(f"basis function {j} uses a different feature family")
        self.name = name

    def __len__(self):
        return len(self.functions)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, n={len(self)})"

    @property
    def dim(self):
        return self.family.dim

    def evaluate_moments(self, s, m) -> BasisEval:
        outs = [f.outer(s, m) for f in self.functions]
        return BasisEval(
            np.stack([o.value for o in outs], axis=-1),
            np.stack([o.grad_s for o in outs], axis=-2),
            np.stack([o.hess_s for o in outs], axis=-3),
            m,
            np.stack([o.grad_m for o in outs], axis=-2),
        )

    def evaluate(self, s, mu: EmpiricalMeasure) -> BasisEval:
        s = np.asarray(s, dtype=float)
        return self.evaluate_moments(s, moment_map(mu, self.family))

    def values(self, s, mu):
        return self.evaluate(s, mu).values

    def generator(self, policy, model, s, mu: EmpiricalMeasure, rng=None, ev: BasisEval | None = None):
        """Policy generator applied to every basis function, shape ``(B, n)``."""
        s = np.asarray(s, dtype=float)
        ev = ev if ev is not None else self.evaluate(s, mu)
        mbar = np.einsum("...n,...nd->...d", mu.weights, mu.particles)
        rep = averaged_coefficients(policy, model, s, mbar, rng)
        out = np.einsum("...d,...nd->...n", rep.drift, ev.grad_s)
        out = out + 0.5 * np.einsum("...ij,...nij->...n", rep.cov, ev.hess_s)
        g = population_generator(self.family, policy, model, mu, rng)
        return out + ev.moment_contract(g)

    def gram_condition(self, s, mu) -> float:
        """Smallest singular value ratio of the basis matrix on probe points."""
        v = self.values(s, mu)
        sv = np.linalg.svd(v, compute_uv=False)
        return float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0

    def to_dict(self):
        return {
            "name": self.name,
            "family": self.family.to_dict(),
            "functions": [f.to_dict() for f in self.functions],
        }


class _RBFEval(BasisEval):
    """Evaluation of the RBF product basis without dense moment derivatives."""

    def __init__(self, values, grad_s, hess_s, moments, rbf):
        super().__init__(values, grad_s, hess_s, moments)
        self._rbf = rbf  # (B, M)

    def _pad(self, vec):
        zero = np.zeros(vec.shape[:-1] + (1,))
        return np.concatenate([zero, vec], axis=-1)

    @property
    def grad_m(self):
        M, k = self._rbf.shape[-1], self.moments.shape[-1]
        eye = np.concatenate([np.zeros((1, k)), np.eye(k)])  # (k+1, k)
        out = self._rbf[..., :, None, None] * eye
        return out.reshape(self._rbf.shape[:-1] + (M * (k + 1), k))

    def moment_contract(self, vec):
        out = self._rbf[..., :, None] * self._pad(vec)[..., None, :]
        return out.reshape(out.shape[:-2] + (-1,))

    def moment_coef(self, theta):
        M, k = self._rbf.shape[-1], self.moments.shape[-1]
        th = np.asarray(theta).reshape(M, k + 1)[:, 1:]
        return self._rbf @ th


class RBFProductBasis(CylindricalBasis):
    """Functions ``rbf_c(s)`` and ``rbf_c(s) * u_j(mu)`` over a grid of centers.

    Ordering is center-major: index ``c * (k + 1) + j`` with ``j = 0`` the
    pure state RBF and ``j >= 1`` the product with kernel feature ``j - 1``.
    """

    def __init__(self, family: FeatureFamily, centers, width, name="rbf-product"):
        centers = np.asarray(centers, dtype=float)
        self.centers = centers
        self.width = float(width)
        k = len(family)
        funcs = []
        for c in centers:
            funcs.append(ProductRBFFunction(family, c, width))
            for j in range(k):
                funcs.append(ProductRBFFunction(family, c, width, j))
        super().__init__(funcs, family, name)

    def evaluate_moments(self, s, m):
        s = np.asarray(s, dtype=float)
        x = s if self.family.clip is None else np.clip(s, *self.family.clip)
        diff = x[..., None, :] - self.centers  # (B, M, d)
        h2 = self.width**2
        val = np.exp(-0.5 * np.einsum("...d,...d->...", diff, diff) / h2)  # (B, M)
        grad = -val[..., None] * diff / h2
        d = s.shape[-1]
        hess = val[..., None, None] * (
            diff[..., :, None] * diff[..., None, :] / h2**2 - np.eye(d) / h2
        )
        ext = np.concatenate([np.ones(m.shape[:-1] + (1,)), m], axis=-1)  # (B, k+1)
        batch = val.shape[:-1]
        values = (val[..., :, None] * ext[..., None, :]).reshape(batch + (-1,))
        grad_s = (grad[..., :, None, :] * ext[..., None, :, None]).reshape(batch + (-1, d))
        hess_s = (hess[..., :, None, :, :] * ext[..., None, :, None, None]).reshape(batch + (-1, d, d))
        return _RBFEval(values, grad_s, hess_s, m, val)

    def to_dict(self):
        return {
            "name": self.name,
            "kind": "rbf-product",
            "family": self.family.to_dict(),
            "centers": self.centers.tolist(),
            "width": self.width,
        }


# ---------------------------------------------------------------------------
# shipped bases


def systemic_risk_basis(enriched: bool = False) -> CylindricalBasis:
    """``{1, mbar^2, (s - mbar)^2}``, plus ``(s - mbar) mbar`` when enriched.

    The cross term is inserted before ``(s - mbar)^2``.
    """
    fam = FeatureFamily.identity(1)
    funcs = [
        PolynomialFunction(fam, [(1.0, (0,), (0,))], "one"),
        PolynomialFunction(fam, [(1.0, (0,), (2,))], "mbar^2"),
    ]
    if enriched:
        funcs.append(PolynomialFunction(fam, [(1.0, (1,), (1,)), (-1.0, (0,), (2,))], "(s-mbar)*mbar"))
    funcs.append(
        PolynomialFunction(fam, [(1.0, (2,), (0,)), (-2.0, (1,), (1,)), (1.0, (0,), (2,))], "(s-mbar)^2")
    )
    return CylindricalBasis(funcs, fam, "systemic-risk-enriched" if enriched else "systemic-risk")


def quadratic_basis(d: int) -> CylindricalBasis:
    """All monomials of degree at most two in ``(s, mbar)`` for ``d``-dimensional states."""
    fam = FeatureFamily.identity(d)
    funcs = []
    for deg in range(3):
        for combo in itertools.combinations_with_replacement(range(2 * d), deg):
            e = np.zeros(2 * d, dtype=int)
            for i in combo:
                e[i] += 1
            funcs.append(PolynomialFunction(fam, [(1.0, tuple(e[:d]), tuple(e[d:]))], str(tuple(e))))
    return CylindricalBasis(funcs, fam, f"quadratic-{d}")


def grid_centers(lower, upper, per_axis):
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def crowd_basis(lower=(-8.0, -8.0), upper=(4.0, 4.0), per_axis=5, state_width=3.0, kernel_width=3.0):
    """RBF product basis on a square grid with kernel-embedding moments."""
    centers = grid_centers(lower, upper, per_axis)
    fam = FeatureFamily.gaussian_grid(centers, kernel_width, clip=(lower, upper))
    return RBFProductBasis(fam, centers, state_width, "crowd-rbf")


def basis_from_dict(data: dict) -> CylindricalBasis:
    """Build a basis from the ``[critic]`` table of a configuration."""
    kind = data.get("basis", "systemic-risk")
    if kind == "systemic-risk":
        return systemic_risk_basis(False)
    if kind == "systemic-risk-enriched":
        return systemic_risk_basis(True)
    if kind == "quadratic":
        return quadratic_basis(int(data.get("dim", 1)))
    if kind == "rbf-product":
        box = data.get("box", [[-8.0, -8.0], [4.0, 4.0]])
        return crowd_basis(
            tuple(box[0]), tuple(box[1]), int(data.get("grid", 5)),
            float(data.get("state_width", 3.0)), float(data.get("kernel_width", 3.0)),
        )
    if kind == "polynomial":
        fam = FeatureFamily.from_dict(data["family"])
        funcs = [PolynomialFunction(fam, f["terms"]) for f in data["functions"]]
        return CylindricalBasis(funcs, fam, data.get("name", "polynomial"))
    raise ParameterError(f"unknown basis kind {kind!r}")

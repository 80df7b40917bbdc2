"""Small dense linear-algebra helpers shared by the LQR code."""

from __future__ import annotations

import numpy as np
import scipy.linalg


def sym(a):
    return 0.5 * (a + a.T)


def spectral_abscissa(a) -> float:
    """Largest real part of the eigenvalues of ``a``."""
    return float(np.max(np.linalg.eigvals(np.atleast_2d(a)).real))


def is_hurwitz(a) -> bool:
    return spectral_abscissa(a) < 0.0


def is_positive_definite(a) -> bool:
    a = np.atleast_2d(a)
    if not np.allclose(a, a.T, atol=1e-12 * (1 + np.abs(a).max())):
        return False
    try:
        np.linalg.cholesky(sym(a))
    except np.linalg.LinAlgError:
        return False
    return True


def solve_generalized_lyapunov(m, q, c=None):
    """Solve ``m^T X + X m + c^T X c + q = 0`` for symmetric ``X``.

    The operator is vectorized with Kronecker products, which is adequate
    for the small state dimensions considered here.
    """
    m = np.atleast_2d(m)
    d = m.shape[0]
    eye = np.eye(d)
    op = np.kron(eye, m.T) + np.kron(m.T, eye)
    if c is not None:
        c = np.atleast_2d(c)
        op = op + np.kron(c.T, c.T)
    vec = scipy.linalg.solve(op, -np.asarray(q, dtype=float).reshape(-1, order="F"))
    return sym(vec.reshape(d, d, order="F"))


def lqr_gain(a, b, control_weight=1.0):
    """Stabilizing state feedback from an auxiliary CARE, or ``None``."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    r = control_weight * np.eye(b.shape[1])
    try:
        p = scipy.linalg.solve_continuous_are(a, b, np.eye(a.shape[0]), r)
    except (np.linalg.LinAlgError, ValueError):
        return None
    gain = -np.linalg.solve(r, b.T @ p)
    return gain if np.all(np.isfinite(gain)) else None

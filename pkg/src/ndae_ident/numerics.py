"""Dense linear algebra, Newton iteration and finite differences.

Matrices and vectors are plain float64 numpy arrays.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ndae_ident.errors import (
    DimensionMismatch,
    NoConvergence,
    NotPositiveDefinite,
    NotSymmetric,
    SingularMatrix,
)

PIVOT_RTOL = 1e-14
SYMMETRY_RTOL = 1e-10


def solve_linear(a, b):
    """Solve ``a @ x = b`` by LU with partial pivoting.

    Raises
    ------
    SingularMatrix
        If a pivot is smaller than ``1e-14 * max|a|``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise DimensionMismatch(f"rhs has {b.shape[0]} rows, matrix has {a.shape[0]}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale == 0.0:
        raise SingularMatrix("zero matrix")
    with warnings.catch_warnings():
        # exact singularity is reported below as SingularMatrix
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(a, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < PIVOT_RTOL * scale:
        raise SingularMatrix("pivot below threshold; matrix is numerically singular")
    x = linalg.lu_solve((lu, piv), b, check_finite=False)
    # one step of iterative refinement
    x += linalg.lu_solve((lu, piv), b - a @ x, check_finite=False)
    return x


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    residual_norm: float


def newton_solve(residual, x0, jacobian=None, tol=1e-10, max_iter=50,
                 fd_step=1e-7, line_search=True, max_halvings=20):
    """Newton iteration for ``residual(x) = 0``.

    Full Newton steps, halved (at most ``max_halvings`` times) while the
    residual norm increases. When ``jacobian`` is None a central-difference
    Jacobian is used.

    Returns a :class:`NewtonResult` whose ``x`` has the shape of ``x0``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    shape = np.shape(x0)
    x = np.atleast_1d(np.array(x0, dtype=float)).ravel()

    def res(z):
        return np.atleast_1d(np.asarray(residual(z.reshape(shape)), dtype=float)).ravel()

    def jac(z):
        if jacobian is None:
            return finite_diff_jacobian(res, z, fd_step)
        return np.atleast_2d(np.asarray(jacobian(z.reshape(shape)), dtype=float))

    r = res(x)
    norm = np.linalg.norm(r)
    for it in range(1, max_iter + 1):
        if norm <= tol:
            return NewtonResult(x.reshape(shape), it - 1, norm)
        step = solve_linear(jac(x), -r)
        x_new = x + step
        r_new = res(x_new)
        norm_new = np.linalg.norm(r_new)
        if line_search:
            halvings = 0
            while not norm_new < norm and halvings < max_halvings:
                step *= 0.5
                x_new = x + step
                r_new = res(x_new)
                norm_new = np.linalg.norm(r_new)
                halvings += 1
        x, r, norm = x_new, r_new, norm_new
        if not np.isfinite(norm):
            raise NoConvergence("residual became non-finite", it, norm)
    if norm <= tol:
        return NewtonResult(x.reshape(shape), max_iter, norm)
    raise NoConvergence(
        f"Newton did not reach tol={tol:g} in {max_iter} iterations (|r| = {norm:.3e})",
        max_iter, norm,
    )


def check_symmetric(m, rtol=SYMMETRY_RTOL):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    if np.linalg.norm(m - m.T) > rtol * max(np.linalg.norm(m), 1e-300):
        raise NotSymmetric("matrix is not symmetric")
    return m


def sym_eig(m):
    """Ascending eigenvalues of a symmetric matrix."""
    m = check_symmetric(m)
    return np.linalg.eigvalsh(0.5 * (m + m.T))


def sym_eig_min(m):
    return float(sym_eig(m)[0])


def sym_eig_max(m):
    return float(sym_eig(m)[-1])


def spd_sqrt(p):
    """Principal square root of a symmetric positive definite matrix."""
    p = check_symmetric(p)
    w, v = np.linalg.eigh(0.5 * (p + p.T))
    if w[0] <= 0:
        raise NotPositiveDefinite(f"smallest eigenvalue {w[0]:.3e} is not positive")
    s = (v * np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)


def spd_inv_sqrt(p):
    """``P^{-1/2}``, the principal square root of ``P^{-1}``."""
    p = check_symmetric(p)
    w, v = np.linalg.eigh(0.5 * (p + p.T))
    if w[0] <= 0:
        raise NotPositiveDefinite(f"smallest eigenvalue {w[0]:.3e} is not positive")
    s = (v / np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)


def finite_diff_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian; column j is ``(f(x+h e_j) - f(x-h e_j)) / 2h``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float)).ravel()
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float)).ravel()
        jac[:, j] = (fp - fm) / (2.0 * h)
    return jac

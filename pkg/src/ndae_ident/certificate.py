"""Lyapunov certificate for the identification error ``e = x_d - x_nn``.

The error obeys ``e' = A e + phi(e, x_d, u)`` for any chosen Hurwitz ``A``.
Given ``phi^T L phi <= c0 + c1 e^T K e`` and
``A^T P + P A + P L^{-1} P + c1 K + W <= 0``, the error is ultimately bounded
by ``sqrt(c0 / (lambda_min(P) lambda_min(P^{-1/2} W P^{-1/2})))``.
"""

import json
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from ndae_ident.dae_solver import SolverConfig, get_tableau, march
from ndae_ident.errors import DimensionMismatch, EmptyCloud, NoConvergence, NotHurwitz, NotPositiveDefinite
from ndae_ident.numerics import check_symmetric, solve_linear, spd_inv_sqrt, sym_eig, sym_eig_max, sym_eig_min
from ndae_ident.power_model import consistent_init

FEASIBLE_TOL = 1e-10
QUAD_EPS = 1e-12


def check_hurwitz(a):
    """Raise :class:`NotHurwitz` unless every eigenvalue of ``a`` has negative real part.

    A negative definite symmetric part is sufficient; otherwise the spectrum is
    computed directly and a warning is issued.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch("A must be square")
    if sym_eig_max(0.5 * (a + a.T)) < 0:
        return
    warnings.warn("symmetric part of A is indefinite; checking the full spectrum", RuntimeWarning,
                  stacklevel=2)
    if np.max(np.linalg.eigvals(a).real) >= 0:
        raise NotHurwitz("A has an eigenvalue with non-negative real part")


def _manifold_map(model, x_d, guess=None):
    guess = np.zeros(model.n_a) if guess is None else guess
    return consistent_init(model, x_d, guess, tol=1e-12)


def _phi(model, dnn, a, e, x_d, x_a, u):
    x_nn = x_d - e
    true = model.rhs(x_d, x_a, u)
    return (true - dnn.a_nn @ x_d - (a - dnn.a_nn) @ e - dnn.b_nn @ dnn.rho.forward(x_nn)
            - dnn.forcing(u))


def phi_eval(model, dnn, a, e, x_d, u, x_a_guess=None):
    """Mismatch term of the error dynamics with ``x_a = l(x_d)`` from the true constraint.

    The DNN's known forcing ``C_nn gamma(u) + h w0`` is subtracted as a whole,
    so an exact copy of the model gives ``phi = 0`` at ``e = 0``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    e = np.asarray(e, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    if a.shape != (model.n_d, model.n_d) or e.shape != (model.n_d,) or dnn.n != model.n_d:
        raise DimensionMismatch("A, e and the DNN must match the model's dynamic dimension")
    x_a = _manifold_map(model, x_d, x_a_guess)
    return _phi(model, dnn, a, e, x_d, x_a, np.asarray(u, dtype=float))


@dataclass(eq=False)
class ErrorTrace:
    times: np.ndarray
    error_norms: np.ndarray
    states_d: np.ndarray = None
    states_a: np.ndarray = None
    errors: np.ndarray = None
    inputs: np.ndarray = None

    def __len__(self):
        return self.times.size

    def tail_max(self, fraction=0.2):
        """Largest ``||e||`` over the last ``fraction`` of the horizon."""
        t0 = self.times[-1] - fraction * (self.times[-1] - self.times[0])
        return float(np.max(self.error_norms[self.times >= t0 - 1e-12]))

    def cloud(self, stride=1):
        """Samples ``(e, x_d, u, x_a)`` along the trace for constant estimation."""
        idx = range(0, len(self), stride)
        return [(self.errors[k], self.states_d[k], self.inputs[k], self.states_a[k]) for k in idx]


class _ErrorSystem:
    """True NDAE co-integrated with the error ODE; dynamic state ``[x_d, e]``."""

    def __init__(self, model, dnn, a):
        self.model, self.dnn, self.a = model, dnn, a
        self.n = model.n_d
        self.n_d = 2 * model.n_d
        self.n_a = model.n_a

    def rhs(self, z, x_a, u):
        x_d, e = z[:self.n], z[self.n:]
        return np.concatenate([self.model.rhs(x_d, x_a, u),
                               self.a @ e + _phi(self.model, self.dnn, self.a, e, x_d, x_a, u)])

    def rhs_jac(self, z, x_a, u):
        x_d, e = z[:self.n], z[self.n:]
        fd, fa = self.model.rhs_jac(x_d, x_a, u)
        j_nn = self.dnn.a_nn + self.dnn.b_nn @ self.dnn.rho.input_jacobian(x_d - e)
        n = self.n
        jz = np.zeros((2 * n, 2 * n))
        jz[:n, :n] = fd
        jz[n:, :n] = fd - j_nn
        jz[n:, n:] = j_nn
        return jz, np.vstack([fa, fa])

    def alg(self, z, x_a):
        return self.model.alg(z[:self.n], x_a)

    def alg_jac(self, z, x_a):
        gd, ga = self.model.alg_jac(z[:self.n], x_a)
        return np.hstack([gd, np.zeros_like(gd)]), ga


def simulate_error(model, dnn, a, x_d0, e0, input_fn, t_end, config=None, tableau="radau2"):
    """Integrate the true model together with ``e' = A e + phi`` and record ``||e(t)||``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    check_hurwitz(a)
    config = SolverConfig() if config is None else config
    tab = get_tableau(tableau) if isinstance(tableau, str) else tableau
    x_d0 = np.asarray(x_d0, dtype=float)
    e0 = np.asarray(e0, dtype=float)
    if a.shape != (model.n_d, model.n_d) or e0.shape != x_d0.shape or dnn.n != model.n_d:
        raise DimensionMismatch("A, e0, x_d0 and the DNN must match the model")
    x_a0 = _manifold_map(model, x_d0)
    system = _ErrorSystem(model, dnn, a)
    traj = march(system, np.concatenate([x_d0, e0]), x_a0, input_fn, t_end, tab, config)
    n = model.n_d
    errors = traj.states_d[:, n:]
    return ErrorTrace(traj.times, np.linalg.norm(errors, axis=1), traj.states_d[:, :n],
                      traj.states_a, errors, traj.inputs)


def estimate_c0_c1(model, dnn, a, l, k, cloud):
    """Tightest ``(c0, c1)`` certifying ``phi^T L phi <= c0 + c1 e^T K e`` on the cloud.

    Each cloud entry is ``(e, x_d, u)`` with an optional fourth item used as
    the starting guess for ``x_a``. ``c0`` is the maximum at ``e = 0``; ``c1``
    covers the remaining excess relative to that global ``c0``.
    """
    if len(cloud) == 0:
        raise EmptyCloud("sample cloud is empty")
    a = np.atleast_2d(np.asarray(a, dtype=float))
    l = np.atleast_2d(np.asarray(l, dtype=float))
    k = np.atleast_2d(np.asarray(k, dtype=float))
    if sym_eig_min(0.5 * (k + k.T)) <= 0:
        raise ValueError("K must be positive definite")
    zero = np.zeros(model.n_d)
    quads = []
    for item in cloud:
        e, x_d, u = (np.asarray(v, dtype=float) for v in item[:3])
        x_a = _manifold_map(model, x_d, item[3] if len(item) > 3 else None)
        p0 = _phi(model, dnn, a, zero, x_d, x_a, u)
        p = _phi(model, dnn, a, e, x_d, x_a, u)
        quads.append((float(p0 @ l @ p0), float(p @ l @ p), float(e @ k @ e)))
    c0 = max(0.0, max(q[0] for q in quads))
    c1 = 0.0
    for _, q, eke in quads:
        if eke > QUAD_EPS:
            c1 = max(c1, (q - c0) / eke)
    return c0, c1


class Assumption3Check(NamedTuple):
    feasible: bool
    margin: float
    matrix: np.ndarray


def check_assumption3(a, p, w, l, k, c1):
    """Feasibility of ``A^T P + P A + P L^{-1} P + c1 K + W <= 0``; margin is ``-lambda_max``."""
    a, p, w, l, k = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (a, p, w, l, k))
    for name, m in (("P", p), ("W", w), ("L", l), ("K", k)):
        check_symmetric(m)
        if m.shape != a.shape:
            raise DimensionMismatch(f"{name} has shape {m.shape}, expected {a.shape}")
    m = a.T @ p + p @ a + p @ solve_linear(l, p) + c1 * k + w
    m = 0.5 * (m + m.T)
    lam = sym_eig_max(m)
    return Assumption3Check(bool(lam <= FEASIBLE_TOL), float(-lam), m)


def prop1_bound(p, w, c0):
    """Ultimate bound ``sqrt(c0 / (lambda_min(P) lambda_min(P^{-1/2} W P^{-1/2})))``."""
    if c0 < 0:
        raise ValueError("c0 must be non-negative")
    p = np.atleast_2d(np.asarray(p, dtype=float))
    w = np.atleast_2d(np.asarray(w, dtype=float))
    rate = decay_rate(p, w)
    if rate <= 0:
        raise NotPositiveDefinite("W is not positive definite")
    return float(np.sqrt(c0 / (sym_eig_min(p) * rate)))


def decay_rate(p, w):
    """``lambda_min(P^{-1/2} W P^{-1/2})``, the exponential rate of ``e^T P e``."""
    r = spd_inv_sqrt(np.atleast_2d(np.asarray(p, dtype=float)))
    w_tilde = r @ np.atleast_2d(np.asarray(w, dtype=float)) @ r
    return float(sym_eig_min(0.5 * (w_tilde + w_tilde.T)))


@dataclass(eq=False)
class ErrorCertificate:
    a: np.ndarray
    p: np.ndarray
    w: np.ndarray
    l: np.ndarray
    k: np.ndarray
    c0: float
    c1: float
    bound: float
    feasible: bool
    margin: float = 0.0
    cloud_size: int = 0
    tail_max: float = None

    def to_dict(self):
        return {
            "A": self.a.tolist(), "P": self.p.tolist(), "W": self.w.tolist(),
            "L": self.l.tolist(), "K": self.k.tolist(),
            "c0": self.c0, "c1": self.c1, "margin": self.margin, "bound": self.bound,
            "feasible": self.feasible, "bound_binding": self.feasible,
            "cloud_size": self.cloud_size, "tail_max": self.tail_max,
        }


def write_report(cert, path):
    with open(path, "w") as fh:
        json.dump(cert.to_dict(), fh, indent=1)
        fh.write("\n")


def certify(model, dnn, a, l, k, p, w, cloud):
    """Estimate the constants on ``cloud``, check the matrix inequality and form the bound.

    The bound is always reported; it is only binding when ``feasible`` is set.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    check_hurwitz(a)
    l, k, p, w = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (l, k, p, w))
    c0, c1 = estimate_c0_c1(model, dnn, a, l, k, cloud)
    check = check_assumption3(a, p, w, l, k, c1)
    return ErrorCertificate(a, p, w, l, k, c0, c1, prop1_bound(p, w, c0), check.feasible,
                            check.margin, len(cloud))


def riccati_newton_kleinman(a, l, q, tol=1e-12, max_iter=50):
    """Solve ``A^T P + P A + P L^{-1} P + Q = 0`` for symmetric ``P``.

    Newton-Kleinman from the Lyapunov solution of ``A^T P + P A + Q = 0``;
    each iterate solves ``(A + S P_k)^T P + P (A + S P_k) = P_k S P_k - Q``
    with ``S = L^{-1}``. Raises :class:`NoConvergence` when the closed-loop
    matrix loses stability or the residual stalls.
    """
    a, l, q = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (a, l, q))
    s = solve_linear(l, np.eye(a.shape[0]))
    s = 0.5 * (s + s.T)
    p = solve_continuous_lyapunov(a.T, -q)
    scale = max(1.0, np.max(np.abs(q)))
    res = np.inf
    for it in range(max_iter):
        closed = a + s @ p
        if np.max(np.linalg.eigvals(closed).real) >= 0:
            raise NoConvergence("closed-loop matrix is not Hurwitz; no stabilising solution", it, res)
        p = solve_continuous_lyapunov(closed.T, p @ s @ p - q)
        p = 0.5 * (p + p.T)
        res = float(np.max(np.abs(a.T @ p + p @ a + p @ s @ p + q)))
        if res <= tol * scale:
            return p
    raise NoConvergence(f"Riccati residual {res:.3e} after {max_iter} iterations", max_iter, res)


def eigen_summary(m):
    """Sorted eigenvalues of a symmetric matrix, for reports."""
    return sym_eig(0.5 * (m + m.T))

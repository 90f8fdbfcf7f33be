"""Fixed-step implicit Runge-Kutta integration of semi-explicit index-1 DAEs.

Any object with ``n_d``, ``n_a``, ``rhs(x_d, x_a, u)``, ``alg(x_d, x_a)``,
``rhs_jac(x_d, x_a, u) -> (F_d, F_a)`` and ``alg_jac(x_d, x_a) -> (G_d, G_a)``
can be integrated; :class:`~ndae_ident.power_model.NdaeModel` is the main one.

Tableau notation: ``b`` is the stage matrix and ``c`` the weights, so a step
reads ``alpha_j = x + delta * sum_i b[j, i] f(alpha_i, beta_i)`` and
``x_next = x + delta * sum_j c[j] f(alpha_j, beta_j)``.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ndae_ident.errors import (
    DimensionMismatch,
    IndexViolation,
    NoConvergence,
    SingularMatrix,
    SolverError,
    TooFewPoints,
)
from ndae_ident.numerics import newton_solve


@dataclass(frozen=True, eq=False)
class ButcherTableau:
    name: str
    b: np.ndarray
    c: np.ndarray
    order: int

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.b, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if b.shape != (c.size, c.size):
            raise DimensionMismatch(f"stage matrix {b.shape} does not match {c.size} weights")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def nu(self):
        return self.c.size

    @property
    def abscissae(self):
        """Stage time fractions, taken as the row sums of the stage matrix."""
        return self.b.sum(axis=1)

    def check_order_conditions(self, tol=1e-14):
        """Raise if the first- or second-order conditions fail."""
        if abs(self.c.sum() - 1.0) > tol:
            raise ValueError(f"{self.name}: weights sum to {self.c.sum()!r}, not 1")
        if abs(self.c @ self.abscissae - 0.5) > tol:
            raise ValueError(f"{self.name}: second-order condition fails")


def _make_builtin():
    s3 = math.sqrt(3.0)
    tableaus = [
        ButcherTableau("midpoint", [[0.5]], [1.0], 2),
        ButcherTableau("radau2", [[5 / 12, -1 / 12], [3 / 4, 1 / 4]], [3 / 4, 1 / 4], 3),
        ButcherTableau("gauss2", [[1 / 4, 1 / 4 - s3 / 6], [1 / 4 + s3 / 6, 1 / 4]], [0.5, 0.5], 4),
    ]
    for tab in tableaus:
        tab.check_order_conditions()
    return tableaus


_BUILTIN = _make_builtin()


def builtin_tableaus():
    """Implicit midpoint, 2-stage Radau IIA and 2-stage Gauss-Legendre."""
    return list(_BUILTIN)


def get_tableau(name):
    for tab in _BUILTIN:
        if tab.name == name:
            return tab
    raise KeyError(f"unknown tableau {name!r}; choose from {[t.name for t in _BUILTIN]}")


@dataclass(frozen=True)
class SolverConfig:
    """Step size and tolerances. Defaults follow the reference integrator settings."""

    delta: float = 1e-3
    rel_tol: float = 1e-5
    abs_tol: float = 1e-6
    max_step: float = 1e-3
    newton_tol: float = 1e-6
    newton_max_iter: int = 20

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if min(self.rel_tol, self.abs_tol, self.max_step, self.newton_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be >= 1")


class IrkStep(NamedTuple):
    x_d: np.ndarray
    x_a: np.ndarray
    alpha: np.ndarray  # (nu, n_d)
    beta: np.ndarray  # (nu, n_a)


def _stage_inputs(u, nu):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        return np.broadcast_to(u, (nu, u.size))
    if u.shape[0] != nu:
        raise DimensionMismatch(f"got {u.shape[0]} stage inputs for {nu} stages")
    return u


def solve_algebraic(system, x_d, x_a_guess, tol, max_iter):
    if system.n_a == 0:
        return np.zeros(0)
    try:
        return newton_solve(
            lambda xa: system.alg(x_d, xa),
            x_a_guess,
            jacobian=lambda xa: system.alg_jac(x_d, xa)[1],
            tol=tol,
            max_iter=max_iter,
        ).x
    except SingularMatrix as exc:
        raise IndexViolation("algebraic Jacobian is singular") from exc


def irk_step(system, x_d, x_a, u, tableau, config, check_step=True):
    """Advance one step of size ``config.delta``.

    ``u`` is either one input vector used at every stage or a ``(nu, m)``
    array of per-stage inputs. All stage unknowns ``(alpha_j, beta_j)`` are
    solved together by one Newton iteration.
    """
    delta = config.delta
    if check_step and delta > config.max_step * (1 + 1e-12):
        raise ValueError(f"delta={delta:g} exceeds max_step={config.max_step:g}")
    n_d, n_a, nu = system.n_d, system.n_a, tableau.nu
    x_d = np.asarray(x_d, dtype=float)
    x_a = np.asarray(x_a, dtype=float)
    if x_d.shape != (n_d,) or x_a.shape != (n_a,):
        raise DimensionMismatch("state dimensions do not match the system")
    us = _stage_inputs(u, nu)
    b = tableau.b
    n = n_d + n_a

    def split(z):
        z = z.reshape(nu, n)
        return z[:, :n_d], z[:, n_d:]

    def residual(z):
        alpha, beta = split(z)
        fs = np.array([system.rhs(alpha[i], beta[i], us[i]) for i in range(nu)])
        r = np.empty((nu, n))
        r[:, :n_d] = alpha - x_d - delta * (b @ fs)
        for j in range(nu):
            r[j, n_d:] = system.alg(alpha[j], beta[j])
        return r.ravel()

    def jacobian(z):
        alpha, beta = split(z)
        jac = np.zeros((nu * n, nu * n))
        for i in range(nu):
            fd, fa = system.rhs_jac(alpha[i], beta[i], us[i])
            for j in range(nu):
                rows = slice(j * n, j * n + n_d)
                jac[rows, i * n:i * n + n_d] = -delta * b[j, i] * fd
                jac[rows, i * n + n_d:(i + 1) * n] = -delta * b[j, i] * fa
            jac[i * n:i * n + n_d, i * n:i * n + n_d] += np.eye(n_d)
            if n_a:
                gd, ga = system.alg_jac(alpha[i], beta[i])
                rows = slice(i * n + n_d, (i + 1) * n)
                jac[rows, i * n:i * n + n_d] = gd
                jac[rows, i * n + n_d:(i + 1) * n] = ga
        return jac

    z0 = np.tile(np.concatenate([x_d, x_a]), nu)
    try:
        z = newton_solve(residual, z0, jacobian=jacobian, tol=config.newton_tol,
                         max_iter=config.newton_max_iter).x
    except SingularMatrix as exc:
        raise IndexViolation("stage Jacobian is singular") from exc
    alpha, beta = split(z)
    fs = np.array([system.rhs(alpha[i], beta[i], us[i]) for i in range(nu)])
    x_d_next = x_d + delta * (tableau.c @ fs)
    guess = beta[-1] if n_a else x_a
    x_a_next = solve_algebraic(system, x_d_next, guess, config.newton_tol, config.newton_max_iter)
    return IrkStep(x_d_next, x_a_next, alpha.copy(), beta.copy())


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray  # (N,)
    states_d: np.ndarray  # (N, n_d)
    states_a: np.ndarray  # (N, n_a)
    inputs: np.ndarray  # (N, m)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        n = self.times.size
        self.states_d = np.asarray(self.states_d, dtype=float).reshape(n, -1)
        self.states_a = np.asarray(self.states_a, dtype=float).reshape(n, -1)
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(n, -1)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self):
        return self.times.size

    @property
    def n_d(self):
        return self.states_d.shape[1]

    @property
    def n_a(self):
        return self.states_a.shape[1]

    @property
    def m(self):
        return self.inputs.shape[1]

    def header(self):
        return ",".join(["t"] + [f"xd_{i}" for i in range(self.n_d)]
                        + [f"xa_{i}" for i in range(self.n_a)]
                        + [f"u_{i}" for i in range(self.m)])

    def to_csv(self, path):
        data = np.column_stack([self.times, self.states_d, self.states_a, self.inputs])
        np.savetxt(path, data, fmt="%.17g", delimiter=",", header=self.header(), comments="")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            cols = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n_d = sum(c.startswith("xd_") for c in cols)
        n_a = sum(c.startswith("xa_") for c in cols)
        return cls(data[:, 0], data[:, 1:1 + n_d], data[:, 1 + n_d:1 + n_d + n_a],
                   data[:, 1 + n_d + n_a:])


def time_grid(t_end, delta):
    """``0, delta, 2 delta, ...`` with the last step shortened to end at ``t_end``."""
    n_steps = max(int(math.ceil(t_end / delta - 1e-9)), 0)
    times = np.arange(n_steps + 1, dtype=float) * delta
    times[-1] = t_end
    return times


def march(system, x_d0, x_a0, input_fn, t_end, tableau, config, stage_inputs=True):
    """Fixed-step march from a consistent point; shared by all integrators."""
    times = time_grid(t_end, config.delta)
    n = times.size
    u0 = np.atleast_1d(np.asarray(input_fn(0.0), dtype=float))
    xs_d = np.empty((n, system.n_d))
    xs_a = np.empty((n, system.n_a))
    us = np.empty((n, u0.size))
    xs_d[0], xs_a[0], us[0] = x_d0, x_a0, u0
    absc = tableau.abscissae
    for k in range(n - 1):
        t, dt = times[k], times[k + 1] - times[k]
        cfg = config if dt == config.delta else _with_delta(config, dt)
        if stage_inputs:
            u = np.array([input_fn(t + dt * a) for a in absc], dtype=float).reshape(tableau.nu, -1)
        else:
            u = us[k]
        try:
            step = irk_step(system, xs_d[k], xs_a[k], u, tableau, cfg)
        except (NoConvergence, IndexViolation) as exc:
            raise SolverError(f"IRK step failed: {exc}", t, exc) from exc
        xs_d[k + 1], xs_a[k + 1] = step.x_d, step.x_a
        us[k + 1] = input_fn(times[k + 1])
    return Trajectory(times, xs_d, xs_a, us)


def _with_delta(config, delta):
    return SolverConfig(delta=delta, rel_tol=config.rel_tol, abs_tol=config.abs_tol,
                        max_step=config.max_step, newton_tol=config.newton_tol,
                        newton_max_iter=config.newton_max_iter)


def simulate(system, x_d0, input_fn, t_end, tableau, config, x_a_guess=None):
    """Integrate from ``x_d0`` to ``t_end`` with a consistent initial ``x_a``.

    Inputs are evaluated at the stage times ``t_n + delta * rowsum(b)_j``.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    x_d0 = np.asarray(x_d0, dtype=float)
    if x_a_guess is None:
        x_a_guess = np.zeros(system.n_a)
    try:
        x_a0 = solve_algebraic(system, x_d0, np.asarray(x_a_guess, dtype=float),
                               min(config.newton_tol, 1e-10), 50)
    except (NoConvergence, IndexViolation) as exc:
        raise SolverError(f"consistent initialization failed: {exc}", 0.0, exc) from exc
    return march(system, x_d0, x_a0, input_fn, t_end, tableau, config)


@dataclass(eq=False)
class SampleSet:
    """Adjacent-point pairs ``(x^n, x^{n+1})`` with their input and step size."""

    x_d: np.ndarray
    x_a: np.ndarray
    x_d_next: np.ndarray
    x_a_next: np.ndarray
    u: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.x_d = np.atleast_2d(np.asarray(self.x_d, dtype=float))
        eta = self.x_d.shape[0]
        for name in ("x_a", "x_d_next", "x_a_next", "u"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(eta, -1))
        self.delta = np.asarray(self.delta, dtype=float).reshape(eta)

    @property
    def eta(self):
        return self.x_d.shape[0]

    def __len__(self):
        return self.eta

    def subset(self, idx):
        return SampleSet(self.x_d[idx], self.x_a[idx], self.x_d_next[idx],
                         self.x_a_next[idx], self.u[idx], self.delta[idx])

    def header(self):
        n_d, n_a, m = self.x_d.shape[1], self.x_a.shape[1], self.u.shape[1]
        return ",".join([f"xd_{i}" for i in range(n_d)] + [f"xa_{i}" for i in range(n_a)]
                        + [f"xd_next_{i}" for i in range(n_d)]
                        + [f"xa_next_{i}" for i in range(n_a)]
                        + [f"u_{i}" for i in range(m)] + ["delta"])

    def to_csv(self, path):
        data = np.column_stack([self.x_d, self.x_a, self.x_d_next, self.x_a_next, self.u,
                                self.delta])
        np.savetxt(path, data, fmt="%.17g", delimiter=",", header=self.header(), comments="")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            cols = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n_d = sum(c.startswith("xd_") and not c.startswith("xd_next") for c in cols)
        n_a = sum(c.startswith("xa_") and not c.startswith("xa_next") for c in cols)
        splits = np.cumsum([n_d, n_a, n_d, n_a])
        x_d, x_a, x_d_next, x_a_next, rest = np.split(data, splits, axis=1)
        return cls(x_d, x_a, x_d_next, x_a_next, rest[:, :-1], rest[:, -1])


def sample_dataset(traj, eta, seed):
    """Pick ``eta`` adjacent-point pairs uniformly without replacement.

    ``traj`` may be one trajectory or a sequence of them; pairs never straddle
    two trajectories.
    """
    trajs = [traj] if isinstance(traj, Trajectory) else list(traj)
    pools = [(k, i) for k, tr in enumerate(trajs) for i in range(len(tr) - 1)]
    if eta < 1 or eta > len(pools):
        raise TooFewPoints(f"cannot draw {eta} pairs from {len(pools)} available")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pools), size=eta, replace=False)
    rows = [pools[c] for c in chosen]

    def gather(attr, offset):
        return np.array([getattr(trajs[k], attr)[i + offset] for k, i in rows])

    times_n = gather("times", 0)
    return SampleSet(
        x_d=gather("states_d", 0),
        x_a=gather("states_a", 0),
        x_d_next=gather("states_d", 1),
        x_a_next=gather("states_a", 1),
        u=gather("inputs", 0),
        delta=gather("times", 1) - times_n,
    )

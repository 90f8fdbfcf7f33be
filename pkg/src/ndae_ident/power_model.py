"""Semi-explicit index-1 NDAE model and a seeded synthetic multi-machine instance.

The model is::

    x_d' = A_d x_d + C_d f(x_d, x_a) + B u + h w0
       0 = A_a x_a + C_a g(x_d, x_a)

``f`` and ``g`` are callables ``(x_d, x_a) -> vector``. When they expose a
``jacobian(x_d, x_a) -> (J_d, J_a)`` method it is used, otherwise Jacobians
fall back to central differences.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ndae_ident.errors import DimensionMismatch
from ndae_ident.numerics import finite_diff_jacobian, newton_solve, sym_eig_min

FD_STEP = 1e-6

OPS = ("sin_diff", "cos_times", "linear")
X_D, X_A = 0, 1


@dataclass(frozen=True)
class Term:
    """One additive term of a nonlinearity component.

    ``sin_diff``  coef * sin(x_d[i] - x_d[j]),   idx = (i, j)
    ``cos_times`` coef * cos(x_d[i]) * x_a[k],   idx = (i, k)
    ``linear``    coef * x[k], x = x_d if var == 0 else x_a,   idx = (var, k)
    """

    op: str
    out: int
    idx: tuple
    coef: float

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown term op {self.op!r}")


class TermNonlinearity:
    """Sum-of-terms nonlinearity with an analytic Jacobian."""

    def __init__(self, terms, n_out, n_d, n_a):
        self.terms = tuple(terms)
        self.n_out = n_out
        self.n_d = n_d
        self.n_a = n_a
        for t in self.terms:
            if not 0 <= t.out < n_out:
                raise DimensionMismatch(f"term output {t.out} outside [0, {n_out})")
        self._groups = {}
        for key, pick in (
            ("sin_diff", lambda t: t.op == "sin_diff"),
            ("cos_times", lambda t: t.op == "cos_times"),
            ("linear_d", lambda t: t.op == "linear" and t.idx[0] == X_D),
            ("linear_a", lambda t: t.op == "linear" and t.idx[0] == X_A),
        ):
            sel = [t for t in self.terms if pick(t)]
            out = np.array([t.out for t in sel], dtype=int)
            idx = np.array([t.idx for t in sel], dtype=int).reshape(-1, 2)
            coef = np.array([t.coef for t in sel], dtype=float)
            self._groups[key] = (out, idx, coef)

    def __call__(self, x_d, x_a):
        y = np.zeros(self.n_out)
        out, idx, coef = self._groups["sin_diff"]
        np.add.at(y, out, coef * np.sin(x_d[idx[:, 0]] - x_d[idx[:, 1]]))
        out, idx, coef = self._groups["cos_times"]
        np.add.at(y, out, coef * np.cos(x_d[idx[:, 0]]) * x_a[idx[:, 1]])
        out, idx, coef = self._groups["linear_d"]
        np.add.at(y, out, coef * x_d[idx[:, 1]])
        out, idx, coef = self._groups["linear_a"]
        np.add.at(y, out, coef * x_a[idx[:, 1]])
        return y

    def jacobian(self, x_d, x_a):
        jd = np.zeros((self.n_out, self.n_d))
        ja = np.zeros((self.n_out, self.n_a))
        out, idx, coef = self._groups["sin_diff"]
        c = coef * np.cos(x_d[idx[:, 0]] - x_d[idx[:, 1]])
        np.add.at(jd, (out, idx[:, 0]), c)
        np.add.at(jd, (out, idx[:, 1]), -c)
        out, idx, coef = self._groups["cos_times"]
        np.add.at(jd, (out, idx[:, 0]), -coef * np.sin(x_d[idx[:, 0]]) * x_a[idx[:, 1]])
        np.add.at(ja, (out, idx[:, 1]), coef * np.cos(x_d[idx[:, 0]]))
        out, idx, coef = self._groups["linear_d"]
        np.add.at(jd, (out, idx[:, 1]), coef)
        out, idx, coef = self._groups["linear_a"]
        np.add.at(ja, (out, idx[:, 1]), coef)
        return jd, ja

    def lipschitz_in_xa(self):
        """Entrywise bound on |d(output)/d(x_a)| valid for all arguments."""
        bound = np.zeros((self.n_out, self.n_a))
        for t in self.terms:
            if t.op == "cos_times":
                bound[t.out, t.idx[1]] += abs(t.coef)
            elif t.op == "linear" and t.idx[0] == X_A:
                bound[t.out, t.idx[1]] += abs(t.coef)
        return bound

    def to_dict(self):
        return {
            "n_out": self.n_out,
            "terms": [
                {"op": t.op, "out": t.out, "idx": list(t.idx), "coef": t.coef}
                for t in self.terms
            ],
        }

    @classmethod
    def from_dict(cls, data, n_d, n_a):
        terms = [Term(t["op"], int(t["out"]), tuple(int(i) for i in t["idx"]), float(t["coef"]))
                 for t in data["terms"]]
        return cls(terms, int(data["n_out"]), n_d, n_a)


def _as_vector(x, n, name):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (n,):
        raise DimensionMismatch(f"{name} has shape {x.shape}, expected ({n},)")
    return x


def _nl_jacobian(fn, x_d, x_a, n_out):
    if hasattr(fn, "jacobian"):
        return fn.jacobian(x_d, x_a)
    n_d = x_d.size
    z = np.concatenate([x_d, x_a])
    jac = finite_diff_jacobian(lambda v: np.atleast_1d(fn(v[:n_d], v[n_d:])), z, FD_STEP)
    jac = jac.reshape(n_out, z.size)
    return jac[:, :n_d], jac[:, n_d:]


@dataclass(frozen=True, eq=False)
class NdaeModel:
    a_d: np.ndarray
    c_d: np.ndarray
    b: np.ndarray
    a_a: np.ndarray
    c_a: np.ndarray
    h: np.ndarray
    w0: float
    f: object
    g: object
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("a_d", "c_d", "b", "a_a", "c_a"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        h = np.atleast_1d(np.asarray(self.h, dtype=float))
        h.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "w0", float(self.w0))
        n_d, n_a = self.a_d.shape[0], self.a_a.shape[0]
        if self.a_d.shape != (n_d, n_d) or self.a_a.shape != (n_a, n_a):
            raise DimensionMismatch("A_d and A_a must be square")
        if self.c_d.shape[0] != n_d or self.b.shape[0] != n_d or self.h.shape != (n_d,):
            raise DimensionMismatch("C_d, B and h must have n_d rows")
        if self.c_a.shape[0] != n_a:
            raise DimensionMismatch("C_a must have n_a rows")

    @property
    def n_d(self):
        return self.a_d.shape[0]

    @property
    def n_a(self):
        return self.a_a.shape[0]

    @property
    def m(self):
        return self.b.shape[1]

    def rhs(self, x_d, x_a, u):
        return self.a_d @ x_d + self.c_d @ np.atleast_1d(self.f(x_d, x_a)) + self.b @ u + self.h * self.w0

    def alg(self, x_d, x_a):
        return self.a_a @ x_a + self.c_a @ np.atleast_1d(self.g(x_d, x_a))

    def rhs_jac(self, x_d, x_a, u):
        fd, fa = _nl_jacobian(self.f, x_d, x_a, self.c_d.shape[1])
        return self.a_d + self.c_d @ fd, self.c_d @ fa

    def alg_jac(self, x_d, x_a):
        gd, ga = _nl_jacobian(self.g, x_d, x_a, self.c_a.shape[1])
        return self.c_a @ gd, self.a_a + self.c_a @ ga

    def to_dict(self):
        if not (isinstance(self.f, TermNonlinearity) and isinstance(self.g, TermNonlinearity)):
            raise TypeError("only term-list nonlinearities can be serialized")
        return {
            "n_d": self.n_d,
            "n_a": self.n_a,
            "m": self.m,
            "a_d": self.a_d.tolist(),
            "c_d": self.c_d.tolist(),
            "b": self.b.tolist(),
            "a_a": self.a_a.tolist(),
            "c_a": self.c_a.tolist(),
            "h": self.h.tolist(),
            "w0": self.w0,
            "f": self.f.to_dict(),
            "g": self.g.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data):
        n_d, n_a, m = int(data["n_d"]), int(data["n_a"]), int(data["m"])

        def mat(key, rows, cols):
            arr = np.array(data[key], dtype=float).reshape(rows, cols)
            return arr

        f = TermNonlinearity.from_dict(data["f"], n_d, n_a)
        g = TermNonlinearity.from_dict(data["g"], n_d, n_a)
        return cls(
            a_d=mat("a_d", n_d, n_d),
            c_d=mat("c_d", n_d, f.n_out),
            b=mat("b", n_d, m),
            a_a=mat("a_a", n_a, n_a),
            c_a=mat("c_a", n_a, g.n_out),
            h=np.array(data["h"], dtype=float),
            w0=float(data["w0"]),
            f=f,
            g=g,
            meta=dict(data.get("meta", {})),
        )


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return NdaeModel.from_dict(json.load(fh))


def _check_point(model, x_d, x_a):
    return _as_vector(x_d, model.n_d, "x_d"), _as_vector(x_a, model.n_a, "x_a")


def eval_dynamic_rhs(model, x_d, x_a, u):
    x_d, x_a = _check_point(model, x_d, x_a)
    u = _as_vector(u, model.m, "u")
    return model.rhs(x_d, x_a, u)


def eval_algebraic_residual(model, x_d, x_a):
    x_d, x_a = _check_point(model, x_d, x_a)
    return model.alg(x_d, x_a)


def algebraic_jacobian(model, x_d, x_a):
    """d(A_a x_a + C_a g)/d(x_a) at one point."""
    x_d, x_a = _check_point(model, x_d, x_a)
    return model.alg_jac(x_d, x_a)[1]


def index1_margin(model, points):
    """Smallest singular value of the algebraic Jacobian over ``points``.

    A positive result certifies the index-1 property along the sample.
    """
    points = list(points)
    if not points:
        raise ValueError("need at least one point")
    margin = np.inf
    for x_d, x_a in points:
        jac = algebraic_jacobian(model, x_d, x_a)
        margin = min(margin, np.sqrt(max(sym_eig_min(jac.T @ jac), 0.0)))
    return float(margin)


def consistent_init(model, x_d0, x_a_guess, tol=1e-10, max_iter=50):
    """Solve ``g~(x_d0, x_a) = 0`` for ``x_a`` starting from ``x_a_guess``."""
    x_d0, x_a_guess = _check_point(model, x_d0, x_a_guess)
    result = newton_solve(
        lambda xa: model.alg(x_d0, xa),
        x_a_guess,
        jacobian=lambda xa: model.alg_jac(x_d0, xa)[1],
        tol=tol,
        max_iter=max_iter,
    )
    return result.x


def _is_hurwitz(a):
    return bool(np.max(np.linalg.eigvals(a).real) < 0)


def build_synthetic_model(n_gen, seed):
    """Seeded synthetic multi-machine model.

    Four dynamic states (rotor-angle, speed and two flux-like states) and eight
    algebraic voltage-like variables per generator, two inputs per generator.
    ``A_a`` is built so that Johnson's lower bound on the smallest singular
    value of the algebraic Jacobian is at least 1 everywhere.
    """
    if n_gen < 1:
        raise ValueError("n_gen must be >= 1")
    rng = np.random.default_rng(seed)
    n_d, n_a, m = 4 * n_gen, 8 * n_gen, 2 * n_gen
    n_f = 2 * n_gen

    def angle(i):
        return 4 * i

    def coef(lo, hi):
        return float(rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi))

    # A_d: stable diagonal with weak coupling, redrawn until Hurwitz
    while True:
        a_d = np.diag(-rng.uniform(0.5, 3.0, n_d)) + rng.uniform(-0.1, 0.1, (n_d, n_d)) * (1 - np.eye(n_d))
        if _is_hurwitz(a_d):
            break

    f_terms = []
    for i in range(n_gen):
        partners = [angle(j) for j in range(n_gen) if j != i] or [angle(i) + 2]
        for p in partners:
            f_terms.append(Term("sin_diff", 2 * i, (angle(i), p), coef(0.3, 1.0)))
        for k in rng.choice(8, size=2, replace=False):
            f_terms.append(Term("cos_times", 2 * i, (angle(i), 8 * i + int(k)), coef(0.2, 0.6)))
        flux = angle(i) + 2 + int(rng.integers(0, 2))
        f_terms.append(Term("cos_times", 2 * i + 1, (flux, 8 * i + int(rng.integers(0, 8))), coef(0.2, 0.6)))
        f_terms.append(Term("linear", 2 * i + 1, (X_A, 8 * i + int(rng.integers(0, 8))), coef(0.2, 0.6)))
    f = TermNonlinearity(f_terms, n_f, n_d, n_a)

    c_d = np.zeros((n_d, n_f))
    for i in range(n_gen):
        c_d[angle(i) + 1, 2 * i] = -rng.uniform(0.5, 1.5)
        c_d[angle(i) + 2, 2 * i + 1] = -rng.uniform(0.5, 1.5)
        c_d[angle(i) + 3, 2 * i + 1] = rng.uniform(-0.5, 0.5)
    c_d += rng.uniform(-0.1, 0.1, c_d.shape) * (c_d == 0)

    g_terms = []
    for r in range(n_a):
        i = r // 8
        g_terms.append(Term("linear", r, (X_D, angle(i) + int(rng.integers(0, 4))), coef(1.0, 3.0)))
        g_terms.append(Term("linear", r, (X_D, int(rng.integers(0, n_d))), coef(0.2, 1.0)))
        partners = [angle(j) for j in range(n_gen) if j != i] or [angle(i) + 3]
        g_terms.append(Term("sin_diff", r, (angle(i), partners[int(rng.integers(0, len(partners)))]),
                            coef(0.5, 1.5)))
        k = 8 * i + int(rng.integers(0, 8))
        if k == r:
            k = 8 * i + (r + 1) % 8
        g_terms.append(Term("cos_times", r, (angle(i) + int(rng.integers(0, 4)), k), coef(0.2, 0.5)))
    g = TermNonlinearity(g_terms, n_a, n_d, n_a)

    c_a = np.eye(n_a) + rng.uniform(-0.05, 0.05, (n_a, n_a))

    a_a = rng.uniform(-0.1, 0.1, (n_a, n_a))
    np.fill_diagonal(a_a, 0.0)
    coupling = np.abs(c_a) @ g.lipschitz_in_xa()
    diag = (1.0 + np.abs(a_a).sum(axis=1) + np.abs(a_a).sum(axis=0)
            + coupling.sum(axis=1) + coupling.sum(axis=0))
    a_a[np.diag_indices(n_a)] = diag

    b = np.zeros((n_d, m))
    for i in range(n_gen):
        b[angle(i) + 1, 2 * i] = rng.uniform(0.5, 1.5)
        b[angle(i) + 2, 2 * i + 1] = rng.uniform(0.5, 1.5)
    h = rng.uniform(-0.5, 0.5, n_d)

    return NdaeModel(a_d=a_d, c_d=c_d, b=b, a_a=a_a, c_a=c_a, h=h, w0=1.0, f=f, g=g,
                     meta={"n_gen": n_gen, "seed": seed})

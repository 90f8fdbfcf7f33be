"""IRK-constrained penalty training of the algebraic map and the DNN.

Collocation mode treats the per-sample stage values as decision variables
optimised jointly with the network; implicit-solve mode computes the stages
by Newton on the surrogate IRK equations and differentiates through the solve.
"""

import csv
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from ndae_ident.dae_solver import get_tableau
from ndae_ident.errors import DimensionMismatch, GridMismatch, NoConvergence, NonFiniteLoss
from ndae_ident.nn import ParamVector

GRAD_EPS = 1e-12


@dataclass
class LossWeights:
    w_d: float = 1.0
    w_a: float = 1.0
    update_rate: float = 0.1

    def __post_init__(self):
        if not (self.w_d > 0 and self.w_a > 0 and np.isfinite(self.w_d) and np.isfinite(self.w_a)):
            raise ValueError("loss weights must be positive and finite")
        if not 0 < self.update_rate <= 1:
            raise ValueError("update_rate must lie in (0, 1]")


@dataclass
class TrainConfig:
    mode: str = "collocation"
    epochs: int = 1000
    batch_size: int = 0  # 0 means full batch
    lr: float = 1e-3
    lr_final: float = 0.0  # 0 disables the exponential decay towards lr_final
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    tableau: str = "radau2"
    delta: float = 0.0  # 0 means use each sample's own step size
    weight_every: int = 10
    weight_rate: float = 0.1
    project_algebraic: bool = True
    pin_endpoint: bool = True
    newton_tol: float = 1e-10
    newton_max_iter: int = 20
    standardize: bool = False  # algebraic phase: train in z-scored coordinates
    stage_lr_scale: float = 1.0  # collocation: step-size multiplier for the stage unknowns

    def __post_init__(self):
        if self.mode not in ("collocation", "implicit_solve"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 0 or self.weight_every < 1:
            raise ValueError("counts must be non-negative")
        if self.lr <= 0 or self.stage_lr_scale <= 0 or not 0 < self.weight_rate <= 1:
            raise ValueError("rates must be positive")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


def load_train_config(path):
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))


@dataclass(eq=False)
class StageVariables:
    """Per-sample stage values; arrays carry a leading sample axis."""

    alpha: np.ndarray  # (eta, nu, n_d)
    beta: np.ndarray  # (eta, nu, n_a)
    x_d_next: np.ndarray  # (eta, n_d)
    x_a_next: np.ndarray  # (eta, n_a)

    def copy(self):
        return StageVariables(self.alpha.copy(), self.beta.copy(), self.x_d_next.copy(),
                              self.x_a_next.copy())

    def flat(self):
        return np.concatenate([self.alpha.ravel(), self.beta.ravel(), self.x_d_next.ravel(),
                               self.x_a_next.ravel()])

    def with_flat(self, v):
        out, pos = [], 0
        for arr in (self.alpha, self.beta, self.x_d_next, self.x_a_next):
            out.append(v[pos:pos + arr.size].reshape(arr.shape))
            pos += arr.size
        return StageVariables(*out)


def initial_stages(samples, ell_hat, nu):
    """Stages at ``(x_d^n, ell_hat(x_d^n))``, endpoint at the measured next point."""
    alpha = np.repeat(samples.x_d[:, None, :], nu, axis=1)
    beta = np.repeat(ell_hat.forward(samples.x_d)[:, None, :], nu, axis=1)
    return StageVariables(alpha, beta, samples.x_d_next.copy(), samples.x_a_next.copy())


class SurrogateResidual:
    """Black-box manifold residual ``x_a - ell_hat(x_d)``."""

    def __init__(self, ell_hat):
        self.ell_hat = ell_hat

    def value(self, x_d, x_a):
        return x_a - self.ell_hat.forward(x_d)

    def vjp(self, x_d, x_a, seed):
        _, acts = self.ell_hat.forward_cached(x_d)
        _, grad_xd = self.ell_hat.backward(acts, -seed)
        return grad_xd, seed

    def project(self, x_d, x_a_guess):
        return self.ell_hat.forward(x_d)


class TrueResidual:
    """White-box residual ``g~(x_d, x_a)`` of the ground-truth model."""

    def __init__(self, model, tol=1e-12, max_iter=50):
        self.model = model
        self.tol = tol
        self.max_iter = max_iter

    def value(self, x_d, x_a):
        return np.array([self.model.alg(a, b) for a, b in zip(x_d, x_a)]).reshape(len(x_d), -1)

    def vjp(self, x_d, x_a, seed):
        gd = np.empty_like(x_d)
        ga = np.empty_like(x_a)
        for k, (a, b) in enumerate(zip(x_d, x_a)):
            jd, ja = self.model.alg_jac(a, b)
            gd[k] = seed[k] @ jd
            ga[k] = seed[k] @ ja
        return gd, ga

    def project(self, x_d, x_a_guess):
        from ndae_ident.power_model import consistent_init

        return np.array([consistent_init(self.model, a, b, tol=self.tol, max_iter=self.max_iter)
                         for a, b in zip(x_d, x_a_guess)]).reshape(x_a_guess.shape)


def _deltas(samples, delta):
    if delta:
        return np.full(samples.eta, float(delta))
    return samples.delta


def _stage_rhs(dnn, stages, samples):
    eta, nu, n = stages.alpha.shape
    u = np.repeat(samples.u, nu, axis=0)
    return dnn.rhs_batch(stages.alpha.reshape(eta * nu, n), u).reshape(eta, nu, n)


def _dynamic_residuals(samples, dnn, stages, tableau, delta):
    """Return ``(F, r)`` with ``r[:, j] = x^n - x_hat^{n,j}``, ``j = 0..nu``."""
    dt = _deltas(samples, delta)[:, None, None]
    fs = _stage_rhs(dnn, stages, samples)
    bf = np.einsum("ji,sin->sjn", tableau.b, fs)
    cf = np.einsum("i,sin->sn", tableau.c, fs)
    x_n = samples.x_d[:, None, :]
    r = np.empty((samples.eta, tableau.nu + 1, samples.x_d.shape[1]))
    r[:, :-1] = x_n - (stages.alpha - dt * bf)
    r[:, -1] = samples.x_d - (stages.x_d_next - dt[:, :, 0] * cf)
    return fs, r


def _check_stage_dims(samples, stages, tableau):
    eta, n_d = samples.x_d.shape
    if stages.alpha.shape != (eta, tableau.nu, n_d) or stages.x_d_next.shape != (eta, n_d):
        raise DimensionMismatch("stage variables do not match samples and tableau")
    if stages.beta.shape[:2] != (eta, tableau.nu) or stages.x_a_next.shape[0] != eta:
        raise DimensionMismatch("algebraic stage variables do not match samples and tableau")


def loss_dynamic(samples, dnn, stages, tableau, delta=0.0):
    """Mean over samples and the ``nu + 1`` reconstructions of ``||x^n - x_hat^{n,j}||^2``."""
    _check_stage_dims(samples, stages, tableau)
    _, r = _dynamic_residuals(samples, dnn, stages, tableau, delta)
    return float(np.sum(r * r) / (samples.eta * (tableau.nu + 1)))


def _algebraic_norms(stages, residual):
    eta, nu, n_d = stages.alpha.shape
    n_a = stages.beta.shape[2]
    xd = np.concatenate([stages.alpha.reshape(eta * nu, n_d), stages.x_d_next])
    xa = np.concatenate([stages.beta.reshape(eta * nu, n_a), stages.x_a_next])
    r = residual.value(xd, xa)
    return xd, xa, r, np.linalg.norm(r, axis=1)


def loss_algebraic(stages, residual, nu):
    """Sample mean of ``(sum_j ||res(alpha_j, beta_j)|| + ||res(endpoint)||) / (nu + 1)``."""
    if stages.alpha.shape[1] != nu:
        raise DimensionMismatch(f"stages carry {stages.alpha.shape[1]} entries, expected {nu}")
    eta = stages.alpha.shape[0]
    _, _, _, norms = _algebraic_norms(stages, residual)
    return float(norms.sum() / (eta * (nu + 1)))


def total_loss(l_d, l_a, w):
    if l_d < 0 or l_a < 0:
        raise ValueError("loss components must be non-negative")
    return w.w_d * l_d + w.w_a * l_a


@dataclass
class LossEval:
    l_d: float
    l_a: float
    grad_d_params: ParamVector
    grad_a_params: ParamVector
    grad_d_stages: StageVariables
    grad_a_stages: StageVariables

    def total(self, w):
        return total_loss(self.l_d, self.l_a, w)


def collocation_loss(samples, dnn, stages, tableau, residual, delta=0.0):
    """``L_d``, ``L_a`` and their exact gradients w.r.t. DNN parameters and stages."""
    _check_stage_dims(samples, stages, tableau)
    eta, nu, n_d = stages.alpha.shape
    dt = _deltas(samples, delta)
    fs, r = _dynamic_residuals(samples, dnn, stages, tableau, delta)
    scale = 1.0 / (eta * (nu + 1))
    l_d = float(np.sum(r * r) * scale)

    g = 2.0 * scale * r
    d_alpha = -g[:, :-1].copy()
    d_xnext = -g[:, -1].copy()
    # seed on F_i: dt * (sum_j b_ji g_j + c_i g_end)
    q = dt[:, None, None] * (np.einsum("ji,sjn->sin", tableau.b, g[:, :-1])
                             + tableau.c[None, :, None] * g[:, -1][:, None, :])
    grad_params, x_grad = dnn.vjp(stages.alpha.reshape(eta * nu, n_d), q.reshape(eta * nu, n_d))
    d_alpha += x_grad.reshape(eta, nu, n_d)
    grad_d_stages = StageVariables(d_alpha, np.zeros_like(stages.beta), d_xnext,
                                   np.zeros_like(stages.x_a_next))

    xd, xa, ra, norms = _algebraic_norms(stages, residual)
    l_a = float(norms.sum() * scale)
    n_a = stages.beta.shape[2]
    if norms.any():
        safe = np.where(norms > 0, norms, 1.0)
        seed = np.where(norms[:, None] > 0, ra / safe[:, None], 0.0) * scale
        gxd, gxa = residual.vjp(xd, xa, seed)
    else:
        # on the manifold the (sub)gradient is taken as zero
        gxd, gxa = np.zeros_like(xd), np.zeros_like(xa)
    grad_a_stages = StageVariables(
        gxd[:eta * nu].reshape(eta, nu, n_d), gxa[:eta * nu].reshape(eta, nu, n_a),
        gxd[eta * nu:], gxa[eta * nu:])
    grad_a_params = ParamVector(np.zeros(len(grad_params)), grad_params.layout)
    return LossEval(l_d, l_a, grad_params, grad_a_params, grad_d_stages, grad_a_stages)


def update_weights(w, grad_d, grad_a):
    """Gradient-magnitude balancing of the manifold penalty weight; ``w_d`` stays 1."""
    gd = np.abs(grad_d.values if isinstance(grad_d, ParamVector) else np.asarray(grad_d))
    ga = np.abs(grad_a.values if isinstance(grad_a, ParamVector) else np.asarray(grad_a))
    mean_a = ga.mean() if ga.size else 0.0
    if mean_a < GRAD_EPS:
        return replace(w, w_d=1.0)
    target = gd.mean() / (mean_a + GRAD_EPS)
    lam = w.update_rate
    return LossWeights(w_d=1.0, w_a=(1 - lam) * w.w_a + lam * target, update_rate=lam)


class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, x, grad, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return x - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _lr_at(config, epoch):
    if not config.lr_final or config.epochs <= 1:
        return config.lr
    frac = epoch / (config.epochs - 1)
    return config.lr * (config.lr_final / config.lr) ** frac


def _batches(rng, n, batch_size):
    if not batch_size or batch_size >= n:
        return [slice(None)]
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    l_d: list = field(default_factory=list)
    l_a: list = field(default_factory=list)
    w_d: list = field(default_factory=list)
    w_a: list = field(default_factory=list)
    total: list = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def append(self, epoch, l_d, l_a, w):
        self.epoch.append(epoch)
        self.l_d.append(l_d)
        self.l_a.append(l_a)
        self.w_d.append(w.w_d)
        self.w_a.append(w.w_a)
        self.total.append(total_loss(l_d, l_a, w))

    def best_so_far(self):
        return np.minimum.accumulate(np.asarray(self.total)) if self.total else np.zeros(0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "L_d", "L_a", "w_d", "w_a", "total"])
            for row in zip(self.epoch, self.l_d, self.l_a, self.w_d, self.w_a, self.total):
                writer.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])


def _scales(data):
    mu = data.mean(axis=0)
    sigma = data.std(axis=0)
    return mu, np.where(sigma > 1e-12, sigma, 1.0)


def fold_standardization(net, mu_x, sigma_x, mu_y, sigma_y):
    """Absorb ``z = (x - mu_x) / sigma_x`` and ``y = mu_y + sigma_y out`` into the weights."""
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    biases[0] = biases[0] - weights[0] @ (mu_x / sigma_x)
    weights[0] = weights[0] / sigma_x
    weights[-1] = sigma_y[:, None] * weights[-1]
    biases[-1] = sigma_y * biases[-1] + mu_y
    return type(net)(weights, biases)


def train_algebraic(samples, net, config):
    """Fit ``x_a = net(x_d)`` by full- or mini-batch Adam on the mean squared error.

    With ``config.standardize`` the optimiser works on a copy of the network in
    z-scored coordinates; the objective is still the raw MSE and the returned
    network has the scaling folded back in. Returns the best iterate and the
    history; ``history.l_a`` holds the MSE.
    """
    x, y = samples.x_d, samples.x_a
    if x.shape[1] != net.n_in or y.shape[1] != net.n_out:
        raise DimensionMismatch("sample dimensions do not match the network")
    if config.standardize:
        mu_x, sigma_x = _scales(x)
        mu_y, sigma_y = _scales(y)
    else:
        mu_x, sigma_x = np.zeros(x.shape[1]), np.ones(x.shape[1])
        mu_y, sigma_y = np.zeros(y.shape[1]), np.ones(y.shape[1])
    z = (x - mu_x) / sigma_x
    rng = np.random.default_rng(config.seed)
    pv = net.params()
    theta = pv.values.copy()
    opt = Adam(theta.size, config.lr, config.beta1, config.beta2, config.eps)
    history = TrainHistory()
    weights = LossWeights()

    def raw(theta):
        return fold_standardization(net.with_params(ParamVector(theta, pv.layout)),
                                    mu_x, sigma_x, mu_y, sigma_y)

    best, best_loss = raw(theta), np.inf
    last_finite = best
    for epoch in range(config.epochs):
        current = raw(theta)
        loss = float(np.mean(np.sum((current.forward(x) - y) ** 2, axis=1)))
        if not np.isfinite(loss):
            raise NonFiniteLoss("algebraic loss is not finite", epoch, last_finite)
        last_finite = current
        history.append(epoch, 0.0, loss, weights)
        if loss < best_loss:
            best, best_loss = current, loss
        lr = _lr_at(config, epoch)
        for idx in _batches(rng, len(x), config.batch_size):
            inner = net.with_params(ParamVector(theta, pv.layout))
            out, acts = inner.forward_cached(z[idx])
            resid = mu_y + sigma_y * out - y[idx]
            grads, _ = inner.backward(acts, 2.0 * sigma_y * resid / len(resid))
            grad = ParamVector.flatten(inner.grads_to_params(grads)).values
            theta = opt.step(theta, grad, lr)
    if config.epochs:
        final = raw(theta)
        loss = float(np.mean(np.sum((final.forward(x) - y) ** 2, axis=1)))
        if np.isfinite(loss) and loss < best_loss:
            best = final
    return best, history


def _project(stages, residual, config):
    eta, nu, n_d = stages.alpha.shape
    n_a = stages.beta.shape[2]
    out = stages.copy()
    if config.project_algebraic:
        out.beta = residual.project(stages.alpha.reshape(eta * nu, n_d),
                                    stages.beta.reshape(eta * nu, n_a)).reshape(eta, nu, n_a)
        out.x_a_next = residual.project(stages.x_d_next, stages.x_a_next)
    return out


def _train_collocation(samples, dnn, residual, tableau, config, weights):
    eta, n_d = samples.x_d.shape
    nu = tableau.nu
    rng = np.random.default_rng(config.seed)
    dt = _deltas(samples, config.delta)[:, None, None]
    stages = _project(initial_stages(samples, residual.ell_hat if hasattr(residual, "ell_hat")
                                     else _identity_guess(samples), nu), residual, config)
    layout = dnn.params().layout
    theta = dnn.params().values.copy()
    # stage slopes kappa = (alpha - x^n) / delta keep the stage unknowns O(1)
    kappa = (stages.alpha - samples.x_d[:, None, :]) / dt
    free_beta = not config.project_algebraic
    free_end = not config.pin_endpoint
    blocks = {"theta": theta, "kappa": kappa.ravel()}
    if free_beta:
        blocks["beta"] = stages.beta.ravel().copy()
        blocks["x_a_next"] = stages.x_a_next.ravel().copy()
    if free_end:
        blocks["x_d_next"] = stages.x_d_next.ravel().copy()
    opts = {k: Adam(v.size, config.lr, config.beta1, config.beta2, config.eps) for k, v in blocks.items()}
    history = TrainHistory()
    current = dnn
    last_finite = (dnn, stages)

    def assemble(blocks):
        st = stages.copy()
        st.alpha = samples.x_d[:, None, :] + dt * blocks["kappa"].reshape(eta, nu, n_d)
        if free_beta:
            st.beta = blocks["beta"].reshape(st.beta.shape)
            st.x_a_next = blocks["x_a_next"].reshape(st.x_a_next.shape)
        if free_end:
            st.x_d_next = blocks["x_d_next"].reshape(st.x_d_next.shape)
        return _project(st, residual, config)

    for epoch in range(config.epochs):
        current = dnn.with_params(ParamVector(blocks["theta"], layout))
        stages = assemble(blocks)
        ev = collocation_loss(samples, current, stages, tableau, residual, config.delta)
        total = ev.total(weights)
        if not np.isfinite(total):
            raise NonFiniteLoss("dynamic loss is not finite", epoch, last_finite)
        last_finite = (current, stages)
        history.append(epoch, ev.l_d, ev.l_a, weights)
        if epoch and epoch % config.weight_every == 0:
            weights = update_weights(
                replace(weights, update_rate=config.weight_rate),
                np.concatenate([ev.grad_d_params.values, ev.grad_d_stages.flat()]),
                np.concatenate([ev.grad_a_params.values, ev.grad_a_stages.flat()]))
        grads = {
            "theta": weights.w_d * ev.grad_d_params.values + weights.w_a * ev.grad_a_params.values,
            "kappa": (dt * (weights.w_d * ev.grad_d_stages.alpha
                            + weights.w_a * ev.grad_a_stages.alpha)).ravel(),
        }
        if free_beta:
            grads["beta"] = (weights.w_d * ev.grad_d_stages.beta + weights.w_a * ev.grad_a_stages.beta).ravel()
            grads["x_a_next"] = (weights.w_d * ev.grad_d_stages.x_a_next
                                 + weights.w_a * ev.grad_a_stages.x_a_next).ravel()
        if free_end:
            grads["x_d_next"] = (weights.w_d * ev.grad_d_stages.x_d_next
                                 + weights.w_a * ev.grad_a_stages.x_d_next).ravel()
        lr = _lr_at(config, epoch)
        batches = _batches(rng, eta, config.batch_size)
        if len(batches) > 1:
            # stage blocks only move for the samples in the batch
            mask = np.zeros(eta, dtype=bool)
            mask[batches[0]] = True
            for key in grads:
                if key != "theta":
                    per = grads[key].reshape(eta, -1)
                    per[~mask] = 0.0
        for key in blocks:
            step = lr if key == "theta" else lr * config.stage_lr_scale
            blocks[key] = opts[key].step(blocks[key], grads[key], step)
    current = dnn.with_params(ParamVector(blocks["theta"], layout))
    stages = assemble(blocks)
    return current, stages, history, weights


def _identity_guess(samples):
    class _Zero:
        def forward(self, x):
            return np.zeros((len(x), samples.x_a.shape[1]))
    return _Zero()


def solve_surrogate_stages(samples, dnn, tableau, delta=0.0, alpha0=None, tol=1e-10, max_iter=20):
    """Batched Newton on ``alpha_j = x^n + delta sum_i b_ji f_hat(alpha_i)``.

    Returns ``(alpha, jac)`` where ``jac`` is the per-sample stage Jacobian at
    the solution, shape ``(eta, nu n, nu n)``.
    """
    eta, n = samples.x_d.shape
    nu = tableau.nu
    dt = _deltas(samples, delta)
    u = np.repeat(samples.u, nu, axis=0)
    alpha = (np.repeat(samples.x_d[:, None, :], nu, axis=1) if alpha0 is None else alpha0.copy())
    eye = np.eye(nu * n)
    for it in range(max_iter + 1):
        flat = alpha.reshape(eta * nu, n)
        fs = dnn.rhs_batch(flat, u).reshape(eta, nu, n)
        res = alpha - samples.x_d[:, None, :] - dt[:, None, None] * np.einsum("ji,sin->sjn", tableau.b, fs)
        jf = (dnn.a_nn + np.einsum("ij,njk->nik", dnn.b_nn, dnn.rho.input_jacobian(flat)))
        jf = jf.reshape(eta, nu, n, n)
        # block (j, i) = delta_ij I - dt b_ji Jf_i
        jac = eye - (dt[:, None, None, None, None] * tableau.b[None, :, None, :, None]
                     * jf[:, None, :, :, :].transpose(0, 1, 3, 2, 4)).reshape(eta, nu * n, nu * n)
        norm = np.max(np.linalg.norm(res.reshape(eta, -1), axis=1))
        if norm <= tol:
            return alpha, jac
        if it == max_iter:
            break
        step = np.linalg.solve(jac, -res.reshape(eta, nu * n, 1))
        alpha = alpha + step.reshape(eta, nu, n)
    raise NoConvergence(f"surrogate stage Newton stalled at |r| = {norm:.3e}", max_iter, norm)


def implicit_loss(samples, dnn, tableau, delta=0.0, alpha0=None, tol=1e-10, max_iter=20):
    """Endpoint mismatch with stages solved exactly; gradient via the adjoint of the stage solve.

    Returns ``(loss, grad ParamVector, alpha, x_d_next_pred)``.
    """
    eta, n = samples.x_d.shape
    nu = tableau.nu
    dt = _deltas(samples, delta)
    alpha, jac = solve_surrogate_stages(samples, dnn, tableau, delta, alpha0, tol, max_iter)
    flat = alpha.reshape(eta * nu, n)
    fs = dnn.rhs_batch(flat, np.repeat(samples.u, nu, axis=0)).reshape(eta, nu, n)
    pred = samples.x_d + dt[:, None] * np.einsum("i,sin->sn", tableau.c, fs)
    diff = samples.x_d_next - pred
    loss = float(np.sum(diff * diff) / eta)
    s = -2.0 * diff / eta
    p = dt[:, None, None] * tableau.c[None, :, None] * s[:, None, :]
    jf = (dnn.a_nn + np.einsum("ij,njk->nik", dnn.b_nn, dnn.rho.input_jacobian(flat))).reshape(eta, nu, n, n)
    ga = np.einsum("sinm,sin->sim", jf, p)
    lam = np.linalg.solve(np.transpose(jac, (0, 2, 1)), ga.reshape(eta, nu * n, 1)).reshape(eta, nu, n)
    seed = p + dt[:, None, None] * np.einsum("ji,sjn->sin", tableau.b, lam)
    grad, _ = dnn.vjp(flat, seed.reshape(eta * nu, n))
    return loss, grad, alpha, pred


def _train_implicit(samples, dnn, residual, tableau, config, weights):
    layout = dnn.params().layout
    theta = dnn.params().values.copy()
    opt = Adam(theta.size, config.lr, config.beta1, config.beta2, config.eps)
    history = TrainHistory()
    alpha = None
    current = dnn
    last_finite = dnn
    for epoch in range(config.epochs):
        current = dnn.with_params(ParamVector(theta, layout))
        loss, grad, alpha, _ = implicit_loss(samples, current, tableau, config.delta, alpha,
                                             config.newton_tol, config.newton_max_iter)
        if not np.isfinite(loss):
            raise NonFiniteLoss("implicit-solve loss is not finite", epoch, last_finite)
        last_finite = current
        history.append(epoch, loss, 0.0, weights)
        theta = opt.step(theta, grad.values, _lr_at(config, epoch))
    current = dnn.with_params(ParamVector(theta, layout))
    alpha, _ = solve_surrogate_stages(samples, current, tableau, config.delta, alpha,
                                      config.newton_tol, config.newton_max_iter)
    stages = _stages_from_alpha(samples, current, alpha, tableau, residual, config)
    if len(history):
        history.l_a[-1] = loss_algebraic(stages, residual, tableau.nu)
        history.total[-1] = total_loss(history.l_d[-1], history.l_a[-1], weights)
    return current, stages, history, weights


def _stages_from_alpha(samples, dnn, alpha, tableau, residual, config):
    eta, nu, n = alpha.shape
    dt = _deltas(samples, config.delta)
    fs = dnn.rhs_batch(alpha.reshape(eta * nu, n), np.repeat(samples.u, nu, axis=0)).reshape(eta, nu, n)
    x_next = samples.x_d + dt[:, None] * np.einsum("i,sin->sn", tableau.c, fs)
    n_a = samples.x_a.shape[1]
    beta = residual.project(alpha.reshape(eta * nu, n), np.repeat(samples.x_a, nu, axis=0)).reshape(eta, nu, n_a)
    return StageVariables(alpha, beta, x_next, residual.project(x_next, samples.x_a_next))


@dataclass
class DynamicResult:
    dnn: object
    stages: StageVariables
    history: TrainHistory
    weights: LossWeights


def train_dynamic(samples, dnn, ell_hat, config, residual=None, weights=None):
    """Identify the DNN with ``ell_hat`` frozen.

    ``residual`` defaults to the black-box surrogate ``x_a - ell_hat(x_d)``;
    pass :class:`TrueResidual` for white-box validation.
    """
    tableau = get_tableau(config.tableau)
    residual = SurrogateResidual(ell_hat) if residual is None else residual
    weights = LossWeights(update_rate=config.weight_rate) if weights is None else weights
    if samples.x_d.shape[1] != dnn.n:
        raise DimensionMismatch("sample dimension does not match the DNN")
    if config.mode == "collocation":
        out = _train_collocation(samples, dnn, residual, tableau, config, weights)
    else:
        out = _train_implicit(samples, dnn, residual, tableau, config, weights)
    return DynamicResult(*out)


def relative_error_series(true_traj, pred_traj, which):
    """Percent relative error per time; NaN where the true norm is below 1e-12."""
    if len(true_traj) != len(pred_traj) or not np.allclose(true_traj.times, pred_traj.times,
                                                          rtol=0, atol=1e-12):
        raise GridMismatch("trajectories are not on the same time grid")
    if which == "dynamic":
        truth, pred = true_traj.states_d, pred_traj.states_d
    elif which == "algebraic":
        truth, pred = true_traj.states_a, pred_traj.states_a
    else:
        raise ValueError("which must be 'dynamic' or 'algebraic'")
    num = np.linalg.norm(truth - pred, axis=1)
    den = np.linalg.norm(truth, axis=1)
    out = np.full(den.shape, np.nan)
    ok = den >= 1e-12
    out[ok] = 100.0 * num[ok] / den[ok]
    return out

"""Feedforward tanh networks, the differential neural network and their gradients.

Everything is batched over a leading sample axis; single-sample helpers wrap
the batched code.
"""

import json
from dataclasses import dataclass

import numpy as np

from ndae_ident.dae_solver import march
from ndae_ident.errors import DimensionMismatch


@dataclass(eq=False)
class ParamVector:
    """Flat parameter array plus the ``(name, shape)`` layout it was built from."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        self.layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in self.layout)
        if self.values.size != layout_size(self.layout):
            raise DimensionMismatch(
                f"{self.values.size} values for a layout of size {layout_size(self.layout)}")

    def __len__(self):
        return self.values.size

    @classmethod
    def flatten(cls, named_arrays):
        named_arrays = list(named_arrays)
        layout = tuple((name, np.shape(arr)) for name, arr in named_arrays)
        if not named_arrays:
            return cls(np.zeros(0), layout)
        values = np.concatenate([np.asarray(arr, dtype=float).ravel() for _, arr in named_arrays])
        return cls(values, layout)

    def unflatten(self):
        out, pos = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape, dtype=int))
            out[name] = self.values[pos:pos + size].reshape(shape).copy()
            pos += size
        return out


def layout_size(layout):
    return int(sum(np.prod(shape, dtype=int) for _, shape in layout))


class Mlp:
    """tanh hidden layers, identity output layer. ``weights[k]`` has shape (out, in)."""

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatch("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise DimensionMismatch(f"layer {k}: bias shape {b.shape} vs weight {w.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionMismatch(f"layer {k} input {w.shape[1]} does not chain")

    @classmethod
    def zeros(cls, layer_sizes):
        sizes = list(layer_sizes)
        return cls([np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(o) for o in sizes[1:]])

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self):
        return self.weights[0].shape[1]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    def layout(self, prefix=""):
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}W{k}", w.shape))
            out.append((f"{prefix}b{k}", b.shape))
        return tuple(out)

    def named_params(self, prefix=""):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}W{k}", w
            yield f"{prefix}b{k}", b

    def params(self):
        return ParamVector.flatten(self.named_params())

    def with_params(self, pv, prefix=""):
        arrays = pv.unflatten() if isinstance(pv, ParamVector) else pv
        n = len(self.weights)
        return Mlp([arrays[f"{prefix}W{k}"] for k in range(n)],
                   [arrays[f"{prefix}b{k}"] for k in range(n)])

    def _check_input(self, x):
        if x.shape[-1] != self.n_in:
            raise DimensionMismatch(f"input dimension {x.shape[-1]}, expected {self.n_in}")

    def forward(self, x):
        """Evaluate on one input ``(n_in,)`` or a batch ``(N, n_in)``."""
        x = np.asarray(x, dtype=float)
        self._check_input(x)
        return self.forward_cached(x)[0]

    def forward_cached(self, x):
        acts = [x]
        z = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = z @ w.T + b
            if k < last:
                z = np.tanh(z)
            acts.append(z)
        return z, acts

    def backward(self, acts, seed):
        """Reverse pass for the scalar ``sum(seed * output)``.

        Returns ``(grads, input_grad)`` where ``grads`` lists ``(dW, db)``
        per layer summed over the batch.
        """
        grads = [None] * len(self.weights)
        g = seed
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            a_in = acts[k]
            if g.ndim == 1:
                grads[k] = (np.outer(g, a_in), g.copy())
            else:
                grads[k] = (g.T @ a_in, g.sum(axis=0))
            g = g @ self.weights[k]
        return grads, g

    def grads_to_params(self, grads, prefix=""):
        named = []
        for k, (dw, db) in enumerate(grads):
            named.append((f"{prefix}W{k}", dw))
            named.append((f"{prefix}b{k}", db))
        return named

    def input_jacobian(self, x):
        """Jacobian d(output)/d(input); shape (n_out, n_in) or (N, n_out, n_in)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        _, acts = self.forward_cached(xb)
        jac = np.broadcast_to(self.weights[0], (xb.shape[0],) + self.weights[0].shape)
        for k in range(1, len(self.weights)):
            jac = (1.0 - acts[k] ** 2)[:, :, None] * jac
            jac = np.einsum("ij,njk->nik", self.weights[k], jac)
        jac = np.array(jac)
        return jac[0] if single else jac

    def lipschitz_bound(self):
        """Product of layer spectral norms (tanh is 1-Lipschitz)."""
        return float(np.prod([np.linalg.norm(w, 2) for w in self.weights]))


def mlp_forward(net, x):
    return net.forward(x)


def mlp_gradient(net, loss_seed, x):
    """Exact gradients of ``loss_seed . net(x)`` w.r.t. parameters and input."""
    x = np.asarray(x, dtype=float)
    seed = np.asarray(loss_seed, dtype=float)
    net._check_input(x)
    if seed.shape[-1] != net.n_out:
        raise DimensionMismatch(f"seed dimension {seed.shape[-1]}, expected {net.n_out}")
    _, acts = net.forward_cached(x)
    grads, input_grad = net.backward(acts, seed)
    return ParamVector.flatten(net.grads_to_params(grads)), input_grad


def identity_gamma(u):
    return u


class DnnModel:
    """``x' = A_nn x + B_nn rho(x) + C_nn gamma(u) + h w0``.

    Only ``A_nn``, ``B_nn`` and the weights of ``rho`` are trainable.
    Exposes the integrator interface with no algebraic variables.
    """

    n_a = 0

    def __init__(self, a_nn, b_nn, c_nn, rho, h, w0, gamma=identity_gamma):
        self.a_nn = np.atleast_2d(np.asarray(a_nn, dtype=float))
        self.b_nn = np.atleast_2d(np.asarray(b_nn, dtype=float))
        self.c_nn = np.atleast_2d(np.asarray(c_nn, dtype=float))
        self.rho = rho
        self.h = np.atleast_1d(np.asarray(h, dtype=float))
        self.w0 = float(w0)
        self.gamma = gamma
        n = self.a_nn.shape[0]
        if (self.a_nn.shape != (n, n) or self.b_nn.shape != (n, rho.n_out)
                or self.c_nn.shape[0] != n or self.h.shape != (n,) or rho.n_in != n):
            raise DimensionMismatch("DNN dimensions do not chain")

    @property
    def n(self):
        return self.a_nn.shape[0]

    n_d = n

    def layout(self):
        return (("A_nn", self.a_nn.shape), ("B_nn", self.b_nn.shape)) + self.rho.layout("rho.")

    def named_params(self):
        yield "A_nn", self.a_nn
        yield "B_nn", self.b_nn
        yield from self.rho.named_params("rho.")

    def params(self):
        return ParamVector.flatten(self.named_params())

    def with_params(self, pv):
        arrays = pv.unflatten() if isinstance(pv, ParamVector) else pv
        return DnnModel(arrays["A_nn"], arrays["B_nn"], self.c_nn, self.rho.with_params(arrays, "rho."),
                        self.h, self.w0, self.gamma)

    def forcing(self, u):
        """Known part ``C_nn gamma(u) + h w0``; ``u`` may be batched."""
        u = np.asarray(u, dtype=float)
        return self.gamma(u) @ self.c_nn.T + self.h * self.w0

    def rhs_batch(self, x, u):
        x = np.asarray(x, dtype=float)
        return x @ self.a_nn.T + self.rho.forward(x) @ self.b_nn.T + self.forcing(u)

    def rhs(self, x, x_a, u):
        return self.rhs_batch(x, u)

    def rhs_jac(self, x, x_a, u):
        return self.a_nn + self.b_nn @ self.rho.input_jacobian(x), np.zeros((self.n, 0))

    def alg(self, x, x_a):
        return np.zeros(0)

    def alg_jac(self, x, x_a):
        return np.zeros((0, self.n)), np.zeros((0, 0))

    def vjp(self, x, seed):
        """Gradients of ``sum(seed * rhs(x, u))`` w.r.t. trainable parameters and ``x``.

        ``x`` and ``seed`` are batched ``(N, n)``; parameter gradients are summed.
        """
        r, acts = self.rho.forward_cached(x)
        rho_grads, x_grad_rho = self.rho.backward(acts, seed @ self.b_nn)
        named = [("A_nn", seed.T @ x), ("B_nn", seed.T @ r)] + self.rho.grads_to_params(rho_grads, "rho.")
        return ParamVector.flatten(named), seed @ self.a_nn + x_grad_rho

    def lipschitz_bound(self):
        return float(np.linalg.norm(self.a_nn, 2) + np.linalg.norm(self.b_nn, 2) * self.rho.lipschitz_bound())


def dnn_rhs(dnn, x_nn, u):
    x_nn = np.asarray(x_nn, dtype=float)
    if x_nn.shape[-1] != dnn.n:
        raise DimensionMismatch(f"state dimension {x_nn.shape[-1]}, expected {dnn.n}")
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != dnn.c_nn.shape[1]:
        raise DimensionMismatch(f"input dimension {u.shape[-1]}, expected {dnn.c_nn.shape[1]}")
    return dnn.rhs_batch(x_nn, u)


def dnn_simulate(dnn, algebraic_map, x0, input_fn, t_end, tableau, config):
    """Integrate the identified model; ``x_a`` is reported as ``algebraic_map(x)``."""
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    traj = march(dnn, np.asarray(x0, dtype=float), np.zeros(0), input_fn, t_end, tableau, config)
    traj.states_a = np.atleast_2d(algebraic_map.forward(traj.states_d)).reshape(len(traj), -1)
    return traj


def init_params(layout, seed):
    """Initialise a parameter layout by naming convention.

    ``W*`` uniform in +-sqrt(6/(fan_in+fan_out)), ``b*`` zero, ``A_nn`` = -0.1 I,
    ``B_nn``/``C_nn`` uniform in +-0.1.
    """
    rng = np.random.default_rng(seed)
    named = []
    for name, shape in layout:
        key = name.rsplit(".", 1)[-1]
        if key == "A_nn":
            arr = -0.1 * np.eye(shape[0])
        elif key in ("B_nn", "C_nn"):
            arr = rng.uniform(-0.1, 0.1, shape)
        elif key.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, shape)
        elif key.startswith("b"):
            arr = np.zeros(shape)
        else:
            raise ValueError(f"no initialisation rule for parameter {name!r}")
        named.append((name, arr))
    return ParamVector.flatten(named)


def init_mlp(layer_sizes, seed):
    template = Mlp.zeros(layer_sizes)
    return template.with_params(init_params(template.layout(), seed))


def init_dnn(model, hidden=32, n_b=None, seed=0):
    """DNN for ``model`` with the known input path ``C_nn = B``, ``h``, ``w0`` copied."""
    n = model.n_d
    n_b = n if n_b is None else n_b
    rho = Mlp.zeros([n, hidden, n_b])
    template = DnnModel(np.zeros((n, n)), np.zeros((n, n_b)), model.b, rho, model.h, model.w0)
    return template.with_params(init_params(template.layout(), seed))


def save_checkpoint(net, path):
    """Write an ``Mlp`` or ``DnnModel`` checkpoint as JSON."""
    pv = net.params()
    doc = {"layout": [[name, list(shape)] for name, shape in pv.layout],
           "params": pv.values.tolist()}
    if isinstance(net, Mlp):
        doc["kind"] = "mlp"
        doc["layer_sizes"] = net.layer_sizes
    else:
        if net.gamma is not identity_gamma:
            raise TypeError("only the identity input transform can be serialized")
        doc.update(kind="dnn", rho_sizes=net.rho.layer_sizes, c_nn=net.c_nn.tolist(),
                   h=net.h.tolist(), w0=net.w0, gamma="identity")
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    pv = ParamVector(np.array(doc["params"], dtype=float), [(n, s) for n, s in doc["layout"]])
    if doc["kind"] == "mlp":
        return Mlp.zeros(doc["layer_sizes"]).with_params(pv)
    rho = Mlp.zeros(doc["rho_sizes"])
    arrays = pv.unflatten()
    return DnnModel(arrays["A_nn"], arrays["B_nn"], doc["c_nn"], rho.with_params(arrays, "rho."),
                    doc["h"], doc["w0"])

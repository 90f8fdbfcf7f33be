import numpy as np
import pytest

from ndae_ident.dae_solver import SampleSet, SolverConfig, Trajectory, get_tableau, irk_step, simulate
from ndae_ident.errors import DimensionMismatch, GridMismatch
from ndae_ident.nn import DnnModel, Mlp, ParamVector, init_mlp
from ndae_ident.numerics import finite_diff_jacobian
from ndae_ident.power_model import consistent_init
from ndae_ident.training import (
    LossWeights,
    StageVariables,
    SurrogateResidual,
    TrainConfig,
    TrueResidual,
    collocation_loss,
    implicit_loss,
    loss_algebraic,
    loss_dynamic,
    relative_error_series,
    solve_surrogate_stages,
    total_loss,
    train_algebraic,
    train_dynamic,
    update_weights,
)


def linear_dnn(a, n_u=1, c=None):
    n = a.shape[0]
    c = np.zeros((n, n_u)) if c is None else c
    return DnnModel(a, np.zeros((n, n)), c, Mlp.zeros([n, 2, n]), np.zeros(n), 0.0)


def one_sample(x, x_next, n_a=1, delta=0.1):
    x = np.atleast_1d(x)
    return SampleSet([x], [np.zeros(n_a)], [np.atleast_1d(x_next)], [np.zeros(n_a)], [[0.0]], [delta])


class FixedResidual:
    def __init__(self, values):
        self.values = np.asarray(values)

    def value(self, x_d, x_a):
        return self.values


def test_loss_dynamic_hand_value():
    samples = one_sample(1.0, 0.95)
    stages = StageVariables(np.array([[[1.0]]]), np.zeros((1, 1, 1)), np.array([[0.95]]), np.zeros((1, 1)))
    loss = loss_dynamic(samples, linear_dnn(-np.eye(1)), stages, get_tableau("midpoint"))
    assert loss == pytest.approx(0.0025, abs=1e-15)


def test_loss_dynamic_zero_at_surrogate_stages():
    dnn = linear_dnn(np.array([[-1.0, 0.3], [0.0, -2.0]]))
    tab = get_tableau("radau2")
    samples = SampleSet([[1.0, -0.5]], [[0.0]], [[0.0, 0.0]], [[0.0]], [[0.0]], [0.1])
    alpha, _ = solve_surrogate_stages(samples, dnn, tab)
    x_next = samples.x_d + 0.1 * np.einsum("i,sin->sn", tab.c, alpha @ dnn.a_nn.T)
    stages = StageVariables(alpha, np.zeros((1, 2, 1)), x_next, np.zeros((1, 1)))
    assert loss_dynamic(samples, dnn, stages, tab) <= 1e-28


def test_loss_dynamic_averages_identical_samples():
    dnn = linear_dnn(-np.eye(1))
    tab = get_tableau("midpoint")
    one = one_sample(1.0, 0.9)
    st = StageVariables(np.array([[[1.02]]]), np.zeros((1, 1, 1)), np.array([[0.9]]), np.zeros((1, 1)))
    many = one.subset([0, 0, 0])
    st3 = StageVariables(np.repeat(st.alpha, 3, 0), np.zeros((3, 1, 1)), np.repeat(st.x_d_next, 3, 0),
                         np.zeros((3, 1)))
    assert loss_dynamic(many, dnn, st3, tab) == pytest.approx(loss_dynamic(one, dnn, st, tab), rel=1e-15)


def test_loss_dynamic_dimension_mismatch():
    stages = StageVariables(np.zeros((1, 2, 1)), np.zeros((1, 2, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(DimensionMismatch):
        loss_dynamic(one_sample(1.0, 1.0), linear_dnn(-np.eye(1)), stages, get_tableau("midpoint"))


def test_loss_algebraic_arithmetic():
    stages = StageVariables(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    assert loss_algebraic(stages, FixedResidual([[0.3], [0.1]]), 1) == pytest.approx(0.2)
    assert loss_algebraic(stages, FixedResidual([[0.6], [0.2]]), 1) == pytest.approx(0.4)
    assert loss_algebraic(stages, FixedResidual([[0.0], [0.0]]), 1) == 0.0
    with pytest.raises(DimensionMismatch):
        loss_algebraic(stages, FixedResidual([[0.0], [0.0]]), 2)


def test_total_loss():
    w = LossWeights(1.0, 2.0)
    assert total_loss(0.0, 0.0, w) == 0.0
    assert total_loss(0.5, 0.25, w) == 1.0
    assert total_loss(0.5, 0.3, w) > total_loss(0.5, 0.25, w)
    with pytest.raises(ValueError):
        LossWeights(0.0, 1.0)


def test_update_weights():
    g = np.array([1.0, -2.0, 3.0])
    w = update_weights(LossWeights(1.0, 5.0, 0.1), g, g)
    assert w.w_a == pytest.approx(0.9 * 5.0 + 0.1, rel=1e-12) and w.w_d == 1.0
    w = update_weights(LossWeights(1.0, 0.3, 1.0), 4 * g, g)
    assert w.w_a == pytest.approx(4.0, abs=1e-9)
    w = update_weights(LossWeights(1.0, 0.7, 0.5), g, np.zeros(3))
    assert w.w_a == 0.7


def small_instance(seed=0):
    """nu = 1, n_d = 2, n_a = 2, off-manifold random stages."""
    rng = np.random.default_rng(seed)
    dnn = DnnModel(rng.normal(size=(2, 2)), rng.normal(size=(2, 3)), rng.normal(size=(2, 1)),
                   init_mlp([2, 4, 3], seed=1), rng.normal(size=2), 0.7)
    ell = init_mlp([2, 5, 2], seed=2)
    samples = SampleSet(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)),
                        rng.normal(size=(3, 2)), rng.normal(size=(3, 1)), [0.1, 0.2, 0.05])
    stages = StageVariables(rng.normal(size=(3, 1, 2)), rng.normal(size=(3, 1, 2)),
                            rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    return dnn, ell, samples, stages


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_gradients_match_finite_differences():
    dnn, ell, samples, stages = small_instance()
    tab = get_tableau("midpoint")
    res = SurrogateResidual(ell)
    w = LossWeights(1.0, 0.6)
    ev = collocation_loss(samples, dnn, stages, tab, res)
    layout = dnn.params().layout
    theta = dnn.params().values

    def total_theta(v):
        d = dnn.with_params(ParamVector(v, layout))
        return np.array([w.w_d * loss_dynamic(samples, d, stages, tab) + w.w_a * loss_algebraic(stages, res, 1)])

    def total_stage(v):
        st = stages.with_flat(v)
        return np.array([w.w_d * loss_dynamic(samples, dnn, st, tab) + w.w_a * loss_algebraic(st, res, 1)])

    grad_theta = w.w_d * ev.grad_d_params.values + w.w_a * ev.grad_a_params.values
    grad_stage = w.w_d * ev.grad_d_stages.flat() + w.w_a * ev.grad_a_stages.flat()
    assert rel_err(grad_theta, finite_diff_jacobian(total_theta, theta, 1e-6)[0]) <= 1e-5
    assert rel_err(grad_stage, finite_diff_jacobian(total_stage, stages.flat(), 1e-6)[0]) <= 1e-5


def test_white_box_gradients_match_finite_differences(synthetic1):
    rng = np.random.default_rng(5)
    dnn = DnnModel(-np.eye(4), 0.1 * rng.normal(size=(4, 3)), synthetic1.b, init_mlp([4, 3, 3], 0),
                   synthetic1.h, synthetic1.w0)
    samples = SampleSet(rng.normal(size=(2, 4)), rng.normal(size=(2, 8)), rng.normal(size=(2, 4)),
                        rng.normal(size=(2, 8)), rng.normal(size=(2, 2)), [0.01, 0.01])
    stages = StageVariables(rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 2, 8)),
                            rng.normal(size=(2, 4)), rng.normal(size=(2, 8)))
    res = TrueResidual(synthetic1)
    ev = collocation_loss(samples, dnn, stages, get_tableau("radau2"), res)
    fd = finite_diff_jacobian(lambda v: np.array([loss_algebraic(stages.with_flat(v), res, 2)]),
                              stages.flat(), 1e-6)[0]
    assert rel_err(ev.grad_a_stages.flat(), fd) <= 1e-5


@pytest.mark.parametrize("name", ["midpoint", "radau2", "gauss2"])
def test_exact_irk_stages_zero_loss(synthetic1, name):
    tab = get_tableau(name)
    config = SolverConfig(delta=1e-2, max_step=1e-2, newton_tol=1e-13)
    rng = np.random.default_rng(1)
    x_d = rng.uniform(-1, 1, 4)
    x_a = consistent_init(synthetic1, x_d, np.zeros(8), tol=1e-14)
    u = rng.normal(size=2)
    step = irk_step(synthetic1, x_d, x_a, u, tab, config)
    samples = SampleSet([x_d], [x_a], [step.x_d], [step.x_a], [u], [1e-2])
    stages = StageVariables(step.alpha[None], step.beta[None], step.x_d[None], step.x_a[None])
    # evaluate the true vector field on the exact (alpha, beta) pairs
    true_dnn = _TrueRhs(synthetic1, step)
    assert loss_dynamic(samples, true_dnn, stages, tab) <= 1e-10
    assert loss_algebraic(stages, TrueResidual(synthetic1), tab.nu) <= 1e-10


class _TrueRhs:
    """The ground-truth vector field evaluated on exact stage pairs."""

    def __init__(self, model, step):
        self.model = model
        self.pairs = {tuple(a): b for a, b in zip(step.alpha, step.beta)}

    def rhs_batch(self, x, u):
        return np.array([self.model.rhs(xi, self.pairs[tuple(xi)], ui) for xi, ui in zip(x, u)])


def test_implicit_gradient_matches_fd():
    dnn, _, samples, _ = small_instance(3)
    dnn = dnn.with_params(ParamVector(0.3 * dnn.params().values, dnn.params().layout))
    tab = get_tableau("radau2")
    loss, grad, _, _ = implicit_loss(samples, dnn, tab)
    layout = dnn.params().layout
    fn = lambda v: np.array([implicit_loss(samples, dnn.with_params(ParamVector(v, layout)), tab)[0]])
    assert rel_err(grad.values, finite_diff_jacobian(fn, dnn.params().values, 1e-6)[0]) <= 1e-5


def test_train_algebraic_linear_map():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 2))
    samples = SampleSet(x, 2 * x, x, 2 * x, np.zeros((50, 1)), np.full(50, 0.1))
    net, hist = train_algebraic(samples, Mlp.zeros([2, 2]), TrainConfig(epochs=3000, lr=1e-2))
    assert np.mean(np.sum((net.forward(x) - 2 * x) ** 2, axis=1)) <= 1e-8
    best = hist.best_so_far()
    assert np.all(np.diff(best) <= 0)


def test_train_algebraic_trivial_cases():
    x = np.array([[1.0, 2.0]])
    zero = SampleSet(x, np.zeros((1, 3)), x, np.zeros((1, 3)), [[0.0]], [0.1])
    _, hist = train_algebraic(zero, Mlp.zeros([2, 4, 3]), TrainConfig(epochs=2))
    assert hist.l_a[0] == 0.0
    one = SampleSet(x, [[1.0, -1.0, 2.0]], x, np.zeros((1, 3)), [[0.0]], [0.1])
    _, hist = train_algebraic(one, Mlp.zeros([2, 4, 3]), TrainConfig(epochs=1))
    assert hist.l_a[0] == pytest.approx(6.0)


def realizable_data(n_traj=4, delta=0.05):
    """Data from a frozen linear DNN with the linear constraint x_a = M x_d."""
    a_true = np.array([[-1.0, 0.5], [-0.5, -1.5]])
    c = np.array([[1.0], [0.5]])
    truth = DnnModel(a_true, np.zeros((2, 2)), c, Mlp.zeros([2, 2, 2]), np.zeros(2), 0.0)
    m = np.array([[1.0, 2.0], [0.0, -1.0], [0.5, 0.5]])
    ell = Mlp([m], [np.zeros(3)])
    tab = get_tableau("radau2")
    config = SolverConfig(delta=delta, max_step=delta, newton_tol=1e-13)
    rng = np.random.default_rng(0)
    rows = []
    for _ in range(n_traj):
        x0 = rng.uniform(-1, 1, 2)
        tr = simulate_dnn(truth, x0, tab, config)
        for k in range(len(tr) - 1):
            rows.append((tr[k], tr[k + 1]))
    xs, xn = np.array([r[0] for r in rows]), np.array([r[1] for r in rows])
    samples = SampleSet(xs, xs @ m.T, xn, xn @ m.T, np.full((len(xs), 1), 0.3), np.full(len(xs), delta))
    return truth, ell, samples


def simulate_dnn(dnn, x0, tab, config):
    from ndae_ident.nn import dnn_simulate

    return dnn_simulate(dnn, Mlp.zeros([2, 1]), x0, lambda t: np.array([0.3]), 1.0, tab, config).states_d


def test_realizable_target_collocation():
    truth, ell, samples = realizable_data()
    start = DnnModel(-0.1 * np.eye(2), np.zeros((2, 2)), truth.c_nn, Mlp.zeros([2, 2, 2]), np.zeros(2), 0.0)
    result = train_dynamic(samples, start, ell, TrainConfig(epochs=4000, lr=1e-2, lr_final=1e-4))
    assert result.history.total[-1] <= 1e-6
    assert result.history.total[-1] <= result.history.total[0] / 100
    np.testing.assert_allclose(result.dnn.a_nn, truth.a_nn, atol=1e-2)


def test_realizable_target_implicit():
    truth, ell, samples = realizable_data(n_traj=2)
    start = DnnModel(-0.1 * np.eye(2), np.zeros((2, 2)), truth.c_nn, Mlp.zeros([2, 2, 2]), np.zeros(2), 0.0)
    cfg = TrainConfig(mode="implicit_solve", epochs=1500, lr=5e-2, lr_final=1e-4)
    result = train_dynamic(samples, start, ell, cfg)
    assert result.history.total[-1] <= 1e-8
    np.testing.assert_allclose(result.dnn.a_nn, truth.a_nn, atol=1e-2)


def test_train_dynamic_zero_epochs_and_determinism():
    _, ell, samples = realizable_data(n_traj=1)
    start = DnnModel(-0.1 * np.eye(2), 0.1 * np.ones((2, 2)), np.ones((2, 1)), init_mlp([2, 3, 2], 0),
                     np.zeros(2), 0.0)
    res = train_dynamic(samples, start, ell, TrainConfig(epochs=0))
    assert len(res.history) == 0
    assert np.array_equal(res.dnn.params().values, start.params().values)
    a = train_dynamic(samples, start, ell, TrainConfig(epochs=30, batch_size=7))
    b = train_dynamic(samples, start, ell, TrainConfig(epochs=30, batch_size=7))
    assert a.history.total == b.history.total


def test_history_csv(tmp_path):
    _, ell, samples = realizable_data(n_traj=1)
    start = DnnModel(-0.1 * np.eye(2), np.zeros((2, 2)), np.ones((2, 1)), Mlp.zeros([2, 2, 2]), np.zeros(2), 0.0)
    res = train_dynamic(samples, start, ell, TrainConfig(epochs=3))
    res.history.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,L_d,L_a,w_d,w_a,total" and len(lines) == 4


def traj(states_a, states_d=None):
    states_a = np.asarray(states_a, dtype=float)
    n = len(states_a)
    states_d = np.ones((n, 1)) if states_d is None else states_d
    return Trajectory(np.arange(n) * 0.1, states_d, states_a, np.zeros((n, 1)))


def test_relative_error_series():
    t = traj([[3.0, 4.0], [1.0, 0.0]])
    np.testing.assert_array_equal(relative_error_series(t, t, "algebraic"), [0.0, 0.0])
    p = traj([[3.0, 4.5], [1.0, 0.0]])
    assert relative_error_series(t, p, "algebraic")[0] == pytest.approx(10.0)
    np.testing.assert_allclose(relative_error_series(t, traj(2 * t.states_a), "algebraic"), 100.0)
    z = traj([[0.0, 0.0]])
    assert np.isnan(relative_error_series(z, z, "algebraic")[0])
    with pytest.raises(GridMismatch):
        relative_error_series(t, traj([[3.0, 4.0]]), "dynamic")

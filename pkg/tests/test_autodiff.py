import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confnas.autodiff import ops
from confnas.autodiff.gradcheck import CHECKED_KINDS, check_function, grad_check, relative_error
from confnas.autodiff.nn import BatchNorm, Conv2d, count_parameters, recalibrate_batchnorm
from confnas.autodiff.optim import LrSchedule, adam, cosine_lr, optimizer_step, sgd
from confnas.autodiff.tensor import NonFiniteError, Parameter, ShapeError, Tape, Tensor, backward, no_grad


@pytest.mark.parametrize("kind", CHECKED_KINDS)
def test_primitive_gradients(kind):
    report = grad_check(kind, trials=5, seed=11)
    assert report.passed, report


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        grad_check("no_such_op")


def test_relative_error_zero_scale():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_tape_records_only_with_grad():
    x = Tensor(np.ones(3))
    p = Parameter(np.ones(3))
    with Tape() as tape:
        ops.relu(x)
        ops.relu(p)
    assert tape.kinds() == ["relu"]
    with Tape() as tape, no_grad():
        ops.relu(p)
    assert len(tape) == 0


def test_backward_zero_for_unreached_params():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    with Tape() as tape:
        loss = ops.sum(ops.mul(a, a))
    grads = backward(tape, loss, params=[a, b])
    np.testing.assert_allclose(grads[a], 2 * np.ones(2))
    np.testing.assert_array_equal(grads[b], np.zeros(2))


def test_backward_rejects_nonscalar_and_nonfinite():
    a = Parameter(np.ones(2))
    with Tape() as tape:
        out = ops.mul(a, a)
    with pytest.raises(ShapeError):
        backward(tape, out)
    with Tape() as tape, np.errstate(divide="ignore"):
        bad = ops.sum(ops.log(ops.scalar_mul(a, 0.0)))
    with pytest.raises(NonFiniteError):
        backward(tape, bad)


def test_gradient_accumulates_over_reuse():
    a = Parameter(np.array([3.0]), dtype=np.float64)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(a, a), a))
    assert backward(tape, loss)[a][0] == pytest.approx(7.0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=9))
def test_softmax_is_a_distribution(vals):
    w = ops.softmax(Tensor(np.array([vals]), dtype=np.float64), axis=1).data
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


def test_softmax_mask_zeroes_masked_entries():
    mask = np.array([[True, False, True]])
    w = ops.softmax(Tensor(np.zeros((1, 3))), axis=1, mask=mask).data
    np.testing.assert_allclose(w, [[0.5, 0.0, 0.5]])


def test_straight_through_is_one_hot_with_identity_gradient():
    soft = Parameter(np.array([[0.2, 0.5, 0.3]]), dtype=np.float64)
    proj = np.array([[1.0, 2.0, 3.0]])
    with Tape() as tape:
        hard = ops.straight_through(soft, [1])
        loss = ops.sum(ops.mul(hard, Tensor(proj, dtype=np.float64)))
    np.testing.assert_array_equal(hard.data, [[0, 1, 0]])
    np.testing.assert_array_equal(backward(tape, loss)[soft], proj)


def test_gamma_sample_implicit_gradient_matches_mean():
    # E[z] = a for z ~ Gamma(a, 1), so the average reparameterised gradient is 1
    rng = np.random.default_rng(0)
    a = Parameter(np.full(20000, 1.7), dtype=np.float64)
    with Tape() as tape:
        z = ops.gamma_sample(a, rng)
        loss = ops.sum(z)
    g = backward(tape, loss)[a]
    assert abs(z.data.mean() - 1.7) < 0.05
    assert abs(g.mean() - 1.0) < 0.03


def test_sgd_momentum_and_weight_decay():
    p = Parameter(np.array([1.0]), dtype=np.float64)
    state = sgd(0.1, momentum=0.9, weight_decay=0.5)
    optimizer_step(state, [p], {p: np.array([2.0])})
    # g = 2 + 0.5 * 1 = 2.5; p = 1 - 0.1 * 2.5
    assert p.data[0] == pytest.approx(0.75)
    optimizer_step(state, [p], {p: np.array([2.0])})
    # g = 2 + 0.5 * 0.75 = 2.375; v = 0.9 * 2.5 + 2.375
    assert p.data[0] == pytest.approx(0.75 - 0.1 * (0.9 * 2.5 + 2.375))


def test_adam_first_step_is_signed_lr():
    p = Parameter(np.array([1.0, -1.0]), dtype=np.float64)
    state = adam(0.01, weight_decay=0.0)
    optimizer_step(state, [p], {p: np.array([4.0, -0.5])})
    np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-6)


def test_optimizer_skip_leaves_param_untouched():
    a, b = Parameter(np.ones(1)), Parameter(np.ones(1))
    state = sgd(0.1)
    optimizer_step(state, [a, b], {a: np.ones(1)}, skip=frozenset({1}))
    assert b.data[0] == 1.0 and a.data[0] < 1.0 and 1 not in state.buffers
    with pytest.raises(KeyError):
        optimizer_step(state, [a, b], {a: np.ones(1)})


def test_cosine_lr_endpoints():
    s = LrSchedule(0.025, 0.001, 10)
    assert cosine_lr(0, s) == pytest.approx(0.025)
    assert cosine_lr(10, s) == pytest.approx(0.001)
    assert cosine_lr(5, s) == pytest.approx(0.013)
    with pytest.raises(ValueError):
        cosine_lr(11, s)


def test_recalibrate_batchnorm_gives_population_stats():
    class Net(Conv2d):
        def __init__(self):
            super().__init__(1, 1, 1, np.random.default_rng(0))
            self.weight.data[...] = 1.0
            self.bn = BatchNorm(1)

        def forward(self, x):
            return self.bn(super().forward(x))

    net = Net()
    rng = np.random.default_rng(1)
    batches = [rng.normal(3.0, 2.0, (16, 1, 4, 4)).astype(np.float32) for _ in range(8)]
    assert recalibrate_batchnorm(net, batches) == 8
    allx = np.concatenate(batches)
    assert net.bn.buf_mean[0] == pytest.approx(allx.mean(), rel=1e-4)
    assert net.bn.buf_var[0] == pytest.approx(allx.var(), rel=0.02)
    assert net.bn.momentum == 0.1 and net.training


def test_count_parameters():
    assert count_parameters(Conv2d(3, 4, 3, np.random.default_rng(0))) == 4 * 3 * 9


def test_check_function_detects_wrong_gradient():
    from confnas.autodiff.tensor import make_output

    def bad_square(x):
        return make_output("bad", x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2
    err = check_function(bad_square, [np.array([1.0, 2.0])], np.random.default_rng(0))
    assert err > 0.1

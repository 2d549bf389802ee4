import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import param
from patchfusion import tensor as T
from patchfusion.gradcheck import check_gradients, max_relative_error, numerical_gradient
from patchfusion.tensor import RunningStats, Tape, Tensor


def projected(out_fn, shape, seed=0):
    """Scalar loss sum(out * R) with a fixed random R, so gradients are generic."""
    r = Tensor(np.random.default_rng(seed).standard_normal(shape))
    return lambda: T.sum_all(T.mul(out_fn(), r))


# ---------------------------------------------------------------- conv2d

def test_conv2d_all_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv2d_stem_geometry():
    x = Tensor(np.zeros((1, 3, 512, 512)))
    w = Tensor(np.zeros((64, 3, 7, 7)))
    assert T.conv2d(x, w, stride=2, padding=3).shape == (1, 64, 256, 256)


def test_conv2d_gradient_matches_finite_differences(rng):
    x = param(rng.standard_normal((2, 2, 5, 5)))
    w = param(rng.standard_normal((3, 2, 3, 3)))
    b = param(rng.standard_normal(3))
    loss = projected(lambda: T.conv2d(x, w, b, stride=2, padding=1), (2, 3, 3, 3))
    assert check_gradients(loss, [x, w, b]) < 1e-6


def test_conv2d_matches_direct_loops(rng):
    x = rng.standard_normal((2, 3, 6, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_identity_kernel_reproduces_input(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv2d_errors():
    with pytest.raises(T.ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(T.ShapeError, match="empty output"):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# ---------------------------------------------------------------- batchnorm

def test_batchnorm_constant_input_gives_zero():
    x = Tensor(np.full((2, 3, 4, 4), 7.0))
    out = T.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats(3), "train")
    np.testing.assert_array_equal(out.data, 0.0)


def test_batchnorm_eval_affine_shift(rng):
    x = rng.standard_normal((4, 3, 6, 6)) * 3 + 2
    state = RunningStats(3)
    state.mean, state.var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.full(3, 5.0)), state, "eval")
    assert abs(out.data.mean() - 5.0) < 1e-9


def test_batchnorm_train_statistics(rng):
    x = rng.standard_normal((4, 3, 6, 6)) * 2.5 - 1.0
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats(3), "train").data
    # independent recomputation of the per-channel moments
    for c in range(3):
        vals = out[:, c].ravel()
        assert abs(vals.mean()) < 1e-7
        assert abs(vals.var() - 1.0) < 1e-4


def test_batchnorm_updates_running_stats(rng):
    x = rng.standard_normal((4, 2, 3, 3)) + 3.0
    state = RunningStats(2)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "train", momentum=0.1)
    np.testing.assert_allclose(state.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    m = x.shape[0] * 9
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(rng, mode):
    x = param(rng.standard_normal((3, 2, 4, 4)))
    g = param(rng.uniform(0.5, 1.5, 2))
    b = param(rng.standard_normal(2))
    state = RunningStats(2)
    state.mean, state.var = rng.standard_normal(2), rng.uniform(0.5, 2, 2)

    def out():
        s = RunningStats(2)
        s.mean, s.var = state.mean.copy(), state.var.copy()
        return T.batchnorm2d(x, g, b, s, mode)

    assert check_gradients(projected(out, x.shape), [x, g, b]) < 1e-6


def test_batchnorm_empty_batch():
    with pytest.raises(T.ShapeError):
        T.batchnorm2d(Tensor(np.zeros((0, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      RunningStats(2), "train")


# ---------------------------------------------------------------- pooling, relu, linear

def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_maxpool_simple():
    out = T.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_maxpool_tie_routes_to_first_index():
    x = param(np.ones((1, 1, 2, 2)))
    with Tape() as tape:
        tape.backward(T.sum_all(T.maxpool2d(x, 2, 2)))
    np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])


def test_pool_and_relu_gradients(rng):
    # values spaced away from ties and zero, so finite differences stay on one linear piece
    x = param(rng.permutation(np.arange(1, 2 * 2 * 6 * 6 + 1)).reshape(2, 2, 6, 6) * 0.1 - 7.35)
    for fn in (lambda: T.maxpool2d(x, 3, 2, padding=1), lambda: T.avgpool2d(x, 2, 2),
               lambda: T.relu(x), lambda: T.global_avgpool(x)):
        shape = fn().shape
        assert check_gradients(projected(fn, shape), [x]) < 1e-6


def test_linear_gradient(rng):
    x, w, b = param(rng.standard_normal((3, 4))), param(rng.standard_normal((4, 2))), param(rng.standard_normal(2))
    assert check_gradients(projected(lambda: T.linear(x, w, b), (3, 2)), [x, w, b]) < 1e-6


def test_linear_dimension_mismatch():
    with pytest.raises(T.ShapeError):
        T.linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


# ---------------------------------------------------------------- softmax / cross-entropy

def test_softmax_uniform():
    np.testing.assert_array_equal(T.softmax(Tensor(np.zeros((1, 4)))).data, [[0.25] * 4])


def test_softmax_no_overflow():
    p = T.softmax(Tensor([[1000.0, 0.0]])).data
    assert abs(p[0, 0] - 1.0) < 1e-12 and abs(p[0, 1]) < 1e-12


def test_softmax_random_rows(rng):
    z = rng.standard_normal((5, 4)) * 3
    p = T.softmax(Tensor(z)).data
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    np.testing.assert_array_equal(p.argmax(axis=1), z.argmax(axis=1))


def test_softmax_rejects_non_finite():
    with pytest.raises(T.NumericalError):
        T.softmax(Tensor([[np.nan, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    p = T.softmax(Tensor(z)).data
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    assert np.abs(T.softmax(Tensor(z + c)).data - p).max() < 1e-12


def test_cross_entropy_values():
    assert float(T.cross_entropy(Tensor([[0.0, 800.0]]), [1]).data) == 0.0
    assert abs(float(T.cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).data) - np.log(4)) < 1e-12


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    z = param(rng.standard_normal((3, 4)))
    y = [2, 0, 3]
    with Tape() as tape:
        tape.backward(T.cross_entropy(z, y))
    e = np.exp(z.data - z.data.max(axis=1, keepdims=True))
    expected = e / e.sum(axis=1, keepdims=True)
    expected[np.arange(3), y] -= 1
    assert np.abs(z.grad - expected / 3).max() < 1e-10


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_softmax_and_cross_entropy_fd(rng):
    z = param(rng.standard_normal((4, 3)))
    assert check_gradients(projected(lambda: T.softmax(z), (4, 3)), [z]) < 1e-6
    assert check_gradients(lambda: T.cross_entropy(z, [0, 1, 2, 1]), [z]) < 1e-6


# ---------------------------------------------------------------- dropout

def test_dropout_eval_identity(rng):
    x = Tensor(rng.standard_normal((5, 5)))
    out = T.dropout(x, 0.5, rng, "eval")
    assert out.data.tobytes() == x.data.tobytes()


def test_dropout_rate():
    out = T.dropout(Tensor(np.ones(10 ** 6)), 0.5, np.random.default_rng(7), "train").data
    assert abs((out == 0).mean() - 0.5) < 0.002
    assert set(np.unique(out)) == {0.0, 2.0}


def test_dropout_unbiased(rng):
    x = rng.standard_normal(8)
    reps = np.stack([T.dropout(Tensor(x), 0.5, rng, "train").data for _ in range(10 ** 4)])
    # each coordinate is x * Bernoulli(0.5) * 2; its standard error over 1e4 draws is |x| / 100
    se = np.abs(x) / 100
    assert np.all(np.abs(reps.mean(axis=0) - x) < 5 * se)


def test_dropout_reproducible():
    a = T.dropout(Tensor(np.ones(100)), 0.3, np.random.default_rng(3)).data
    b = T.dropout(Tensor(np.ones(100)), 0.3, np.random.default_rng(3)).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_bad_p(p):
    with pytest.raises(ValueError):
        T.dropout(Tensor(np.ones(3)), p, np.random.default_rng(0))


# ---------------------------------------------------------------- tape semantics

def test_backward_sum_gives_ones(rng):
    x = param(rng.standard_normal((2, 3)))
    with Tape() as tape:
        tape.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square(rng):
    x = param(rng.standard_normal(5))
    with Tape() as tape:
        tape.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_fan_out_accumulates(rng):
    x = param(rng.standard_normal(4))
    with Tape() as tape:
        y = T.relu(x)
        tape.backward(T.sum_all(T.add(T.mul(y, x), y)))
    np.testing.assert_allclose(x.grad, np.where(x.data > 0, 2 * x.data + 1, 0.0))


def test_backward_errors(rng):
    x = param(rng.standard_normal(3))
    with Tape() as tape:
        with pytest.raises(T.ShapeError):
            tape.backward(T.mul(x, x))
        loss = T.sum_all(x)
        tape.backward(loss)
        with pytest.raises(T.TapeError):
            tape.backward(loss)
    with pytest.raises(T.TapeError):
        T.backward(T.sum_all(x))  # computed without a tape


def test_reverse_order_visits_each_op_once(rng):
    x = param(rng.standard_normal(3))
    calls = []
    with Tape() as tape:
        a = T.mul(x, x)
        b = T.add(a, x)
        loss = T.sum_all(b)
        for i, (out, inputs, fn) in enumerate(tape.ops):
            tape.ops[i] = (out, inputs, (lambda f, k: lambda g: (calls.append(k), f(g))[1])(fn, i))
        tape.backward(loss)
    assert calls == [2, 1, 0]


def test_tape_replay_deterministic(rng):
    x0 = rng.standard_normal((2, 2, 5, 5))
    w0 = rng.standard_normal((3, 2, 3, 3))

    def run():
        x, w = param(x0), param(w0)
        with Tape() as tape:
            loss = T.sum_all(T.relu(T.conv2d(x, w, padding=1)))
            tape.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_no_broadcasting(rng):
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_gradcheck_oracle_on_known_function():
    x = np.array([1.0, -2.0, 0.5])
    num = numerical_gradient(lambda: T.sum_all(T.mul(Tensor(x), Tensor(x))), x)
    assert max_relative_error(2 * x, num) < 1e-9

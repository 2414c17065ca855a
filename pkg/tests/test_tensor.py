import numpy as np
import pytest

from cotda import tensor as T
from cotda.errors import ContractError


def _rand(rng, shape):
    return T.Tensor(rng.normal(size=shape).astype(np.float32), requires_grad=True)


def test_forward_values_match_numpy():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 5)).astype(np.float32)
    b = rng.normal(size=(5, 3)).astype(np.float32)
    out = T.matmul(T.Tensor(a), T.Tensor(b))
    np.testing.assert_allclose(out.data, a.astype(np.float64) @ b.astype(np.float64), rtol=1e-6)
    assert out.data.dtype == np.float32

    x = rng.normal(size=(6,)).astype(np.float32)
    np.testing.assert_allclose(T.relu(T.Tensor(x)).data, np.maximum(x, 0))
    np.testing.assert_allclose(T.exp(T.Tensor(x)).data, np.exp(x), rtol=1e-6)
    assert abs(T.tensor_mean(T.Tensor(x)).item() - float(x.mean())) < 1e-6


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(4)
    x = T.Tensor(rng.normal(size=(5, 7)) * 10)
    y = T.softmax(x).data
    np.testing.assert_allclose(y.sum(axis=1), np.ones(5), atol=1e-6)
    assert (y >= 0).all()


def test_log_is_guarded_at_zero():
    y = T.log(T.Tensor([0.0]))
    assert np.isfinite(y.data).all()
    assert abs(float(y.data[0]) - np.log(1e-8)) < 1e-4


def test_l2_norm_zero_vector_finite_gradient():
    x = T.Tensor(np.zeros(4), requires_grad=True)
    tape = T.Tape()
    with tape:
        n = T.l2_norm(x)
    T.backward(n, tape)
    assert np.isfinite(x.grad).all()


def test_backward_rejects_nonscalar():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    tape = T.Tape()
    with tape:
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        T.backward(y, tape)


def test_gradient_accumulates_when_value_reused():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        y = T.tensor_sum(T.add(T.mul(x, x), x))
    T.backward(y, tape)
    np.testing.assert_allclose(x.grad, [3.0, 5.0], atol=1e-6)


def test_unreachable_leaf_keeps_zero_gradient():
    x = T.Tensor([1.0], requires_grad=True)
    z = T.Tensor([2.0], requires_grad=True)
    z.zero_grad()
    tape = T.Tape()
    with tape:
        y = T.tensor_sum(T.mul(x, x))
    T.backward(y, tape)
    np.testing.assert_array_equal(z.grad, [0.0])


def test_no_recording_outside_tape():
    x = T.Tensor([1.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        with T.recording_paused():
            T.mul(x, x)
    assert len(tape) == 0


def test_max_over_axis_tie_goes_to_lowest_index():
    x = T.Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
    tape = T.Tape()
    with tape:
        y = T.tensor_sum(T.max_over_axis(x, 1))
    T.backward(y, tape)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_cosine_similarity_matches_direct_formula():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(9,))
    b = rng.normal(size=(9,))
    got = T.cosine_similarity(T.Tensor(a), T.Tensor(b)).item()
    want = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert abs(got - want) < 1e-5


def test_cosine_similarity_gradient_example():
    rng = np.random.default_rng(12)
    b = T.Tensor(rng.normal(size=(8,)))
    a = _rand(rng, (8,))
    err = T.check_gradients(lambda t: T.cosine_similarity(t, b), a, h=1e-3)
    assert err <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_check_gradients_over_op_inventory(seed):
    rng = np.random.default_rng(100 + seed)
    w = T.Tensor(rng.normal(size=(6, 4)).astype(np.float32))
    m = T.Tensor(rng.normal(size=(5, 4)).astype(np.float32))
    mask = (rng.random((5, 6)) < 0.7).astype(np.float32)

    cases = [
        (lambda t: T.tensor_sum(T.mul(t, t)), (5, 6), 1e-3),
        (lambda t: T.tensor_mean(T.relu(T.matmul(t, w))), (5, 6), 3e-3),
        (lambda t: T.tensor_sum(T.mul(T.softmax(t), m)), (5, 4), 3e-3),
        (lambda t: T.tensor_sum(T.mul(T.feature_norm(t), m)), (5, 4), 3e-3),
        (lambda t: T.tensor_sum(T.exp(T.mul(t, 0.3))), (4, 3), 3e-3),
        (lambda t: T.tensor_sum(T.log(T.add(T.mul(t, t), 0.5))), (4, 3), 3e-3),
        (lambda t: T.l2_norm(t), (7,), 3e-3),
        (lambda t: T.tensor_sum(T.l2_norm(t, axis=1)), (4, 3), 3e-3),
        (lambda t: T.tensor_sum(T.dropout_mask_apply(t, mask, 0.7)), (5, 6), 1e-3),
        (lambda t: T.tensor_sum(T.concat([t, T.mul(t, 2.0)], axis=0)), (3, 2), 1e-3),
        (lambda t: T.tensor_sum(T.max_over_axis(t, 1)), (5, 6), 1e-3),
        (lambda t: T.tensor_mean(T.sum_axis(T.mul(t, t), 0, keepdims=True)), (4, 3), 3e-3),
    ]
    for fn, shape, h in cases:
        x = _rand(rng, shape)
        assert T.check_gradients(fn, x, h=h) <= 1e-4


def test_check_gradients_unfold_conv_path():
    rng = np.random.default_rng(7)
    w = T.Tensor(rng.normal(size=(8 * 9, 4)).astype(np.float32) * 0.2)
    x = _rand(rng, (8, 6, 6))

    def fwd(t):
        cols = T.unfold_patches(t, 3, stride=2, pad=1)
        return T.tensor_mean(T.relu(T.matmul(cols, w)))

    assert T.check_gradients(fwd, x, h=3e-3) <= 1e-4


def test_forward_op_dispatch_and_unknown_kind():
    x = T.Tensor([1.0, -2.0])
    out = T.forward_op("relu", [x])
    np.testing.assert_array_equal(out.data, [1.0, 0.0])
    out = T.forward_op("concat", [x, x], axis=0)
    assert out.data.shape == (4,)
    with pytest.raises(ContractError):
        T.forward_op("convolve_7d", [x])


def test_matmul_shape_errors():
    a = T.Tensor(np.ones((2, 3)))
    b = T.Tensor(np.ones((4, 2)))
    with pytest.raises(ContractError):
        T.matmul(a, b)
    with pytest.raises(ContractError):
        T.matmul(T.Tensor(np.ones(3)), a)


def test_same_tape_same_bits():
    rng = np.random.default_rng(21)
    xv = rng.normal(size=(6, 5)).astype(np.float32)
    wv = rng.normal(size=(5, 4)).astype(np.float32)

    def run():
        x = T.Tensor(xv.copy(), requires_grad=True)
        w = T.Tensor(wv.copy(), requires_grad=True)
        tape = T.Tape()
        with tape:
            loss = T.tensor_mean(T.softmax(T.relu(T.matmul(x, w))))
        T.backward(loss, tape)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicenet import tensor as T
from slicenet.errors import ConfigurationError, ContractError, DimensionError
from slicenet.tensor import Rng, Tape, Tensor, finite_difference_check


def grad_of(f, x):
    t = Tensor(np.array(x, dtype=float), requires_grad=True)
    with Tape() as tape:
        tape.backward(f(t))
    return t.grad


class TestTensorType:
    def test_rank_limit(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1)))

    def test_zero_extent_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 0)))

    def test_data_matches_shape(self):
        t = Tensor(np.arange(24.0).reshape(2, 3, 4))
        assert t.shape == (2, 3, 4)
        assert t.data.size == 2 * 3 * 4


class TestMatmul:
    def test_identity(self, nprng):
        m = nprng.normal(size=(3, 5))
        out = T.matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_example(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_grad_of_sum_is_ones_times_b_transpose(self, nprng):
        a = nprng.normal(size=(3, 4))
        b = nprng.normal(size=(4, 2))
        g = grad_of(lambda t: T.tsum(T.matmul(t, Tensor(b))), a)
        np.testing.assert_allclose(g, np.ones((3, 2)) @ b.T, atol=1e-12)
        err = finite_difference_check(lambda t: T.tsum(T.matmul(t, Tensor(b))), a)
        assert err < 1e-9

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_batched_and_shared_rhs(self, nprng):
        a = nprng.normal(size=(2, 3, 4))
        b3 = nprng.normal(size=(2, 4, 5))
        b2 = nprng.normal(size=(4, 5))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b3)).data, np.einsum("bij,bjk->bik", a, b3))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b2)).data, a @ b2)
        bt = Tensor(b2, requires_grad=True)
        assert finite_difference_check(lambda t: T.tsum(T.mul(T.matmul(Tensor(a), t), T.matmul(Tensor(a), t))), bt) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12

    def test_values(self):
        # exp(i) / sum_j exp(j) evaluated directly
        e = np.exp([1.0, 2.0, 3.0])
        expected = e / e.sum()
        out = T.softmax(Tensor([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(out, expected, atol=1e-15)
        np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_rows_sum_to_one(self, nprng):
        out = T.softmax(Tensor(nprng.normal(size=(4, 6, 9)) * 10)).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)

    def test_mask_zeroes_excluded(self):
        out = T.softmax(Tensor([[1.0, 2.0, 3.0]]), np.array([[True, False, True]])).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out.sum(), 1.0, atol=1e-15)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_negative(self, nprng):
        x = -np.abs(nprng.normal(size=(2, 3, 4))) - 0.1
        assert not T.relu(Tensor(x)).data.any()

    def test_subgradient_at_zero_is_zero(self):
        np.testing.assert_array_equal(grad_of(lambda t: T.tsum(T.relu(t)), [0.0, 1.0]), [0.0, 1.0])

    def test_gradient_away_from_kink(self, nprng):
        x = nprng.normal(size=(2, 5, 4))
        x[np.abs(x) < 0.05] = 0.5
        assert finite_difference_check(lambda t: T.tsum(T.mul(T.relu(t), T.relu(t))), x) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self, nprng):
        x = nprng.normal(size=(2, 3))
        np.testing.assert_array_equal(grad_of(T.tsum, x), np.ones((2, 3)))

    def test_square(self, nprng):
        x = nprng.normal(size=(2, 3, 4))
        np.testing.assert_allclose(grad_of(lambda t: T.tsum(T.mul(t, t)), x), 2 * x, atol=1e-15)
        assert finite_difference_check(lambda t: T.tsum(T.mul(t, t)), x) < 1e-8

    def test_repeated_backward_is_an_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(x)
            tape.backward(loss)
            with pytest.raises(ContractError):
                tape.backward(loss)

    def test_non_scalar_loss_is_an_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.scale(x, 2.0)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_tape_is_topologically_ordered(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = T.relu(T.matmul(x, x))
            T.tsum(T.add(y, x))
        for node in tape.nodes:
            assert all(i is None or i < node.id for i in node.input_ids)

    def test_node_grads_match_value_shapes(self, nprng):
        x = Tensor(nprng.normal(size=(2, 3, 4)), requires_grad=True)
        with Tape(keep_grads=True) as tape:
            loss = T.tsum(T.softmax(T.relu(x)))
            tape.backward(loss)
        for node in tape.nodes:
            assert node.grad is not None and np.shape(node.grad) == node.value.shape

    def test_no_tape_no_recording(self):
        x = Tensor([1.0], requires_grad=True)
        y = T.scale(x, 3.0)
        assert y.node_id is None and not y.requires_grad


def _random_graph(seed):
    rng = Rng(seed)
    x = Tensor(rng.normal((2, 5, 4)), requires_grad=True)
    w = Tensor(rng.normal((4, 4)), requires_grad=True)
    with Tape() as tape:
        h = T.matmul(x, w)
        h = T.dropout(T.relu(h), 0.3, rng)
        loss = T.tsum(T.mul(T.softmax(h), h))
        tape.backward(loss)
    return loss.data.copy(), x.grad.copy(), w.grad.copy()


def test_tape_determinism():
    a, b = _random_graph(7), _random_graph(7)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


class TestFiniteDifferenceCheck:
    def test_linear(self, nprng):
        w = nprng.normal(size=(3, 4))
        assert finite_difference_check(lambda t: T.tsum(T.mul(t, Tensor(w))), nprng.normal(size=(3, 4))) < 1e-10

    def test_softmax_scalar(self, nprng):
        w = nprng.normal(size=(2, 5, 4))
        f = lambda t: T.tsum(T.mul(T.softmax(t), Tensor(w)))
        assert finite_difference_check(f, nprng.normal(size=(2, 5, 4))) < 1e-4

    def test_detects_wrong_gradient(self, nprng):
        x = nprng.normal(size=(3, 3))
        f = lambda t: T.tsum(T.mul(t, t))
        assert finite_difference_check(f, x, analytic=3.0 * x) > 1e-2


# every differentiable op on [2, 5, 4] inputs, 10 seeds
def _ops():
    def aux(shape, rng):
        return Tensor(rng.normal(shape))

    return {
        "add": lambda t, r: T.add(t, aux((2, 5, 4), r)),
        "sub_broadcast": lambda t, r: T.sub(t, aux((5, 4), r)),
        "mul": lambda t, r: T.mul(t, aux((2, 5, 4), r)),
        "scale": lambda t, r: T.scale(t, -1.7),
        "relu": lambda t, r: T.relu(t),
        "matmul": lambda t, r: T.matmul(t, aux((4, 3), r)),
        "bmm": lambda t, r: T.matmul(t, T.transpose(t)),
        "transpose": lambda t, r: T.transpose(t),
        "softmax": lambda t, r: T.softmax(t),
        "log_softmax": lambda t, r: T.log_softmax(t),
        "concat": lambda t, r: T.concat([t, T.scale(t, 2.0), aux((2, 5, 3), r)]),
        "split": lambda t, r: T.split(t, 2)[1],
        "pad": lambda t, r: T.pad_length(t, 2, 1),
        "dropout": lambda t, r: T.dropout(t, 0.4, Rng(3)),
        "layer_norm": lambda t, r: T.layer_norm(t, Tensor(1.3), Tensor(0.2)),
        "depthwise": lambda t, r: T.depthwise_conv1d(t, aux((2, 4), r), 2),
        "conv": lambda t, r: T.conv1d(t, aux((3, 4, 2), r), 1),
        "reshape": lambda t, r: T.reshape(t, (10, 4)),
        "mean": lambda t, r: T.mean(t),
    }


@pytest.mark.parametrize("name", sorted(_ops()))
@pytest.mark.parametrize("seed", range(10))
def test_op_gradients(name, seed):
    op = _ops()[name]
    rng = Rng(seed)
    x = rng.normal((2, 5, 4))
    x[np.abs(x) < 0.05] = 0.3
    aux_rng_seed = seed + 200

    def f(t):
        out = op(t, Rng(aux_rng_seed))
        w = Tensor(Rng(seed + 100).normal(out.shape))
        return T.tsum(T.mul(out, w))

    assert finite_difference_check(f, x) < 1e-4


def test_embedding_and_masked_nll_gradients(nprng):
    ids = nprng.integers(0, 6, size=(2, 5))
    w = Tensor(nprng.normal(size=(6, 4)), requires_grad=True)
    proj = Tensor(nprng.normal(size=(4, 7)))
    tgt = nprng.integers(0, 7, size=(2, 5))
    mask = nprng.random((2, 5)) > 0.3
    f = lambda t: T.masked_nll(T.matmul(T.embedding(t, ids), proj), tgt, mask)
    assert finite_difference_check(f, w) < 1e-6


def test_masked_nll_all_masked():
    with pytest.raises(ContractError):
        T.masked_nll(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6).flatmap(lambda g: st.tuples(st.just(g), st.integers(1, 4))), st.integers(0, 10**6))
def test_concat_split_roundtrip(gw, seed):
    g, w = gw
    x = Tensor(Rng(seed).normal((2, 3, g * w)))
    assert np.array_equal(T.concat(T.split(x, g)).data, x.data)


def test_split_requires_divisor():
    with pytest.raises(ConfigurationError):
        T.split(Tensor(np.ones((1, 2, 5))), 2)


class TestDropout:
    def test_p_zero_is_identity(self, rng):
        x = Tensor(rng.normal((2, 3, 4)))
        assert T.dropout(x, 0.0, rng) is x

    def test_inverted_scaling(self, rng):
        x = Tensor(np.ones((4, 50, 10)))
        out = T.dropout(x, 0.25, rng).data
        survivors = out[out != 0]
        np.testing.assert_allclose(survivors, 1 / 0.75)
        assert 0.7 < survivors.size / out.size < 0.8


def test_rng_reproducible():
    assert np.array_equal(Rng(5).random(10), Rng(5).random(10))
    assert not np.array_equal(Rng(5).random(10), Rng(6).random(10))
    assert np.array_equal(Rng(5).spawn(1).random(3), Rng(5).spawn(1).random(3))

"""Core autodiff engine: ops, broadcasting, tape semantics."""

import numpy as np
import pytest

from embolite import tensor as T
from embolite.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestBasics:
    def test_tensor_from_list(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.dtype == np.float64

    def test_int_data_promoted_to_float(self):
        t = Tensor(np.arange(6).reshape(2, 3))
        assert t.dtype == np.float64

    def test_float32_preserved(self):
        t = Tensor(np.zeros((2, 2), dtype=np.float32))
        assert t.dtype == np.float32

    def test_item_requires_scalar(self):
        with pytest.raises(ValueError):
            Tensor([1.0, 2.0]).item()

    def test_backward_requires_scalar(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            t.backward()

    def test_detach_drops_graph(self):
        a = Tensor([2.0], requires_grad=True)
        b = (a * 3.0).detach()
        assert not b.requires_grad
        assert b._parents == ()


class TestArithmetic:
    def test_add_mul_grads(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        loss = T.reduce_sum(a * b + a)
        loss.backward()
        assert np.allclose(a.grad, b.data + 1.0)
        assert np.allclose(b.grad, a.data)

    def test_broadcast_add_unbroadcasts_grad(self, rng):
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        T.reduce_sum(a + b).backward()
        assert a.grad.shape == (4, 3)
        assert b.grad.shape == (3,)
        assert np.allclose(b.grad, 4.0)

    def test_div_and_pow(self, rng):
        a = Tensor(rng.uniform(1.0, 2.0, (3,)), requires_grad=True)
        loss = T.reduce_sum(1.0 / a + a**2.0)
        loss.backward()
        assert np.allclose(a.grad, -1.0 / a.data**2 + 2.0 * a.data)

    def test_diamond_graph_accumulates_once(self):
        # If any node were visited twice the gradient would double.
        x = Tensor([1.5], requires_grad=True)
        y = x * 2.0
        z = x * 3.0
        T.reduce_sum(y + z).backward()
        assert np.allclose(x.grad, 5.0)

    def test_same_tensor_used_twice_in_one_op(self):
        x = Tensor([3.0], requires_grad=True)
        T.reduce_sum(x * x).backward()
        assert np.allclose(x.grad, 6.0)


class TestShapes:
    def test_reshape_roundtrip_grad(self, rng):
        a = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
        T.reduce_sum(a.reshape(3, 4) ** 2.0).backward()
        assert np.allclose(a.grad, 2.0 * a.data)

    def test_concat_and_narrow(self, rng):
        a = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        cat = T.concat([a, b], axis=1)
        assert cat.shape == (2, 5)
        part = T.narrow(cat, 1, 2, 3)
        T.reduce_sum(part).backward()
        assert np.allclose(a.grad, 0.0)
        assert np.allclose(b.grad, 1.0)

    def test_stack(self, rng):
        rows = [Tensor(rng.normal(size=(2, 3))) for _ in range(4)]
        stacked = T.stack(rows, axis=1)
        assert stacked.shape == (2, 4, 3)
        assert np.allclose(stacked.data[:, 2], rows[2].data)

    def test_transpose_grad(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        w = rng.normal(size=(3, 2))
        T.reduce_sum(T.mul(T.transpose2d(a), Tensor(w))).backward()
        assert np.allclose(a.grad, w.T)


class TestReductions:
    def test_sum_axis_keepdims(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        out = T.reduce_sum(a, axis=(0, 2), keepdims=True)
        assert out.shape == (1, 3, 1)
        T.reduce_sum(out).backward()
        assert np.allclose(a.grad, 1.0)

    def test_mean_matches_manual(self, rng):
        a = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        T.reduce_mean(a).backward()
        assert np.allclose(a.grad, 1.0 / 15.0)

    def test_max_reduce_first_occurrence(self):
        a = Tensor(np.array([[1.0, 5.0, 5.0, 2.0]]), requires_grad=True)
        out = T.reduce_max(a, axis=1)
        assert out.data[0] == 5.0
        T.reduce_sum(out).backward()
        assert np.array_equal(a.grad, [[0.0, 1.0, 0.0, 0.0]])

    def test_softmax_rows_sum_to_one(self, rng):
        a = Tensor(rng.normal(size=(4, 7)), requires_grad=True)
        s = T.softmax(a, axis=1)
        assert np.allclose(s.data.sum(axis=1), 1.0, atol=1e-12)


class TestMatmul:
    def test_matmul_oracle(self, rng):
        a = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        out = T.matmul(a, b)
        assert np.allclose(out.data, a.data @ b.data, atol=1e-12)
        T.reduce_sum(out).backward()
        assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)

    def test_matmul_shape_error(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestTapeSemantics:
    def test_bit_identical_gradients_across_passes(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
            loss = T.reduce_sum(T.tanh(T.conv2d(x, w, None, 1, 1)) ** 2.0)
            loss.backward()
            return x.grad.copy(), w.grad.copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)

    def test_topological_order(self):
        a = Tensor([1.0], requires_grad=True)
        b = a * 2.0
        c = b + a
        d = T.reduce_sum(c * b)
        tape = T._topo_tape(d)
        position = {id(node): i for i, node in enumerate(tape)}
        for node in tape:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]
        assert len(tape) == len({id(n) for n in tape})

    def test_no_grad_suppresses_recording(self):
        a = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            out = a * 2.0
        assert not out.requires_grad
        assert out._parents == ()

    def test_no_grad_restores_state(self):
        with T.no_grad():
            pass
        a = Tensor([1.0], requires_grad=True)
        assert (a * 2.0).requires_grad

    def test_constant_inputs_record_nothing(self):
        a = Tensor([1.0])
        out = a * 2.0 + 3.0
        assert not out.requires_grad
        assert out._backward_fn is None


class TestDebugMode:
    def test_nan_detection(self):
        T.set_debug(True)
        try:
            with pytest.raises(FloatingPointError):
                T.log(Tensor([-1.0]))
        finally:
            T.set_debug(False)

    def test_clean_values_pass(self):
        T.set_debug(True)
        try:
            out = T.exp(Tensor([0.0, 1.0]))
            assert np.all(np.isfinite(out.data))
        finally:
            T.set_debug(False)


class TestClip:
    def test_clip_values_and_grad(self):
        x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        out = T.clip(x, 0.0, 1.0)
        assert np.allclose(out.data, [0.0, 0.5, 1.0])
        T.reduce_sum(out).backward()
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

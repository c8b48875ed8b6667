"""Tensor and autograd core: hand cases, loop-oracle equality, gradient
checks, tape ordering, and determinism."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgnet.errors import ShapeError
from rgnet.tensor import Tensor, avg_pool2, concat, conv2d, execution_trace, no_grad

from oracles import central_diff, loop_matmul, loop_sum_all, loop_sum_axis, loop_mean_axis


def t64(arr, rg=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2, dtype=np.float32))
        b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
        assert np.array_equal((a @ b).data, b.data)

    def test_hand_case(self):
        a = Tensor([[1.0, 0.0]])
        b = Tensor([[2.0], [5.0]])
        assert (a @ b).data.tolist() == [[2.0]]

    def test_forward_and_grads_match_triple_loop(self):
        rng = np.random.default_rng(3)
        a = t64(rng.uniform(-2, 2, (4, 3)), rg=True)
        b = t64(rng.uniform(-2, 2, (3, 5)), rg=True)
        c = a @ b
        ref = loop_matmul(a.data, b.data)
        assert np.allclose(c.data, ref, rtol=1e-6, atol=0)
        g = rng.uniform(-1, 1, (4, 5))
        c.backward(g)
        assert np.allclose(a.grad, loop_matmul(g, b.data.T), rtol=1e-6)
        assert np.allclose(b.grad, loop_matmul(a.data.T, g), rtol=1e-6)

    def test_float64_forward_is_bitwise_loop_equal(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            a = t64(rng.uniform(-2, 2, (5, 7)))
            b = t64(rng.uniform(-2, 2, (7, 4)))
            assert np.array_equal((a @ b).data, loop_matmul(a.data, b.data))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


class TestElementwise:
    def test_relu_hand(self):
        assert Tensor([2.0, -1.0]).relu().data.tolist() == [2.0, 0.0]

    def test_sigmoid_zero(self):
        assert float(Tensor([0.0]).sigmoid().data[0]) == 0.5

    def test_no_broadcasting_between_tensors(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3,)))

    def test_scalar_ops_allowed(self):
        t = Tensor([1.0, 2.0])
        assert (t * 2.0).data.tolist() == [2.0, 4.0]
        assert (t + 1.0).data.tolist() == [2.0, 3.0]

    def test_log_clamps_small_inputs(self):
        t = Tensor(np.array([1e-20, 1.0], dtype=np.float64), requires_grad=True)
        out = t.log()
        assert out.data[0] == np.log(1e-12)
        out.sum().backward()
        assert t.grad[0] == 0.0 and t.grad[1] == 1.0

    @pytest.mark.parametrize("op", ["relu", "sigmoid", "log", "neg", "softmax"])
    def test_gradients_match_finite_differences(self, op):
        rng = np.random.default_rng(hash(op) % 2**31)
        lo = 0.05 if op == "log" else -2.0
        x = t64(rng.uniform(lo, 2, (3, 4)), rg=True)
        w = rng.uniform(-1, 1, (3, 4))

        def apply():
            if op == "neg":
                out = -x
            else:
                out = getattr(x, op)()
            return (out * Tensor(w, dtype=np.float64)).sum()

        loss = apply()
        loss.backward()
        num = central_diff(lambda: float(apply().data), x.data)
        assert np.allclose(x.grad, num, rtol=1e-3, atol=1e-6)

    def test_mul_gradients(self):
        rng = np.random.default_rng(9)
        a = t64(rng.uniform(-2, 2, (2, 3)), rg=True)
        b = t64(rng.uniform(-2, 2, (2, 3)), rg=True)
        (a * b).sum().backward()
        assert np.array_equal(a.grad, b.data)
        assert np.array_equal(b.grad, a.data)


class TestReductionsLayout:
    def test_concat_hand(self):
        out = concat([Tensor([1.0, 2.0]), Tensor([3.0, 4.0])], axis=0)
        assert out.data.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_concat_preserves_order_and_backward_splits(self):
        a = t64([[1.0], [2.0]], rg=True)
        b = t64([[3.0]], rg=True)
        out = concat([a, b], axis=0)
        out.backward(np.array([[10.0], [20.0], [30.0]]))
        assert a.grad.tolist() == [[10.0], [20.0]]
        assert b.grad.tolist() == [[30.0]]

    def test_softmax_uniform(self):
        out = Tensor([0.0, 0.0, 0.0]).softmax()
        assert np.allclose(out.data, 1 / 3, atol=1e-7)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        out = Tensor(rng.normal(0, 3, (6, 9)).astype(np.float32)).softmax()
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_sum_mean_match_loop_oracle_exactly(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-2, 2, (3, 5, 4))
        t = t64(x)
        assert float(t.sum().data) == loop_sum_all(x)
        for ax in range(3):
            assert np.array_equal(t.sum(axis=ax).data, loop_sum_axis(x, ax))
            assert np.array_equal(t.mean(axis=ax).data, loop_mean_axis(x, ax))

    def test_slice_and_backward(self):
        x = t64(np.arange(12, dtype=np.float64).reshape(3, 4), rg=True)
        x[1:, :2].sum().backward()
        expect = np.zeros((3, 4))
        expect[1:, :2] = 1
        assert np.array_equal(x.grad, expect)

    def test_transpose_last_two(self):
        x = t64(np.arange(6, dtype=np.float64).reshape(2, 3), rg=True)
        y = x.transpose_last_two()
        assert y.shape == (3, 2)
        y.sum().backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_gather_rows_accumulates_duplicates(self):
        x = t64([[1.0], [2.0]], rg=True)
        x.gather_rows([0, 0, 1]).sum().backward()
        assert x.grad.tolist() == [[2.0], [1.0]]

    def test_sorted_sum_matches_sum_and_is_order_invariant(self):
        rng = np.random.default_rng(17)
        x = rng.uniform(-2, 2, (4, 6, 3))
        a = t64(x).sorted_sum(axis=1).data
        b = t64(x[:, ::-1, :].copy()).sorted_sum(axis=1).data
        assert np.array_equal(a, b)
        assert np.allclose(a, x.sum(axis=1), rtol=1e-12)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2))).sum(axis=5)


class TestAutogradMechanics:
    def test_diamond_graph_accumulates_both_paths(self):
        x = t64([3.0], rg=True)
        y = x * 2.0
        z = y + y        # both branches share y
        z.backward()
        assert x.grad.tolist() == [4.0]

    def test_grad_accumulates_across_backward_calls(self):
        x = t64([1.0], rg=True)
        (x * 2.0).backward()
        (x * 3.0).backward()
        assert x.grad.tolist() == [5.0]

    def test_backward_visits_reverse_execution_order(self):
        x = t64([1.0, 2.0], rg=True)
        a = x * 2.0
        b = a + 1.0
        c = b.relu()
        trace = execution_trace(c)
        assert [r.name for r in trace] == ["mul_scalar", "add_scalar", "relu"]
        assert [r.seq for r in trace] == sorted(r.seq for r in trace)

    def test_two_passes_bit_identical(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.uniform(-2, 2, (4, 4)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.uniform(-2, 2, (4, 4)).astype(np.float32), requires_grad=True)
            loss = ((x @ w).relu().softmax() * Tensor(rng.uniform(-1, 1, (4, 4)).astype(np.float32))).sum()
            loss.backward()
            return float(loss.data), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)

    def test_no_grad_disables_recording(self):
        x = t64([1.0], rg=True)
        with no_grad():
            y = x * 2.0
        assert y.op is None and not y.requires_grad


class TestSpatialOps:
    def test_conv2d_matches_direct_computation(self):
        rng = np.random.default_rng(2)
        x = t64(rng.uniform(-1, 1, (2, 5, 5)), rg=True)
        w = t64(rng.uniform(-1, 1, (3, 2, 3, 3)), rg=True)
        b = t64(rng.uniform(-1, 1, 3), rg=True)
        out = conv2d(x, w, b, stride=1, padding=1)
        assert out.shape == (3, 5, 5)
        xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
        for oc in range(3):
            for i in range(5):
                for j in range(5):
                    ref = (xp[:, i : i + 3, j : j + 3] * w.data[oc]).sum() + b.data[oc]
                    assert abs(out.data[oc, i, j] - ref) < 1e-12

    def test_conv2d_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        x = t64(rng.uniform(-1, 1, (2, 4, 4)), rg=True)
        w = t64(rng.uniform(-1, 1, (2, 2, 3, 3)), rg=True)
        b = t64(rng.uniform(-1, 1, 2), rg=True)
        probe = rng.uniform(-1, 1, (2, 2, 2))

        def f():
            return (conv2d(x, w, b, stride=2, padding=1) * Tensor(probe, dtype=np.float64)).sum()

        f().backward()
        for t in (x, w, b):
            num = central_diff(lambda: float(f().data), t.data)
            assert np.allclose(t.grad, num, rtol=1e-3, atol=1e-6)

    def test_avg_pool2(self):
        x = t64(np.arange(16, dtype=np.float64).reshape(1, 4, 4), rg=True)
        out = avg_pool2(x)
        assert out.data[0, 0, 0] == (0 + 1 + 4 + 5) / 4
        out.sum().backward()
        assert np.allclose(x.grad, 0.25)

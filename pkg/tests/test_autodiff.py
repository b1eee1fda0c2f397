import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hoidet import autodiff as ad
from hoidet.autodiff import (GraphError, NumericsError, ShapeError, Tape,
                             Tensor, backward, grad_check)
from hoidet.rng import Rng


def t(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(t(np.eye(2)), t([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        out = ad.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_zero_case(self):
        rng = Rng(3)
        out = ad.matmul(t(np.zeros((2, 3))), t(rng.uniform((3, 4), -1, 1)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 4\)"):
            ad.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 4))))

    def test_batched_matches_loop(self):
        rng = Rng(5)
        a = rng.uniform((4, 3, 2), -1, 1)
        b = rng.uniform((4, 2, 5), -1, 1)
        out = ad.matmul(t(a), t(b)).data
        for i in range(4):
            np.testing.assert_allclose(out[i], a[i] @ b[i], rtol=0, atol=0)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(t([0.0])).data[0] == 0.5

    def test_relu_definition(self):
        out = ad.relu(t([-3.0, 2.5]))
        np.testing.assert_array_equal(out.data, [0.0, 2.5])

    def test_concat(self):
        out = ad.concat_last([t([1.0, 2.0]), t([3.0])])
        np.testing.assert_array_equal(out.data, [1, 2, 3])

    def test_concat_rank_mismatch(self):
        with pytest.raises(ShapeError, match="rank"):
            ad.concat_last([t([[1.0]]), t([1.0])])

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(t([1.0, 2.0]), t([1.0, 2.0, 3.0]))

    def test_scalar_broadcast_allowed(self):
        out = t([1.0, 2.0]) * 2.0 + 1.0
        np.testing.assert_array_equal(out.data, [3.0, 5.0])


class TestSoftmax:
    def test_uniform_input(self):
        out = ad.softmax(t([[3.3, 3.3, 3.3]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_hand_value(self):
        out = ad.softmax(t([0.0, np.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=7),
           st.floats(-50, 50))
    def test_shift_invariance_and_rows_sum(self, xs, c):
        base = ad.softmax(t(xs)).data
        shifted = ad.softmax(t(np.asarray(xs) + c)).data
        np.testing.assert_allclose(base, shifted, atol=1e-12)
        assert abs(base.sum() - 1.0) < 1e-9
        assert np.all(base > 0) and np.all(base < 1 + 1e-15)


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        out = ad.layer_norm(t([[2.0, 2.0, 2.0]]), t(np.ones(3)), t(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_zero_gain_broadcasts_bias(self):
        out = ad.layer_norm(t([[1.0, 5.0]]), t(np.zeros(2)), t([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0]])

    def test_two_point_vector(self):
        # mean 2, biased variance 1 -> +-1/sqrt(1 + 1e-5)
        out = ad.layer_norm(t([[1.0, 3.0]]), t(np.ones(2)), t(np.zeros(2)))
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data, [[-expected, expected]], atol=1e-15)


class TestBackward:
    def test_sum_gives_ones(self):
        x = t([[1.0, 2.0], [3.0, 4.0]])
        with Tape():
            loss = ad.sum_all(x)
            backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_product_rule(self):
        x, y = t([1.0, 2.0]), t([5.0, 7.0])
        with Tape():
            backward(ad.sum_all(x * y))
        np.testing.assert_array_equal(x.grad, [5.0, 7.0])
        np.testing.assert_array_equal(y.grad, [1.0, 2.0])

    def test_mlp_like_grads_match_finite_differences(self):
        rng = Rng(11)
        w = t(rng.uniform((3, 4), -1, 1))
        x = t(rng.uniform((5, 3), -1, 1))

        def f(ts):
            return ad.mean_all(ad.sigmoid(ad.matmul(ts["x"], ts["w"])))

        report = grad_check(f, {"w": w, "x": x}, step=1e-5, tolerance=1e-4)
        assert report.passed and report.worst <= 1e-4

    def test_non_scalar_loss_rejected(self):
        x = t([1.0, 2.0])
        with Tape():
            y = x * 2.0
            with pytest.raises(ShapeError):
                backward(y)

    def test_detached_loss_rejected(self):
        with pytest.raises(GraphError):
            backward(Tensor(np.float64(3.0)))

    def test_double_backward_is_an_error(self):
        x = t([1.0, 2.0])
        with Tape():
            loss = ad.sum_all(x * x)
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_accumulation_is_additive_across_graphs(self):
        x = t([1.0, 2.0])
        for _ in range(2):
            with Tape():
                backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_linearity_of_backward(self):
        rng = Rng(21)
        xv = rng.uniform((4,), -1, 1)

        def grad_of(fn):
            x = t(xv)
            with Tape():
                backward(fn(x))
            return x.grad

        f = lambda x: ad.sum_all(ad.sigmoid(x))
        g = lambda x: ad.mean_all(x * x)
        combined = grad_of(lambda x: ad.add(f(x), g(x)))
        np.testing.assert_allclose(combined, grad_of(f) + grad_of(g), atol=1e-12)

    def test_no_grad_without_requires_grad(self):
        x = t([1.0, 2.0], grad=False)
        y = t([3.0, 4.0])
        with Tape():
            backward(ad.sum_all(x * y))
        assert x.grad is None
        np.testing.assert_array_equal(y.grad, [1.0, 2.0])


class TestGradCheckOp:
    def test_square_function_closed_form(self):
        x = t([1.0, 2.0])
        report = grad_check(lambda ts: ad.sum_all(ts["x"] * ts["x"]), {"x": x})
        assert report.errors["x"] <= 1e-7
        x.grad = None
        with Tape():
            backward(ad.sum_all(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-15)

    def test_requires_grad_false_skipped(self):
        x = t([1.0, 2.0])
        c = t([5.0, 6.0], grad=False)
        report = grad_check(lambda ts: ad.sum_all(ts["x"] * ts["c"]), {"x": x, "c": c})
        assert "c" not in report.errors and "x" in report.errors

    def test_non_finite_detected(self):
        x = t([1.0])
        with pytest.raises(NumericsError):
            grad_check(lambda ts: ad.sum_all(ad.log(ts["x"] - 1.0)), {"x": x})

    def test_corrupted_backward_rule_detected(self, monkeypatch):
        # a deliberately wrong backward rule must fail the check
        def bad_sigmoid(x):
            from hoidet import backend as kern
            y = kern.sigmoid(x.data)

            def bwd(g, needs):
                return (g * 0.5,)  # wrong derivative

            return ad._record(y, (x,), bwd)

        x = t([0.3, -0.8, 1.2])
        report = grad_check(lambda ts: ad.sum_all(bad_sigmoid(ts["x"])), {"x": x})
        assert not report.passed


OP_CASES = [
    ("add", lambda ts: ad.sum_all(ad.mul(ad.add(ts["a"], ts["b"]), ts["w"])), ("a", "b")),
    ("sub", lambda ts: ad.sum_all(ad.mul(ad.sub(ts["a"], ts["b"]), ts["w"])), ("a", "b")),
    ("mul", lambda ts: ad.sum_all(ad.mul(ad.mul(ts["a"], ts["b"]), ts["w"])), ("a", "b")),
    ("div", lambda ts: ad.sum_all(ad.mul(ad.div(ts["a"], ad.sigmoid(ts["b"]) + 0.5), ts["w"])), ("a", "b")),
    ("relu", lambda ts: ad.sum_all(ad.mul(ad.relu(ts["a"]), ts["w"])), ("a",)),
    ("sigmoid", lambda ts: ad.sum_all(ad.mul(ad.sigmoid(ts["a"]), ts["w"])), ("a",)),
    ("log", lambda ts: ad.sum_all(ad.mul(ad.log(ad.sigmoid(ts["a"]) + 0.1), ts["w"])), ("a",)),
    ("absolute", lambda ts: ad.sum_all(ad.mul(ad.absolute(ts["a"]), ts["w"])), ("a",)),
    ("power", lambda ts: ad.sum_all(ad.mul(ad.power(ad.sigmoid(ts["a"]), 3.0), ts["w"])), ("a",)),
    ("maximum", lambda ts: ad.sum_all(ad.mul(ad.maximum(ts["a"], ts["b"]), ts["w"])), ("a", "b")),
    ("minimum", lambda ts: ad.sum_all(ad.mul(ad.minimum(ts["a"], ts["b"]), ts["w"])), ("a", "b")),
    ("softmax", lambda ts: ad.sum_all(ad.mul(ad.softmax(ts["a"], axis=-1), ts["w"])), ("a",)),
    ("matmul", lambda ts: ad.sum_all(ad.mul(ad.matmul(ts["a"], ad.transpose2(ts["b"])), ts["m"])), ("a", "b")),
    ("mean", lambda ts: ad.mean_all(ad.mul(ts["a"], ts["w"])), ("a",)),
    ("slice_gather", lambda ts: ad.sum_all(ad.mul(
        ad.gather_rows(ad.slice_last(ts["a"], 1, 3), [0, 2, 2]), ts["g"])), ("a",)),
    ("reshape_concat", lambda ts: ad.sum_all(ad.mul(
        ad.reshape(ad.concat_last([ts["a"], ts["b"]]), (2, 2, 8)), ts["r"])), ("a", "b")),
    ("broadcast_rows", lambda ts: ad.sum_all(ad.mul(ad.broadcast_rows(ts["a"], 3), ts["t3"])), ("a",)),
    ("add_rowvec", lambda ts: ad.sum_all(ad.mul(ad.add_rowvec(ts["a"], ts["v"]), ts["w"])), ("a", "v")),
    ("layer_norm", lambda ts: ad.sum_all(ad.mul(
        ad.layer_norm(ts["a"], ts["v"], ts["v2"]), ts["w"])), ("a", "v", "v2")),
]


@pytest.mark.parametrize("name,f,wrt", [(c[0], c[1], c[2]) for c in OP_CASES])
def test_randomized_grad_check_per_op(name, f, wrt):
    rng = Rng(sum(ord(ch) for ch in name))
    tensors = {
        "a": t(rng.split("a").uniform((4, 4), -2, 2)),
        "b": t(rng.split("b").uniform((4, 4), -2, 2)),
        "v": t(rng.split("v").uniform((4,), 0.5, 1.5)),
        "v2": t(rng.split("v2").uniform((4,), -0.5, 0.5)),
        "w": t(rng.split("w").uniform((4, 4), -1, 1), grad=False),
        "m": t(rng.split("m").uniform((4, 4), -1, 1), grad=False),
        "g": t(rng.split("g").uniform((3, 2), -1, 1), grad=False),
        "r": t(rng.split("r").uniform((2, 2, 8), -1, 1), grad=False),
        "t3": t(rng.split("t3").uniform((3, 4, 4), -1, 1), grad=False),
    }
    report = grad_check(f, {k: v for k, v in tensors.items() if k in wrt or not v.requires_grad})
    assert report.passed, f"{name}: {report.format()}"

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from machan.autodiff import (
    MASK_LOGIT,
    ShapeError,
    Tape,
    Tensor,
    finite_difference,
    grad_check,
)


class TestTensor:
    def test_shape_value_count(self):
        t = Tensor([1.0, 2.0, 3.0, 4.0], shape=(2, 2))
        assert t.shape == (2, 2)
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0, 3.0], shape=(2, 2))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            Tensor([np.inf])

    def test_rejects_zero_extent(self):
        with pytest.raises(ShapeError):
            Tensor([], shape=(0,))


class TestMatmul:
    def test_identity(self):
        t = Tape()
        out = t.matmul(t.const(np.eye(2)), t.const([[3.0], [4.0]]))
        np.testing.assert_array_equal(t.value(out), [[3.0], [4.0]])

    def test_hand_product(self):
        t = Tape()
        out = t.matmul(t.const([[1.0, 2.0], [3.0, 4.0]]), t.const([[5.0], [6.0]]))
        np.testing.assert_array_equal(t.value(out), [[17.0], [39.0]])

    def test_zero_annihilates(self):
        t = Tape()
        out = t.matmul(t.const(np.zeros((3, 4))), t.const(np.arange(4.0).reshape(4, 1)))
        np.testing.assert_array_equal(t.value(out), np.zeros((3, 1)))

    def test_vector_lhs(self):
        t = Tape()
        out = t.matmul(t.const([1.0, 2.0]), t.const([[5.0], [6.0]]))
        np.testing.assert_array_equal(t.value(out), [17.0])

    def test_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError):
            t.matmul(t.const(np.ones((2, 3))), t.const(np.ones((2, 3))))


class TestElementwise:
    def test_tanh_odd(self):
        t = Tape()
        assert t.value(t.tanh(t.const([0.0])))[0] == 0.0

    def test_sigmoid_at_zero(self):
        t = Tape()
        assert t.value(t.sigmoid(t.const([0.0])))[0] == 0.5

    def test_hadamard_hand(self):
        t = Tape()
        out = t.elementwise("hadamard", t.const([1.0, 2.0]), t.const([3.0, 4.0]))
        np.testing.assert_array_equal(t.value(out), [3.0, 8.0])

    def test_add_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError):
            t.add(t.const([1.0]), t.const([1.0, 2.0]))

    def test_unknown_kind(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.elementwise("relu", t.const([1.0]))

    @given(st.lists(st.floats(-15, 15), min_size=1, max_size=8))
    def test_bounded_ranges(self, xs):
        # beyond |x| ~ 18 float64 rounds tanh/sigmoid onto the bound itself
        t = Tape()
        x = t.const(xs)
        v = t.value(t.tanh(x))
        assert np.all((v > -1.0) & (v < 1.0))
        s = t.value(t.sigmoid(x))
        assert np.all((s > 0.0) & (s < 1.0))


class TestSoftmax:
    def test_uniform(self):
        t = Tape()
        out = t.value(t.softmax(t.const([0.0, 0.0, 0.0])))
        np.testing.assert_allclose(out, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_closed_form_with_mask(self):
        t = Tape()
        out = t.value(t.softmax(t.const([1.0, 0.0, MASK_LOGIT])))
        e = np.e
        np.testing.assert_allclose(out[:2], [e / (e + 1), 1 / (e + 1)], atol=1e-12)
        assert out[2] < 1e-30

    @given(
        st.lists(st.floats(-100, 100), min_size=1, max_size=6),
        st.floats(-100, 100),
    )
    @settings(max_examples=80)
    def test_simplex_and_shift_invariance(self, logits, c):
        t = Tape()
        a = t.value(t.softmax(t.const(logits)))
        assert abs(a.sum() - 1.0) <= 1e-12
        assert np.all((a >= 0.0) & (a <= 1.0))
        b = t.value(t.softmax(t.const(np.asarray(logits) + c)))
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestConcat:
    def test_order_preserved(self):
        t = Tape()
        out = t.concat([t.const([1.0]), t.const([2.0, 3.0])])
        np.testing.assert_array_equal(t.value(out), [1.0, 2.0, 3.0])

    def test_four_128_vectors(self):
        t = Tape()
        parts = [t.const(np.zeros(128)) for _ in range(4)]
        assert t.value(t.concat(parts)).shape == (512,)

    def test_single_part_identity(self):
        t = Tape()
        v = [4.0, 5.0]
        np.testing.assert_array_equal(t.value(t.concat([t.const(v)])), v)

    def test_rejects_matrix(self):
        t = Tape()
        with pytest.raises(ShapeError):
            t.concat([t.const(np.ones((2, 2)))])


class TestMse:
    def test_zero_at_equality(self):
        t = Tape()
        assert float(t.value(t.mse(t.const([1.0, 2.0]), t.const([1.0, 2.0])))) == 0.0

    def test_hand_value(self):
        t = Tape()
        assert float(t.value(t.mse(t.const([1.0, 2.0]), t.const([0.0, 0.0])))) == 2.5

    def test_constant_offset(self):
        t = Tape()
        x = np.array([1.5])  # exactly representable, so x + 2 is too
        assert float(t.value(t.mse(t.const(x), t.const(x + 2.0)))) == 4.0


class TestBackward:
    def test_square_gradient(self):
        t = Tape()
        w = t.param("w", [3.0])
        loss = t.dot(w, w)
        grads = t.backward(loss)
        np.testing.assert_allclose(grads["w"], [6.0])

    def test_unused_param_zero(self):
        t = Tape()
        t.param("unused", np.ones((2, 2)))
        w = t.param("w", [2.0])
        grads = t.backward(t.dot(w, w))
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_nonscalar_loss_rejected(self):
        t = Tape()
        w = t.param("w", [1.0, 2.0])
        with pytest.raises(ShapeError):
            t.backward(t.tanh(w))

    def test_fanout_accumulates(self):
        # loss = w.w + w.w -> grad 4w
        t = Tape()
        w = t.param("w", [1.5])
        d = t.dot(w, w)
        grads = t.backward(t.add(d, d))
        np.testing.assert_allclose(grads["w"], [6.0])

    def test_random_graph_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        init = {
            "w": rng.standard_normal((3, 2)),
            "b": rng.standard_normal(2),
        }
        x = rng.standard_normal(3)
        target = rng.standard_normal(2)

        def build(params):
            t = Tape()
            w = t.param("w", params["w"])
            b = t.param("b", params["b"])
            h = t.tanh(t.affine(t.const(x), w, b))
            return t, t.mse(h, t.const(target))

        report = grad_check(build, init, h=1e-5, tol=1e-6)
        assert report.ok, report.per_param

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(3)
        w0 = rng.standard_normal((4, 3))
        x = rng.standard_normal(4)

        def run():
            t = Tape()
            w = t.param("w", w0)
            out = t.softmax(t.matmul(t.const(x), w))
            loss = t.mse(out, t.const([1.0, 0.0, 0.0]))
            return t.value(out).copy(), t.backward(loss)["w"]

        out1, g1 = run()
        out2, g2 = run()
        assert np.array_equal(out1, out2)
        assert np.array_equal(g1, g2)


class TestFusedOps:
    """Fused nodes must agree with their primitive-op spellings, values and grads."""

    def setup_method(self):
        self.rng = np.random.default_rng(11)

    def _compare(self, build_fused, build_primitive, params):
        ta, la = build_fused(params)
        tb, lb = build_primitive(params)
        np.testing.assert_allclose(ta.value(la), tb.value(lb), atol=1e-15)
        ga, gb = ta.backward(la), tb.backward(lb)
        for k in params:
            np.testing.assert_allclose(ga[k], gb[k], atol=1e-14)

    def test_affine_tanh(self):
        params = {"w": self.rng.standard_normal((4, 3)), "b": self.rng.standard_normal(3)}
        x = self.rng.standard_normal(4)

        def fused(p):
            t = Tape()
            out = t.affine_tanh(t.const(x), t.param("w", p["w"]), t.param("b", p["b"]))
            return t, t.dot(out, t.const([1.0, 2.0, 3.0]))

        def primitive(p):
            t = Tape()
            pre = t.add(t.matmul(t.const(x), t.param("w", p["w"])), t.param("b", p["b"]))
            return t, t.dot(t.tanh(pre), t.const([1.0, 2.0, 3.0]))

        self._compare(fused, primitive, params)

    def test_gate_and_cell(self):
        p0 = {
            "u": self.rng.standard_normal((3, 2)),
            "r": self.rng.standard_normal((2, 2)),
            "b": self.rng.standard_normal(2),
        }
        x = self.rng.standard_normal(3)
        h = self.rng.standard_normal(2)
        s = self.rng.standard_normal(2)

        def fused(p):
            t = Tape()
            g = t.gate_sigmoid(t.const(x), t.param("u", p["u"]), t.const(h),
                               t.param("r", p["r"]), t.param("b", p["b"]))
            z = t.gate_tanh(t.const(x), t.param("u2", p["u"]), t.const(h),
                            t.param("r2", p["r"]), t.param("b2", p["b"]))
            out = t.mul_tanh(g, t.cell(g, t.const(s), g, z))
            return t, t.dot(out, t.const([1.0, -1.0]))

        def primitive(p):
            t = Tape()
            def pre(u, r, b):
                return t.add(t.add(t.matmul(t.const(x), u), t.matmul(t.const(h), r)), b)
            g = t.sigmoid(pre(t.param("u", p["u"]), t.param("r", p["r"]), t.param("b", p["b"])))
            z = t.tanh(pre(t.param("u2", p["u"]), t.param("r2", p["r"]), t.param("b2", p["b"])))
            cell = t.add(t.hadamard(g, t.const(s)), t.hadamard(g, z))
            out = t.hadamard(g, t.tanh(cell))
            return t, t.dot(out, t.const([1.0, -1.0]))

        params = {**p0, "u2": p0["u"], "r2": p0["r"], "b2": p0["b"]}
        self._compare(fused, primitive, params)

    def test_fused_against_finite_differences(self):
        x = self.rng.standard_normal(4)
        init = {
            "u": self.rng.standard_normal((4, 3)),
            "r": self.rng.standard_normal((3, 3)),
            "b": self.rng.standard_normal(3),
            "w": self.rng.standard_normal((4, 3)),
            "b2": self.rng.standard_normal(3),
        }

        def build(p):
            t = Tape()
            h = t.affine_tanh(t.const(x), t.param("w", p["w"]), t.param("b2", p["b2"]))
            g = t.gate_sigmoid(t.const(x), t.param("u", p["u"]), h,
                               t.param("r", p["r"]), t.param("b", p["b"]))
            out = t.mul_tanh(g, t.cell(g, h, g, h))
            return t, t.mse(out, t.const([0.3, -0.2, 0.9]))

        report = grad_check(build, init, tol=1e-6)
        assert report.ok, report.per_param


class TestHardSelect:
    def test_forward_is_unscaled_channel(self):
        t = Tape()
        a = t.const([0.2, 0.5, 0.3])
        h = t.const([1.0, 2.0])
        out = t.hard_select(a, h, 1)
        np.testing.assert_array_equal(t.value(out), [1.0, 2.0])

    def test_backward_is_product_rule(self):
        # loss = sum(hard_select(a, h, k)) with straight-through backward:
        # d/dh = a[k], d/da[k] = sum(h)
        t = Tape()
        a = t.param("a", [0.2, 0.5, 0.3])
        h = t.param("h", [1.0, 2.0])
        out = t.hard_select(a, h, 1)
        grads = t.backward(t.dot(out, t.const([1.0, 1.0])))
        np.testing.assert_allclose(grads["h"], [0.5, 0.5])
        np.testing.assert_allclose(grads["a"], [0.0, 3.0, 0.0])


class TestGradCheck:
    def test_quadratic_toy_model(self):
        def build(params):
            t = Tape()
            w = t.param("w", params["w"])
            return t, t.mse(w, t.const([1.0, -2.0, 0.5]))

        report = grad_check(build, {"w": np.array([0.3, 0.7, -1.1])}, tol=1e-8)
        assert report.ok
        assert report.max_rel_err < 1e-8

    def test_degenerate_input_reports_error(self):
        def build(params):
            raise ValueError("empty sequence")

        report = grad_check(build, {"w": np.zeros(2)})
        assert not report.ok
        assert "empty sequence" in report.error
        assert report.per_param == {}

    def test_finite_difference_oracle_on_known_gradient(self):
        # f(w) = sum(w^2) has gradient 2w; the FD helper is itself the oracle
        w = np.array([1.0, -2.0, 3.0])
        fd = finite_difference(lambda p: float((p["w"] ** 2).sum()), {"w": w})
        np.testing.assert_allclose(fd["w"], 2 * w, rtol=1e-9)

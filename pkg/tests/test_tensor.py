"""Autodiff core: primitive semantics, backward correctness, record replay."""

import numpy as np
import pytest

import rankreg.tensor as T
from rankreg.tensor import (
    NonFiniteError,
    ShapeMismatchError,
    Tape,
    TapeError,
    apply_primitive,
    backward,
    const,
    gradient_check,
    tensor,
)


class TestPrimitiveValues:
    def test_softmax_symmetry(self):
        out = T.softmax(tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.values, [0.5, 0.5])

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = T.matmul(tensor(np.eye(3)), tensor(a))
        np.testing.assert_array_equal(out.values, a)

    def test_max_with_zero_hinge(self):
        assert T.max_with_zero(tensor([-0.1])).item() == 0.0
        assert T.max_with_zero(tensor([2.82])).item() == 2.82

    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(1)
        x = tensor(rng.normal(scale=5.0, size=(6, 8)))
        out = T.softmax(x).values
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(out > 0) and np.all(out < 1)

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(2)
        x = tensor(rng.normal(size=(4, 7)))
        fused = T.log_softmax(x).values
        plain = np.log(T.softmax(x).values)
        np.testing.assert_allclose(fused, plain, atol=1e-12)

    def test_log_softmax_stable_for_huge_logits(self):
        x = tensor([[1000.0, 999.0, 998.0]])
        out = T.log_softmax(x).values
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(np.exp(out).sum(), 1.0, atol=1e-12)

    def test_apply_primitive_by_kind_name(self):
        out = apply_primitive("elementwise-mul", tensor([2.0, 3.0]), tensor([4.0, 5.0]))
        np.testing.assert_array_equal(out.values, [8.0, 15.0])


class TestPrimitiveErrors:
    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 3))))

    def test_add_broadcast_mismatch(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(4,\)"):
            T.add(tensor(np.zeros((2, 3))), tensor(np.zeros(4)))

    def test_non_finite_output_names_op(self):
        with pytest.raises(NonFiniteError, match="log"):
            T.log(tensor([0.0]))

    def test_embed_lookup_rejects_out_of_range(self):
        with pytest.raises(ShapeMismatchError, match="out of range"):
            T.embed_lookup(tensor(np.zeros((4, 2))), [0, 5])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown primitive"):
            apply_primitive("conv2d", tensor([1.0]))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        with Tape() as tape:
            x = tensor([1.0, 2.0, 3.0, 4.0])
            loss = T.sum_(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0, 1.0])

    def test_hinge_subgradient_zero_at_boundary(self):
        with Tape() as tape:
            x = tensor([0.0])
            loss = T.sum_(T.max_with_zero(x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_tanh_layer_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        w = tensor(rng.uniform(-0.5, 0.5, size=(4, 5)), name="w")
        x = const(rng.normal(size=(2, 4)))

        def build():
            return T.sum_(T.tanh(T.matmul(x, w)))

        report = gradient_check(build, {"w": w}, step=1e-6, tol=1e-4)
        assert report.passed, report.entries

    def test_double_backward_rejected(self):
        with Tape() as tape:
            x = tensor([1.0])
            loss = T.sum_(x)
        backward(loss, tape)
        with pytest.raises(TapeError, match="re-run forward"):
            backward(loss, tape)

    def test_non_scalar_loss_rejected(self):
        with Tape() as tape:
            x = tensor([1.0, 2.0])
            y = T.tanh(x)
        with pytest.raises(ShapeMismatchError):
            backward(y, tape)

    def test_empty_record_rejected(self):
        tape = Tape()
        with pytest.raises(TapeError, match="empty"):
            backward(tensor([1.0]), tape)

    def test_unused_leaf_gets_zero_gradient(self):
        with Tape() as tape:
            x = tensor([1.0, 2.0])
            unused = tensor([5.0])
            _ = T.tanh(unused)
            loss = T.sum_(x)
        backward(loss, tape)
        np.testing.assert_array_equal(unused.grad, [0.0])

    def test_backward_linearity(self):
        rng = np.random.default_rng(4)
        w0 = rng.uniform(-0.5, 0.5, size=(3, 3))
        x = rng.normal(size=(2, 3))
        a, b = 0.7, -1.3

        def grad_of(scale_t, scale_s):
            w = tensor(w0.copy())
            with Tape() as tape:
                h = T.matmul(const(x), w)
                loss = T.add(
                    T.smul(T.sum_(T.tanh(h)), scale_t),
                    T.smul(T.sum_(T.sigmoid(h)), scale_s),
                )
            backward(loss, tape)
            return w.grad

        combined = grad_of(a, b)
        expected = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
        np.testing.assert_allclose(combined, expected, atol=1e-12)


class TestTapeRecord:
    def test_replay_reproduces_outputs_bit_exactly(self):
        rng = np.random.default_rng(5)
        with Tape() as tape:
            x = tensor(rng.normal(size=(3, 4)))
            w = tensor(rng.normal(size=(4, 2)))
            h = T.tanh(T.matmul(x, w))
            _ = T.sum_(T.softmax(h))
        assert tape.replay()

    def test_entries_topologically_ordered(self):
        with Tape() as tape:
            x = tensor([1.0, 2.0])
            y = T.tanh(x)
            z = T.sum_(T.mul(y, y))
        produced_at = {e.output_id: i for i, e in enumerate(tape.entries)}
        for i, e in enumerate(tape.entries):
            for input_id in e.input_ids:
                assert input_id not in produced_at or produced_at[input_id] < i
        assert z.node_id in produced_at

    def test_nested_tapes_rejected(self):
        with Tape():
            with pytest.raises(TapeError):
                with Tape():
                    pass

    def test_untracked_ops_outside_tape(self):
        out = T.tanh(tensor([1.0]))
        tape = Tape()
        assert not tape.entries and out.grad is None


class TestGradientCheck:
    def test_quadratic_closed_form(self):
        x = tensor([3.0, 4.0], name="x")

        def build():
            return T.smul(T.sum_(T.mul(x, x)), 0.5)

        report = gradient_check(build, {"x": x}, step=1e-6, tol=1e-9)
        assert report.passed
        with Tape() as tape:
            loss = build()
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [3.0, 4.0], atol=1e-12)
        assert report.max_rel_err <= 1e-9

    def test_constant_loss_zero_gradients(self):
        x = tensor([1.0, -2.0], name="x")
        c = const([7.0])

        def build():
            return T.add(T.sum_(c), T.smul(T.sum_(x), 0.0))

        report = gradient_check(build, {"x": x})
        assert report.passed and report.max_rel_err == 0.0

    def test_non_deterministic_builder_rejected(self):
        rng = np.random.default_rng(6)
        x = tensor([1.0])

        def build():
            return T.smul(T.sum_(x), float(rng.uniform()))

        with pytest.raises(ValueError, match="not deterministic"):
            gradient_check(build, {"x": x})

    def test_non_positive_step_rejected(self):
        x = tensor([1.0])
        with pytest.raises(ValueError, match="step"):
            gradient_check(lambda: T.sum_(x), {"x": x}, step=0.0)


def _random_fd_case(kind, rng):
    """Build (loss_builder, params) exercising one primitive on random shapes."""
    m, k, n = rng.integers(1, 8, size=3)
    if kind == "matmul":
        a = tensor(rng.normal(size=(m, k)), name="a")
        b = tensor(rng.normal(size=(k, n)), name="b")
        return lambda: T.sum_(T.matmul(a, b)), {"a": a, "b": b}
    if kind == "matmul-3d":
        a = tensor(rng.normal(size=(2, m, k)), name="a")
        b = tensor(rng.normal(size=(k, n)), name="b")
        return lambda: T.sum_(T.matmul(a, b)), {"a": a, "b": b}
    if kind == "matmul-vec":
        a = tensor(rng.normal(size=(m, k)), name="a")
        v = tensor(rng.normal(size=(k,)), name="v")
        return lambda: T.sum_(T.matmul(a, v)), {"a": a, "v": v}
    if kind == "add-broadcast":
        a = tensor(rng.normal(size=(m, n)), name="a")
        b = tensor(rng.normal(size=(n,)), name="b")
        return lambda: T.sum_(T.add(a, b)), {"a": a, "b": b}
    if kind == "elementwise-mul":
        a = tensor(rng.normal(size=(m, n)), name="a")
        b = tensor(rng.normal(size=(m, 1)), name="b")
        return lambda: T.sum_(T.mul(a, b)), {"a": a, "b": b}
    if kind == "tanh":
        a = tensor(rng.normal(size=(m, n)), name="a")
        return lambda: T.sum_(T.tanh(a)), {"a": a}
    if kind == "sigmoid":
        a = tensor(rng.normal(size=(m, n)), name="a")
        return lambda: T.sum_(T.sigmoid(a)), {"a": a}
    if kind == "softmax":
        a = tensor(rng.normal(size=(m, n)), name="a")
        w = const(rng.normal(size=(m, n)))
        return lambda: T.sum_(T.mul(T.softmax(a), w)), {"a": a}
    if kind == "log-softmax":
        a = tensor(rng.normal(size=(m, n)), name="a")
        w = const(rng.normal(size=(m, n)))
        return lambda: T.sum_(T.mul(T.log_softmax(a), w)), {"a": a}
    if kind == "log":
        a = tensor(rng.uniform(0.2, 3.0, size=(m, n)), name="a")
        return lambda: T.sum_(T.log(a)), {"a": a}
    if kind == "max-with-zero":
        vals = rng.normal(size=(m, n))
        vals[np.abs(vals) < 0.05] = 0.5  # keep finite differencing off the kink
        a = tensor(vals, name="a")
        return lambda: T.sum_(T.max_with_zero(a)), {"a": a}
    if kind == "sum-axis":
        a = tensor(rng.normal(size=(m, n)), name="a")
        w = const(rng.normal(size=(n,)))
        return lambda: T.sum_(T.mul(T.sum_(a, axis=0), w)), {"a": a}
    if kind == "concat":
        a = tensor(rng.normal(size=(m, n)), name="a")
        b = tensor(rng.normal(size=(m, n)), name="b")
        w = const(rng.normal(size=(m, 2 * n)))
        return lambda: T.sum_(T.mul(T.concat([a, b], axis=-1), w)), {"a": a, "b": b}
    if kind == "embed-lookup":
        table = tensor(rng.normal(size=(5, n)), name="table")
        ids = rng.integers(0, 5, size=(m,))
        return lambda: T.sum_(T.tanh(T.embed_lookup(table, ids))), {"table": table}
    if kind == "gather":
        a = tensor(rng.normal(size=(m, n)), name="a")
        ids = rng.integers(0, n, size=(m,))
        return lambda: T.sum_(T.gather(a, ids)), {"a": a}
    if kind == "slice":
        a = tensor(rng.normal(size=(m, n + 2)), name="a")
        return lambda: T.sum_(T.tanh(T.slice_last(a, 1, n + 1))), {"a": a}
    if kind == "reshape":
        a = tensor(rng.normal(size=(m, n)), name="a")
        return lambda: T.sum_(T.tanh(T.reshape(a, (int(m * n),)))), {"a": a}
    raise AssertionError(kind)


FD_KINDS = [
    "matmul", "matmul-3d", "matmul-vec", "add-broadcast", "elementwise-mul",
    "tanh", "sigmoid", "softmax", "log-softmax", "log", "max-with-zero",
    "sum-axis", "concat", "embed-lookup", "gather", "slice", "reshape",
]


class TestFiniteDifferenceProperty:
    @pytest.mark.parametrize("kind", FD_KINDS)
    def test_every_primitive_agrees_with_finite_differences(self, kind):
        rng = np.random.default_rng(hash(kind) % 2**32)
        for trial in range(3):
            builder, params = _random_fd_case(kind, rng)
            report = gradient_check(builder, params, step=1e-6, tol=1e-4)
            assert report.passed, (kind, trial, [(e.name, e.max_rel_err) for e in report.entries])

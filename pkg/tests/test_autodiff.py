import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from adadiff.autodiff import (
    Adam, AutodiffError, NonFiniteError, ParamStore, RngStream, ShapeError, Tape, Tensor, adam_step,
    apply, backward, grad_check, no_grad, op_kinds, ops, stream_id,
)

from _cases import op_cases


def tracked(a, name="x"):
    return Tensor(np.asarray(a, dtype=np.float64), grad_tracked=True, name=name)


# -- forward oracles ----------------------------------------------------------------

def test_conv1d_identity_kernel(rng):
    x = rng.normal(size=(2, 3, 7))
    w = np.zeros((3, 3, 3))
    for c in range(3):
        w[c, c] = [0, 1, 0]
    for d in (1, 2, 4):
        out = ops.conv1d(x, w, np.zeros(3), dilation=d)
        np.testing.assert_array_equal(out.data, x)


def test_conv1d_matches_direct_sum(rng):
    x = rng.normal(size=(1, 2, 9))
    w = rng.normal(size=(3, 2, 3))
    b = rng.normal(size=3)
    d = 2
    out = ops.conv1d(x, w, b, dilation=d).data
    pad = np.pad(x, ((0, 0), (0, 0), (d, d)))
    ref = np.zeros((1, 3, 9))
    for o in range(3):
        for t in range(9):
            ref[0, o, t] = b[o] + sum(w[o, i, k] * pad[0, i, t + k * d] for i in range(2) for k in range(3))
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_conv1d_keeps_length_and_rejects_even_kernel(rng):
    x = rng.normal(size=(1, 2, 5))
    assert ops.conv1d(x, rng.normal(size=(4, 2, 5)), np.zeros(4), dilation=3).shape == (1, 4, 5)
    with pytest.raises(ShapeError):
        ops.conv1d(x, rng.normal(size=(4, 2, 2)), np.zeros(4))


def test_layer_norm_hand_value():
    out = ops.layer_norm(np.array([1.0, 2.0, 3.0]), eps=0.0).data
    np.testing.assert_allclose(out, [-1.2247448713915890, 0.0, 1.2247448713915890], rtol=1e-12)


def test_matmul_identity(rng):
    x = rng.normal(size=(3, 3))
    np.testing.assert_array_equal(ops.matmul(np.eye(3), x).data, x)


def test_softmax_rows_sum_to_one(rng):
    s = ops.softmax(rng.normal(size=(4, 6)) * 10).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-12)


def test_gated_tanh_sigmoid_splits_channels(rng):
    x = rng.normal(size=(2, 6, 3))
    out = ops.gated_tanh_sigmoid(x, axis=1).data
    np.testing.assert_allclose(out, np.tanh(x[:, :3]) / (1 + np.exp(-x[:, 3:])), rtol=1e-12)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_unknown_op():
    with pytest.raises(AutodiffError):
        apply("conv2d", (np.ones(2),))


def test_required_op_set_registered():
    required = {"matmul", "conv1d", "layer_norm", "affine", "add", "concat", "tanh", "sigmoid", "relu",
                "gated_tanh_sigmoid", "softmax", "embedding_lookup", "mean", "sum", "mse", "weighted_mse"}
    assert required <= set(op_kinds())


# -- backward contract ---------------------------------------------------------------

def test_sum_gradient_is_ones():
    with Tape():
        x = tracked(np.arange(6.0).reshape(2, 3))
        g = backward(ops.sum(x))
    np.testing.assert_array_equal(g["x"], np.ones((2, 3)))


def test_mse_gradient_textbook(rng):
    p_val, t_val = rng.normal(size=5), rng.normal(size=5)
    with Tape():
        p = tracked(p_val, "p")
        g = backward(ops.mse(p, t_val))
    np.testing.assert_allclose(g["p"], 2 * (p_val - t_val) / 5, rtol=1e-12)


def test_unreached_leaf_gets_zero():
    with Tape():
        x, y = tracked([1.0, 2.0], "x"), tracked([3.0], "y")
        g = backward(ops.sum(x), {"x": x, "y": y})
    np.testing.assert_array_equal(g["y"], [0.0])


def test_stale_same_named_leaf_does_not_shadow_live_one():
    with Tape():
        ops.sum(tracked([5.0], "w"))  # abandoned forward pass
        w = tracked([3.0], "w")
        g = backward(ops.sum(ops.scale(w, 2.0)))
        assert g["w"].tolist() == [2.0]
    with Tape():
        ops.sum(tracked([5.0], "w"))
        w = tracked([3.0], "w")
        g = backward(ops.sum(ops.scale(w, 2.0)), {"w": w})
        assert g["w"].tolist() == [2.0]


def test_non_scalar_loss_rejected():
    with Tape():
        x = tracked([1.0, 2.0])
        with pytest.raises(ShapeError):
            backward(ops.scale(x, 2.0))


def test_double_backward_rejected():
    with Tape():
        x = tracked([1.0, 2.0])
        loss = ops.sum(x)
        backward(loss)
        with pytest.raises(AutodiffError):
            backward(loss)


def test_untracked_loss_rejected():
    with pytest.raises(AutodiffError):
        backward(ops.sum(Tensor([1.0])))


def test_no_grad_records_nothing():
    with Tape() as tape:
        x = tracked([1.0, 2.0])
        with no_grad():
            y = ops.sum(x)
    assert len(tape) == 0 and not y.grad_tracked


def test_tape_is_topological():
    with Tape() as tape:
        x = tracked([1.0, 2.0])
        ops.sum(ops.tanh(ops.scale(x, 3.0)))
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.grad_tracked and inp.name is None:
                assert inp._id in seen
        seen.add(node.output._id)


def test_gradient_accumulates_over_reuse():
    with Tape():
        x = tracked([2.0])
        g = backward(ops.sum(ops.mul(x, x)))
    np.testing.assert_allclose(g["x"], [4.0])


# -- gradient checks -------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_every_op_gradient(seed):
    for name, fn, point in op_cases(np.random.default_rng(seed)):
        rep = grad_check(fn, point)
        assert rep.max_rel_error < 1e-4, (name, seed, rep)


def test_gradcheck_flags_kink():
    rep = grad_check(lambda x: ops.sum(ops.abs(x)), [np.array([0.0, 1.0])])
    assert rep.nondifferentiable == [(0, 0)] and rep.max_rel_error < 1e-8


def test_gradcheck_detects_wrong_gradient():
    from adadiff.autodiff.tensor import register

    @register("bad_square")
    def _bad(xs, needs):
        (x,) = xs
        return x * x, lambda g: (g * x,)  # missing factor 2

    rep = grad_check(lambda x: ops.sum(apply("bad_square", (x,))), [np.array([1.0, 2.0])])
    assert rep.max_rel_error > 0.4


# -- invariants (property based) ----------------------------------------------------------

small = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                   elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(small)
def test_layer_norm_is_shift_and_scale_invariant(x):
    if np.ptp(x, axis=-1).min() < 1e-3:
        return
    a = ops.layer_norm(x, eps=0.0).data
    b = ops.layer_norm(3.0 * x + 5.0, eps=0.0).data
    np.testing.assert_allclose(a, b, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(small)
def test_add_broadcast_gradient_has_input_shape(x):
    with Tape():
        a = tracked(x, "a")
        b = tracked(np.ones(x.shape[-1:]), "b")
        g = backward(ops.sum(ops.add(a, b)))
    assert g["b"].shape == b.shape
    np.testing.assert_allclose(g["b"], x.size / x.shape[-1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(0, 2**63 - 1))
def test_rng_stream_reproducible(seed, stream):
    a = RngStream(seed, stream).normal((4,))
    b = RngStream(seed, stream).normal((4,))
    np.testing.assert_array_equal(a, b)


# -- rng, params, optimizer ---------------------------------------------------------------

def test_rng_streams_differ_and_counter_pins_position():
    a = RngStream(1, stream_id("a"))
    b = RngStream(1, stream_id("b"))
    assert not np.array_equal(a.normal((8,)), b.normal((8,)))
    r = RngStream(5, 9)
    r.normal((3,))
    c = r.counter
    x = r.normal((4,))
    np.testing.assert_array_equal(RngStream(5, 9, counter=c).normal((4,)), x)


def test_param_store_names_unique_and_masks():
    P = ParamStore()
    P.add("a.w", np.zeros((2, 2)))
    P.add("b.w", np.zeros(3))
    with pytest.raises(KeyError):
        P.add("a.w", np.zeros(1))
    P.set_trainable({"a.w": True})
    assert P.trainable_mask() == {"a.w": True, "b.w": False}
    assert P.count(trainable_only=True) == 4 and P.count() == 7
    with pytest.raises(KeyError):
        P.set_trainable({"zzz": True})


def test_adam_first_step_hand_value():
    # first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    P = ParamStore()
    P.add("w", np.array([1.0, -2.0], np.float64))
    adam = Adam(lr=0.1, beta1=0.9, beta2=0.98, eps=1e-9)
    adam.step(P, {"w": np.array([0.5, -4.0])})
    np.testing.assert_allclose(P["w"].data, [1.0 - 0.1, -2.0 + 0.1], rtol=1e-8)


def test_adam_second_step_hand_value():
    P = ParamStore()
    P.add("w", np.array([0.0]))
    m, v = {}, {}
    adam_step(P, {"w": np.array([1.0])}, 0.01, 0.9, 0.98, 0.0, 1, m, v)
    adam_step(P, {"w": np.array([3.0])}, 0.01, 0.9, 0.98, 0.0, 2, m, v)
    m2 = 0.9 * 0.1 + 0.1 * 3.0
    v2 = 0.98 * 0.02 + 0.02 * 9.0
    step2 = 0.01 * (m2 / (1 - 0.81)) / np.sqrt(v2 / (1 - 0.98 ** 2))
    np.testing.assert_allclose(P["w"].data, [-0.01 - step2], rtol=1e-10)


def test_adam_skips_frozen_and_requires_trainable_grads():
    P = ParamStore()
    P.add("a", np.array([1.0]))
    P.add("b", np.array([1.0]), trainable=False)
    Adam(lr=0.1).step(P, {"a": np.array([1.0])})
    assert P["b"].data[0] == 1.0 and P["a"].data[0] != 1.0
    with pytest.raises(KeyError):
        Adam().step(P, {})

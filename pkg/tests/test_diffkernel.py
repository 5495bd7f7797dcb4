import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from featboost import diffkernel as dk
from featboost import oracles
from featboost.errors import DegenerateVectorError, EvaluationError, ShapeError


def test_tensor2_requires_2d():
    with pytest.raises(ShapeError):
        dk.Tensor2(np.zeros(3))
    t = dk.tensor([1.0, 2.0])
    assert t.shape == (1, 2)


def test_affine_identity():
    out = dk.affine(dk.tensor(np.eye(2)), dk.tensor(np.eye(2)), dk.tensor(np.zeros((1, 2))))
    assert np.array_equal(out.data, np.eye(2))


def test_affine_zero_input_gives_bias_rows():
    w = dk.tensor(np.random.default_rng(0).normal(size=(3, 2)))
    out = dk.affine(dk.tensor(np.zeros((4, 3))), w, dk.tensor([[1.0, 2.0]]))
    assert np.array_equal(out.data, np.tile([1.0, 2.0], (4, 1)))


def test_affine_matches_triple_loop_oracle(rng):
    x = rng.uniform(-2, 2, (3, 2))
    w = rng.uniform(-2, 2, (2, 4))
    b = rng.uniform(-1, 1, (1, 4))
    got = dk.affine(dk.tensor(x), dk.tensor(w), dk.tensor(b)).data
    want = oracles.matmul_triple_loop(x, w) + b
    assert np.abs(got - want).max() <= 1e-13


def test_affine_shape_mismatch():
    with pytest.raises(ShapeError):
        dk.affine(dk.tensor(np.zeros((2, 3))), dk.tensor(np.zeros((4, 2))),
                  dk.tensor(np.zeros((1, 2))))


def test_activation_values():
    assert dk.sigmoid(dk.tensor([[0.0]])).item() == 0.5
    assert dk.tanh_act(dk.tensor([[0.0]])).item() == 0.0
    assert dk.relu(dk.tensor([[-3.2]])).item() == 0.0
    assert dk.relu(dk.tensor([[1.5]])).item() == 1.5


def test_softmax_single_row_is_ones():
    out = dk.softmax_over_context(dk.tensor([[0.3, -5.0, 2.0]]))
    assert np.array_equal(out.data, np.ones((1, 3)))


def test_softmax_constant_column_uniform():
    out = dk.softmax_over_context(dk.tensor(np.full((5, 2), 1.7)))
    assert np.allclose(out.data, 0.2, atol=1e-15)


def test_softmax_matches_direct_oracle(rng):
    k = rng.uniform(-2, 2, (3, 2))
    got = dk.softmax_over_context(dk.tensor(k)).data
    assert np.abs(got - oracles.softmax_columns_direct(k)).max() <= 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 3),
              elements=st.floats(min_value=-1e300, max_value=1e300,
                                 allow_nan=False, allow_infinity=False)))
def test_softmax_columns_sum_to_one_for_all_finite_inputs(k):
    out = dk.softmax_over_context(dk.tensor(k))
    assert np.isfinite(out.data).all()
    assert np.abs(out.data.sum(axis=0) - 1.0).max() <= 1e-12


def test_l2_normalize_three_four():
    out = dk.l2_normalize(dk.tensor([[3.0, 4.0]]))
    assert np.allclose(out.data, [[0.6, 0.8]], atol=1e-15)


def test_l2_normalize_idempotent_on_unit_rows(rng):
    x = rng.normal(size=(3, 5))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    out = dk.l2_normalize(dk.tensor(x))
    assert np.abs(out.data - x).max() <= 1e-12


def test_l2_normalize_matches_summation_oracle(rng):
    x = rng.uniform(-2, 2, (1, 8))
    out = dk.l2_normalize(dk.tensor(x))
    assert np.abs(np.linalg.norm(out.data) - 1.0) <= 1e-9
    assert np.abs(out.data - x / oracles.norm_by_summation(x)).max() <= 1e-12


def test_l2_normalize_rejects_near_zero():
    with pytest.raises(DegenerateVectorError):
        dk.l2_normalize(dk.tensor([[1e-13, 0.0]]))


def test_layer_norm_constant_row_gives_bias():
    gain = dk.tensor(np.full((1, 4), 2.0))
    bias = dk.tensor([[1.0, 2.0, 3.0, 4.0]])
    out = dk.layer_norm(dk.tensor(np.full((2, 4), 7.0)), gain, bias)
    assert np.allclose(out.data, np.tile(bias.data, (2, 1)), atol=1e-12)


def test_layer_norm_fixpoint_on_normalized_row(rng):
    x = rng.normal(size=(1, 64))
    x = (x - x.mean()) / x.std()
    out = dk.layer_norm(dk.tensor(x), dk.tensor(np.ones((1, 64))),
                        dk.tensor(np.zeros((1, 64))))
    assert np.abs(out.data - x).max() <= 1e-4  # eps=1e-5 shifts the scale slightly


def test_layer_norm_matches_two_pass_oracle(rng):
    x = rng.uniform(-2, 2, (3, 6))
    gain = rng.uniform(0.5, 1.5, (1, 6))
    bias = rng.uniform(-1, 1, (1, 6))
    got = dk.layer_norm(dk.tensor(x), dk.tensor(gain), dk.tensor(bias)).data
    want = oracles.layer_norm_two_pass(x, gain, bias)
    assert np.abs(got - want).max() <= 1e-12


# ---------------------------------------------------------------------------
# gradient machinery


def test_grad_check_quadratic_exact():
    x = dk.tensor([[3.0]])
    err = dk.grad_check(lambda: dk.mul(x, x), [x])
    assert err < 1e-8


def test_grad_check_sigmoid_sum(rng):
    x = dk.tensor(rng.uniform(-2, 2, (3, 4)))
    err = dk.grad_check(lambda: dk.sum_all(dk.sigmoid(x)), [x])
    assert err < 1e-6


def test_grad_check_raises_on_nonfinite():
    x = dk.tensor([[np.inf]])
    with pytest.raises(EvaluationError):
        dk.grad_check(lambda: dk.mul(x, x), [x])


def test_every_primitive_passes_grad_check():
    # 100-seed sweep per primitive lives in the acceptance suite; this is a
    # faster regression pass over the same cases
    from featboost.verify import OP_TOL, generic_grad_check, primitive_cases
    for name, make in primitive_cases():
        worst = max(generic_grad_check(make, seed) for seed in range(5))
        assert worst <= OP_TOL, f"{name}: {worst}"


def test_composition_matches_manual_chain_rule(rng):
    # y = sum(sigmoid(x @ w)); compare the tape against hand-derived grads
    x = rng.uniform(-1, 1, (2, 3))
    w = rng.uniform(-1, 1, (3, 2))
    xt, wt = dk.tensor(x), dk.tensor(w)
    with dk.GradTape() as tape:
        s = dk.sigmoid(dk.matmul(xt, wt))
        loss = dk.sum_all(s)
    tape.gradient(loss)
    sig = 1.0 / (1.0 + np.exp(-(x @ w)))
    dpre = sig * (1 - sig)
    assert np.allclose(wt.grad, x.T @ dpre, atol=1e-12)
    assert np.allclose(xt.grad, dpre @ w.T, atol=1e-12)


def test_backward_of_sum_equals_sum_of_backwards(rng):
    x = rng.uniform(-1, 1, (3, 3))

    def grad_of(fn):
        xt = dk.tensor(x.copy())
        with dk.GradTape() as tape:
            loss = fn(xt)
        tape.gradient(loss)
        return xt.grad.copy()

    g_sum = grad_of(lambda t: dk.add(dk.sum_all(dk.relu(t)), dk.sum_all(dk.mul(t, t))))
    g_parts = grad_of(lambda t: dk.sum_all(dk.relu(t))) + grad_of(lambda t: dk.sum_all(dk.mul(t, t)))
    assert np.allclose(g_sum, g_parts, atol=1e-12)


def test_tape_is_single_owner():
    x = dk.tensor([[1.0]])
    with dk.GradTape() as tape:
        loss = dk.mul(x, x)
        with pytest.raises(RuntimeError):
            with dk.GradTape():
                pass
    tape.gradient(loss)
    with pytest.raises(RuntimeError):
        tape.gradient(loss)


def test_pause_tape_blocks_recording():
    x = dk.tensor([[2.0]])
    with dk.GradTape() as tape:
        with dk.pause_tape():
            dk.mul(x, x)
        loss = dk.add_const(dk.mul(x, x), 1.0)
    tape.gradient(loss)
    assert x.grad[0, 0] == 4.0


def test_forward_determinism_bit_identical(rng):
    x = rng.uniform(-2, 2, (4, 4))

    def run():
        r = np.random.default_rng(7)
        t = dk.tensor(x * r.uniform(0.5, 1.5))
        return dk.softmax_over_context(dk.sigmoid(dk.mul(t, t))).data.tobytes()

    assert run() == run()


def test_backward_fault_hook_breaks_gradcheck():
    rng = np.random.default_rng(0)
    x = dk.tensor(rng.uniform(-2, 2, (3, 3)))
    dk.set_backward_fault("sigmoid")
    try:
        err = dk.grad_check(lambda: dk.sum_all(dk.sigmoid(x)), [x])
    finally:
        dk.set_backward_fault(None)
    assert err > 1e-4

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from signctx.errors import (
    DegenerateMaskError,
    DimensionError,
    EmptyDimensionError,
    NonFiniteError,
    UndefinedMeanError,
    UninitializedGradientError,
    VocabularyError,
)
from signctx.numerics import (
    LayerNorm,
    Linear,
    Parameter,
    Tensor,
    adam_step,
    clip_grad_norm,
    cross_entropy_label_smoothed,
    dropout,
    embedding_lookup,
    exp,
    gradient_check,
    layer_norm,
    linear_forward,
    log,
    masked_softmax,
    matmul,
    no_grad,
    relu,
    softmax,
    tensor_mean,
    tensor_sum,
)


def triple_loop(x, w, b):
    n, k = len(x), len(w[0])
    out = [[0.0] * k for _ in range(n)]
    for i in range(n):
        for j in range(k):
            acc = 0.0
            for m in range(len(w)):
                acc += x[i][m] * w[m][j]
            out[i][j] = acc + b[j]
    return out


# --- linear ---------------------------------------------------------------


def test_linear_identity_input():
    y = linear_forward(Tensor(np.eye(2)), Tensor([[2.0, 3.0], [4.0, 5.0]]), Tensor([0.0, 0.0]))
    assert y.data.tolist() == [[2.0, 3.0], [4.0, 5.0]]


def test_linear_identity_weight_plus_bias():
    y = linear_forward(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([10.0, 20.0]))
    assert y.data.tolist() == [[11.0, 22.0]]


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(0)
    # integers keep every partial sum exact, so the comparison can be exact
    x = rng.integers(-5, 6, size=(3, 4)).astype(float)
    w = rng.integers(-5, 6, size=(4, 2)).astype(float)
    b = rng.integers(-5, 6, size=2).astype(float)
    y = linear_forward(Tensor(x), Tensor(w), Tensor(b))
    assert y.data.tolist() == triple_loop(x.tolist(), w.tolist(), b.tolist())


def test_linear_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        linear_forward(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))), Tensor(np.zeros(2)))


def test_linear_leading_axes():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4))
    w, b = rng.normal(size=(4, 5)), rng.normal(size=5)
    y = linear_forward(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_array_equal(y.data[1], linear_forward(Tensor(x[1]), Tensor(w), Tensor(b)).data)


# --- layer norm -------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    y = layer_norm(Tensor(np.zeros(4)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert y.data.tolist() == [0.0, 0.0, 0.0, 0.0]


def test_layer_norm_two_point_row():
    y = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    assert y.data[0] == pytest.approx(expected, abs=1e-15)
    assert y.data[1] == pytest.approx(-expected, abs=1e-15)


def test_layer_norm_direct_formula():
    row = [1.0, 2.0, 3.0, 4.0]
    mu = sum(row) / 4
    var = sum((v - mu) ** 2 for v in row) / 4
    expected = [(v - mu) / math.sqrt(var + 1e-5) for v in row]
    y = layer_norm(Tensor(row), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(y.data, expected, rtol=0, atol=1e-12)


def test_layer_norm_empty_dimension():
    with pytest.raises(EmptyDimensionError):
        layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 8), elements=st.floats(-100, 100)))
def test_layer_norm_statistics(row):
    var = row.var()
    if var < 1e-3:
        return
    y = layer_norm(Tensor(row), Tensor(np.ones(row.size)), Tensor(np.zeros(row.size))).data
    assert abs(y.mean()) <= 1e-10
    assert y.var() == pytest.approx(var / (var + 1e-5), abs=1e-6)


# --- softmax ----------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_input_is_stable():
    y = softmax(Tensor([1000.0, 0.0])).data
    assert y[0] == pytest.approx(1.0) and y[1] < 1e-300 + 1e-12


def test_softmax_direct_oracle():
    e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
    expected = [v / sum(e) for v in e]
    y = softmax(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(y, expected, atol=1e-15)
    np.testing.assert_allclose(y, [0.09003057, 0.24472847, 0.66524096], atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-1000, 1000)))
def test_softmax_rows_sum_to_one(x):
    y = softmax(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_masked_softmax_zeroes_masked_positions():
    y = masked_softmax(Tensor([[1.0, 2.0, 3.0]]), np.array([[True, False, True]])).data
    assert y[0, 1] == 0.0
    np.testing.assert_allclose(y[0, [0, 2]], softmax(Tensor([1.0, 3.0])).data, atol=1e-15)


def test_masked_softmax_rejects_empty_row():
    with pytest.raises(DegenerateMaskError):
        masked_softmax(Tensor(np.zeros((2, 3))), np.array([[True, True, False], [False, False, False]]))


# --- cross entropy ------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    loss = cross_entropy_label_smoothed(Tensor(np.zeros((1, 4))), [2], smoothing=0.0, pad_id=0)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_perfect_prediction():
    logits = np.full((1, 4), -50.0)
    logits[0, 1] = 50.0
    assert cross_entropy_label_smoothed(Tensor(logits), [1], 0.0, pad_id=0).item() < 1e-30 + 1e-12


def test_cross_entropy_uniform_prediction_ignores_smoothing():
    loss = cross_entropy_label_smoothed(Tensor(np.zeros((1, 3))), [0], smoothing=0.1, pad_id=-1)
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)


def test_cross_entropy_hand_expansion():
    logits = np.array([[2.0, 0.5, -1.0]])
    z = sum(math.exp(v) for v in logits[0])
    logp = [v - math.log(z) for v in logits[0]]
    s = 0.2
    expected = -((1 - s) * logp[1] + s / 2 * logp[0] + s / 2 * logp[2])
    assert cross_entropy_label_smoothed(Tensor(logits), [1], s, pad_id=-1).item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_excludes_pads():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 5))
    full = cross_entropy_label_smoothed(Tensor(logits), [3, 4, 0, 0], 0.1, pad_id=0).item()
    part = cross_entropy_label_smoothed(Tensor(logits[:2]), [3, 4], 0.1, pad_id=0).item()
    assert full == pytest.approx(part, abs=1e-14)


def test_cross_entropy_all_pad():
    with pytest.raises(UndefinedMeanError):
        cross_entropy_label_smoothed(Tensor(np.zeros((2, 3))), [0, 0], 0.1, pad_id=0)


# --- adam ---------------------------------------------------------------------


def scalar_adam(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
    return x


def test_adam_zero_gradient_is_identity():
    p = Parameter([1.0, -2.0])
    p.grad = np.zeros(2)
    adam_step([p], lr=1e-3)
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_first_step_magnitude():
    p = Parameter([0.5])
    p.grad = np.array([1.0])
    adam_step([p], lr=1e-3)
    delta = abs(p.data[0] - 0.5)
    assert 0.99e-3 < delta <= 1e-3


def test_adam_matches_scalar_oracle():
    p = Parameter([0.3])
    for _ in range(2):
        p.grad = np.array([0.7])
        adam_step([p], lr=0.01)
    assert p.data[0] == pytest.approx(scalar_adam(0.3, [0.7, 0.7], 0.01), abs=1e-12)
    assert p.step_count == 2 and p.grad is None


def test_adam_zero_lr_identity():
    rng = np.random.default_rng(0)
    p = Parameter(rng.normal(size=(3, 2)))
    before = p.data.copy()
    p.grad = rng.normal(size=(3, 2))
    adam_step([p], lr=0.0)
    np.testing.assert_array_equal(p.data, before)


def test_adam_missing_gradient_names_parameter():
    p = Parameter([1.0], name="enc.w")
    with pytest.raises(UninitializedGradientError, match="enc.w"):
        adam_step([p], lr=1e-3)


def test_clip_grad_norm():
    p = Parameter([0.0, 0.0])
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0, rtol=1e-9)


# --- autodiff -----------------------------------------------------------------


def test_gradient_check_quadratic():
    p = Parameter([0.5, -1.5, 2.0])
    assert gradient_check(lambda: tensor_sum(p * p), [p]) <= 1e-8
    tensor_sum(p * p).backward()
    np.testing.assert_allclose(p.grad, 2 * p.data)


def test_gradient_check_cross_entropy():
    rng = np.random.default_rng(3)
    p = Parameter(rng.normal(size=(2, 3)))
    assert gradient_check(lambda: cross_entropy_label_smoothed(p, [1, 2], 0.1, pad_id=0), [p]) <= 1e-6


@pytest.mark.parametrize(
    "build",
    [
        lambda a, b: tensor_mean(matmul(a, b.transpose()) * 0.5),
        lambda a, b: tensor_sum(exp(a * 0.1) * b),
        lambda a, b: tensor_sum(log(a * a + 1.0) - b),
        lambda a, b: tensor_sum(relu(a - b) * a),
        lambda a, b: tensor_sum(softmax(a) * b),
        lambda a, b: tensor_sum(masked_softmax(a, np.array([True, False, True, True])) * b),
        lambda a, b: tensor_sum((a / (b * b + 1.0)) ** 2),
        lambda a, b: tensor_sum(a.reshape(2, 2, 4).transpose(1, 0, 2).sum(axis=0) * 2.0),
    ],
)
def test_elementary_gradients(build):
    rng = np.random.default_rng(11)
    a = Parameter(rng.normal(size=(4, 4)))
    b = Parameter(rng.normal(size=(4, 4)))
    assert gradient_check(lambda: build(a, b), [a, b]) <= 1e-6


def test_layer_modules_gradients():
    rng = np.random.default_rng(4)
    lin, ln = Linear(rng, 5, 3), LayerNorm(3)
    ln.gain.data[...] = rng.normal(size=3)
    x = Parameter(rng.normal(size=(2, 5)))
    target = rng.normal(size=(2, 3))

    def f():
        return tensor_sum((ln(lin(x)) - target) ** 2)

    assert gradient_check(f, [x, lin.weight, lin.bias, ln.gain, ln.bias]) <= 1e-6


def test_embedding_scatter_accumulates():
    table = Parameter(np.arange(12, dtype=float).reshape(4, 3))
    rows = embedding_lookup(table, [2, 2])
    np.testing.assert_array_equal(rows.data, [[6, 7, 8], [6, 7, 8]])
    tensor_sum(rows).backward()
    np.testing.assert_array_equal(table.grad, [[0, 0, 0], [0, 0, 0], [2, 2, 2], [0, 0, 0]])


def test_embedding_out_of_range():
    with pytest.raises(VocabularyError) as exc:
        embedding_lookup(Parameter(np.zeros((4, 2))), [1, 9])
    assert exc.value.token_id == 9


def test_backward_is_linear_in_losses():
    rng = np.random.default_rng(5)
    p = Parameter(rng.normal(size=(3,)))
    f1 = lambda: tensor_sum(p * p)  # noqa: E731
    f2 = lambda: tensor_sum(exp(p))  # noqa: E731
    f1().backward()
    g1 = p.grad.copy()
    p.grad = None
    f2().backward()
    g2 = p.grad.copy()
    p.grad = None
    (f1() + f2()).backward()
    np.testing.assert_allclose(p.grad, g1 + g2, atol=1e-14)


def test_gradients_accumulate_across_uses():
    p = Parameter([2.0])
    tensor_sum(p * p + p * 3.0).backward()
    assert p.grad.tolist() == [7.0]


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        log(Tensor([0.0]))


def test_no_grad_records_nothing():
    p = Parameter([1.0])
    with no_grad():
        y = p * 2.0
    assert not y.requires_grad


def test_dropout_eval_is_identity_and_train_is_inverted():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((200, 50)))
    assert dropout(x, 0.1, rng, training=False) is x
    y = dropout(x, 0.1, rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.9}
    assert abs(y.mean() - 1.0) < 0.02

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from irdfusion.kernel import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    bce_with_logits,
    concat_last,
    dot,
    dropout,
    exp,
    finite_diff_check,
    gelu,
    layer_norm,
    matmul,
    mean_all,
    mean_last,
    mul,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def mat(rows=st.integers(1, 6), cols=st.integers(1, 6)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m).data, m)


def test_matmul_manual_expansion():
    # 1*3 + 2*4
    assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


# ----------------------------------------------------------------- softmax


def test_softmax_zero_row_is_uniform():
    assert np.array_equal(softmax_rows(np.zeros((1, 4))).data, np.full((1, 4), 0.25))


def test_softmax_saturates_without_overflow():
    out = softmax_rows([[1000.0, 0.0]]).data
    assert abs(out[0, 0] - 1.0) < 1e-12 and abs(out[0, 1]) < 1e-12


def test_softmax_random_rows_sum_to_one():
    x = np.random.default_rng(0).normal(size=(8, 8)) * 5
    sums = softmax_rows(x).data.sum(axis=1)
    assert np.max(np.abs(sums - 1.0)) < 1e-12


@given(mat())
def test_softmax_row_stochastic(x):
    assert np.all(np.abs(softmax_rows(x).data.sum(axis=-1) - 1.0) < 1e-12)


@given(mat(), finite)
def test_softmax_shift_invariant(x, c):
    a = softmax_rows(x).data
    b = softmax_rows(x + c).data
    assert np.max(np.abs(a - b)) < 1e-12


# -------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_collapses_to_beta():
    out = layer_norm(np.full((1, 5), 3.0), np.ones(5), np.zeros(5), 1e-5).data
    assert np.array_equal(out, np.zeros((1, 5)))


def test_layer_norm_zero_input_gives_beta():
    out = layer_norm(np.zeros((2, 4)), np.ones(4), np.full(4, 5.0)).data
    assert np.array_equal(out, np.full((2, 4), 5.0))


def test_layer_norm_moments():
    x = np.random.default_rng(1).normal(size=(6, 16)) * 3 + 2
    out = layer_norm(x, np.ones(16), np.zeros(16), 1e-5).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-12
    expected = x.var(axis=1) / (x.var(axis=1) + 1e-5)
    assert np.max(np.abs(out.var(axis=1) - expected)) < 1e-12


@given(arrays(np.float64, (3, 7), elements=st.floats(-20, 20)))
def test_layer_norm_statistics_property(x):
    # only rows whose variance dwarfs eps are expected to standardize exactly
    x = x[x.var(axis=1) > 1e-1]
    if x.size == 0:
        return
    out = layer_norm(x, np.ones(7), np.zeros(7), 1e-5).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-12
    expected = x.var(axis=1) / (x.var(axis=1) + 1e-5)
    assert np.max(np.abs(out.var(axis=1) - expected)) < 1e-9


@given(arrays(np.float64, (4, 9), elements=st.floats(-100, 100)))
def test_layer_norm_unit_variance_when_input_variance_dominates(x):
    x = x[x.var(axis=1) >= 10.0]
    if x.size == 0:
        return
    out = layer_norm(x, np.ones(9), np.zeros(9), 1e-5).data
    assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-6


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        layer_norm(np.ones((1, 2)), np.ones(2), np.zeros(2), 0.0)


# ----------------------------------------------------------------- dropout


def test_dropout_eval_is_identity():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert dropout(t, 0.5, "eval", None).data is t.data


def test_dropout_p_zero_train_is_identity():
    t = Tensor(np.arange(6.0))
    assert np.array_equal(dropout(t, 0.0, "train", np.random.default_rng(0)).data, t.data)


def test_dropout_survivor_fraction_and_mean():
    rng = np.random.default_rng(42)
    x = rng.uniform(1.0, 2.0, size=100_000)
    out = dropout(x, 0.5, "train", rng).data
    frac = np.mean(out != 0.0)
    assert abs(frac - 0.5) < 0.01
    assert abs(out.mean() - x.mean()) < 0.02 * x.mean()
    survivors = out != 0
    assert np.allclose(out[survivors], 2.0 * x[survivors])


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_probability(p):
    with pytest.raises(ValueError):
        dropout(np.ones(3), p, "train", np.random.default_rng(0))


# ---------------------------------------------------------------- backward


def test_backward_linear_map_gradient_is_broadcast_input():
    x = np.array([[1.0], [-2.0], [0.5]])
    W = Parameter(np.random.default_rng(0).normal(size=(4, 3)), "W")
    with Tape() as tape:
        loss = sum_all(matmul(W.value, x))
    backward(loss, tape, [W])
    assert np.array_equal(W.grad.data, np.broadcast_to(x.T, (4, 3)))


def test_backward_softmax_sum_has_zero_gradient():
    z = Parameter(np.random.default_rng(3).normal(size=(5, 6)), "z")
    with Tape() as tape:
        loss = sum_all(softmax_rows(z.value))
    backward(loss, tape, [z])
    assert np.max(np.abs(z.grad.data)) < 1e-15


def test_backward_accumulates_across_calls():
    w = Parameter(np.array([1.0, 2.0]), "w")
    for _ in range(2):
        with Tape() as tape:
            loss = sum_all(mul(w.value, w.value))
        backward(loss, tape, [w])
    assert np.array_equal(w.grad.data, 2 * 2 * np.array([1.0, 2.0]))
    w.zero_grad()
    assert np.array_equal(w.grad.data, np.zeros(2))


def test_backward_rejects_non_scalar_loss():
    w = Parameter(np.ones(3), "w")
    with Tape() as tape:
        out = mul(w.value, 2.0)
    with pytest.raises(ShapeError):
        backward(out, tape, [w])


def test_cleared_tape_contributes_no_gradient():
    w = Parameter(np.ones(3), "w")
    with Tape() as tape:
        loss = sum_all(mul(w.value, w.value))
    tape.clear()
    backward(loss, tape, [w])
    assert np.array_equal(w.grad.data, np.zeros(3))


def test_adjoints_replay_in_reverse_recording_order():
    seen = []
    w = Parameter(np.array([0.5, -1.0]), "w")
    with Tape() as tape:
        a = scale(w.value, 2.0)
        b = exp(a)
        loss = sum_all(b)
    assert [rec[0] for rec in tape.records] == [a, b, loss]
    for i, (out, inputs, vjp) in enumerate(tape.records):
        def spy(g, _vjp=vjp, _out=out):
            seen.append(_out)
            return _vjp(g)
        tape.records[i] = (out, inputs, spy)
    backward(loss, tape, [w])
    assert seen == [loss, b, a]
    assert np.allclose(w.grad.data, 2.0 * np.exp(2.0 * w.value.data))


def test_no_tape_means_no_recording():
    t = Tape()
    add(np.ones(2), np.ones(2))
    assert len(t) == 0


def test_exp_overflow_raises():
    with pytest.raises(NonFiniteError):
        exp([1000.0])


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 4))
    a = softmax_rows(layer_norm(x, np.ones(4), np.zeros(4))).data
    b = softmax_rows(layer_norm(x, np.ones(4), np.zeros(4))).data
    assert a.tobytes() == b.tobytes()


# -------------------------------------------------------- gradient checking


def test_finite_diff_quadratic_is_exact():
    p = Parameter(np.random.default_rng(0).normal(size=(3, 4)), "p")
    assert finite_diff_check(lambda: sum_all(mul(p.value, p.value)), [p], 1e-5) < 1e-9


def test_finite_diff_matmul_softmax_chain():
    rng = np.random.default_rng(1)
    a = Parameter(rng.normal(size=(5, 3)), "a")
    b = Parameter(rng.normal(size=(3, 5)), "b")
    w = Tensor(rng.normal(size=(5, 5)))
    f = lambda: sum_all(mul(softmax_rows(matmul(a.value, b.value)), w))  # noqa: E731
    assert finite_diff_check(f, [a, b], 1e-5) < 1e-6


def _chain(kind, rng):
    """One composite function per primitive family, each feeding a random linear readout."""
    x = Parameter(rng.normal(size=(3, 4)), "x")
    y = Parameter(rng.normal(size=(4, 4)), "y")
    g = Parameter(rng.uniform(0.5, 1.5, size=4), "g")
    bt = Parameter(rng.normal(size=4) * 0.1, "bt")
    v = Parameter(rng.normal(size=4), "v")
    r = Tensor(rng.normal(size=(3, 4)))
    fns = {
        "matmul_transpose": lambda: sum_all(mul(matmul(x.value, transpose(y.value)), r)),
        "add_sub_mul": lambda: sum_all(mul(sub(mul(x.value, x.value), add(x.value, v.value)), r)),
        "exp_scale": lambda: sum_all(mul(exp(scale(x.value, 0.3)), r)),
        "layer_norm": lambda: sum_all(mul(layer_norm(x.value, g.value, bt.value), r)),
        "gelu_sigmoid": lambda: sum_all(mul(sigmoid(gelu(matmul(x.value, y.value))), r)),
        "reshape_concat_mean": lambda: mean_all(
            mul(reshape(concat_last(x.value, x.value), (3, 8)),
                Tensor(np.concatenate([r.data, -r.data * 2], axis=1)))),
        "dot_mean_last": lambda: add(sum_all(mul(mean_last(x.value), Tensor(r.data[:, 0]))),
                                     dot(v.value, g.value)),
        "bce": lambda: bce_with_logits(matmul(x.value, y.value), Tensor((r.data > 0).astype(float))),
        "softmax_layer_norm": lambda: sum_all(
            mul(softmax_rows(layer_norm(matmul(x.value, y.value), g.value, bt.value)), r)),
    }
    return fns[kind], [x, y, g, bt, v]


@pytest.mark.parametrize("kind", ["matmul_transpose", "add_sub_mul", "exp_scale", "layer_norm",
                                  "gelu_sigmoid", "reshape_concat_mean", "dot_mean_last", "bce",
                                  "softmax_layer_norm"])
def test_finite_diff_every_primitive(kind):
    f, params = _chain(kind, np.random.default_rng(zlib.crc32(kind.encode())))
    assert finite_diff_check(f, params, 1e-5) < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_finite_diff_random_compositions(seed):
    rng = np.random.default_rng(seed)
    x = Parameter(rng.normal(size=(3, 4)), "x")
    y = Parameter(rng.normal(size=(4, 4)) * 0.5, "y")
    r = Tensor(rng.normal(size=(3, 4)))
    ops = rng.choice(["softmax", "gelu", "ln", "mm", "sig"], size=3)

    def f():
        h = x.value
        for op in ops:
            if op == "softmax":
                h = softmax_rows(h)
            elif op == "gelu":
                h = gelu(h)
            elif op == "ln":
                h = layer_norm(h, np.ones(4), np.zeros(4))
            elif op == "mm":
                h = matmul(h, y.value)
            else:
                h = sigmoid(h)
        return sum_all(mul(h, r))

    # elements whose true gradient is ~0 make the relative measure ill-posed;
    # random compositions are scored on the gradient norm instead
    with Tape() as tape:
        loss = f()
    backward(loss, tape, [x, y])
    analytic = np.concatenate([x.grad.data.ravel(), y.grad.data.ravel()])
    numeric = []
    for p in (x, y):
        base = p.value.data.copy()
        for i in range(base.size):
            for sign in (1, -1):
                pert = base.copy().ravel()
                pert[i] += sign * 1e-5
                p.value = Tensor(pert.reshape(base.shape))
                if sign == 1:
                    fp = f().item()
                else:
                    fm = f().item()
            numeric.append((fp - fm) / 2e-5)
        p.value = Tensor(base)
    numeric = np.array(numeric)
    assert np.linalg.norm(analytic - numeric) <= 1e-5 * (np.linalg.norm(numeric) + 1e-8)

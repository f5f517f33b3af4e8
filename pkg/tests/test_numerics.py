"""Tensor/autodiff tests: every derived value comes from an independent oracle."""

import io

import mpmath
import numpy as np
import pytest

from synthvc import numerics as nm
from synthvc.errors import (
    ConfigError,
    DegenerateBatchError,
    DeterminismError,
    NumericsError,
    ShapeError,
)


def t(data, rg=False, dtype=None):
    return nm.Tensor(data, requires_grad=rg, dtype=dtype)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    eye = t(np.eye(2))
    m = t([[1.0, 2.0], [3.0, 4.0]])
    out = nm.matmul(eye, m)
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_orthogonal_selection():
    out = nm.matmul(t([[1.0, 0.0]]), t([[0.0], [5.0]]))
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_matmul_against_triple_loop_oracle():
    rng = np.random.default_rng(42)
    a = rng.normal(size=(3, 4)).astype(np.float32)
    b = rng.normal(size=(4, 2)).astype(np.float32)
    expect = np.zeros((3, 2), dtype=np.float32)
    for i in range(3):
        for j in range(2):
            acc = np.float32(0.0)
            for k in range(4):
                acc += a[i, k] * b[k, j]
            expect[i, j] = acc
    got = nm.matmul(t(a), t(b)).data
    np.testing.assert_allclose(got, expect, rtol=1e-6, atol=1e-7)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as ei:
        nm.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 2))))
    assert "(2, 3)" in str(ei.value) and "(4, 2)" in str(ei.value)


def test_matmul_batched_matches_per_slice():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 3, 4)).astype(np.float32)
    b = rng.normal(size=(5, 4, 2)).astype(np.float32)
    got = nm.matmul(t(a), t(b)).data
    for i in range(5):
        np.testing.assert_allclose(got[i], a[i] @ b[i], rtol=1e-6)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetry():
    out = nm.softmax(t([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_large_logit_no_overflow():
    out = nm.softmax(t([1000.0, 0.0]))
    assert np.isfinite(out.data).all()
    assert out.data[0] > 0.999 and out.data[1] < 1e-6


def test_softmax_against_mpmath_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(scale=3.0, size=5).astype(np.float32)
    with mpmath.workdps(60):
        es = [mpmath.e ** mpmath.mpf(float(v)) for v in x]
        z = sum(es)
        expect = np.array([float(e / z) for e in es])
    got = nm.softmax(t(x)).data
    assert np.abs(got - expect).max() < 1e-6


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    x = rng.normal(scale=5.0, size=(20, 9)).astype(np.float32)
    out = nm.softmax(t(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(20), atol=1e-6)


def test_softmax_monotone_in_inputs():
    x = np.array([0.1, 0.2, 0.3], dtype=np.float32)
    lo = nm.softmax(t(x)).data[1]
    x2 = x.copy()
    x2[1] += 0.5
    hi = nm.softmax(t(x2)).data[1]
    assert hi > lo


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_perfect_prediction():
    logits = np.full((3, 5), -30.0, dtype=np.float32)
    targets = [1, 4, 0]
    for i, tt in enumerate(targets):
        logits[i, tt] = 30.0
    loss = nm.cross_entropy(t(logits), targets)
    assert 0.0 <= loss.item() < 1e-4


def test_cross_entropy_uniform_is_log4():
    loss = nm.cross_entropy(t(np.zeros((6, 4), dtype=np.float32)), [0, 1, 2, 3, 0, 1])
    assert abs(loss.item() - np.log(4.0)) < 1e-6


def test_cross_entropy_against_manual_oracle():
    rng = np.random.default_rng(5)
    logits = rng.normal(scale=2.0, size=(3, 5)).astype(np.float32)
    targets = [2, 0, 4]
    # per-position -log p in float64, averaged by hand
    acc = 0.0
    for i, tt in enumerate(targets):
        row = logits[i].astype(np.float64)
        p = np.exp(row - row.max())
        p /= p.sum()
        acc += -np.log(p[tt])
    expect = acc / 3.0
    got = nm.cross_entropy(t(logits), targets).item()
    assert abs(got - expect) < 1e-6


def test_cross_entropy_mask_and_errors():
    logits = t(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(DegenerateBatchError):
        nm.cross_entropy(logits, [0, 1], mask=[False, False])
    z = nm.cross_entropy(logits, [0, 1], mask=[False, False], allow_empty=True)
    assert z.item() == 0.0 and getattr(z, "degenerate", False)
    with pytest.raises(IndexError):
        nm.cross_entropy(logits, [0, 3])
    # masked-out positions may carry junk targets
    ok = nm.cross_entropy(logits, [0, 99], mask=[True, False])
    assert abs(ok.item() - np.log(3.0)) < 1e-6


def test_cross_entropy_nonnegative():
    rng = np.random.default_rng(13)
    for _ in range(20):
        logits = rng.normal(size=(4, 6)).astype(np.float32)
        targets = rng.integers(0, 6, size=4)
        assert nm.cross_entropy(t(logits), targets).item() >= 0.0


# ---------------------------------------------------------------------------
# rms_norm


def test_rms_norm_constant_vector():
    out = nm.rms_norm(t([3.0, 3.0, 3.0, 3.0]), t(np.ones(4)))
    np.testing.assert_allclose(out.data, np.ones(4), atol=1e-4)


def test_rms_norm_zero_vector():
    out = nm.rms_norm(t(np.zeros(4)), t(np.ones(4)))
    np.testing.assert_array_equal(out.data, np.zeros(4))
    assert np.isfinite(out.data).all()


def test_rms_norm_unit_rms_property():
    rng = np.random.default_rng(23)
    for _ in range(10):
        x = rng.normal(scale=2.0, size=16).astype(np.float32)
        gain = rng.uniform(0.5, 2.0, size=16).astype(np.float32)
        out = nm.rms_norm(t(x), t(gain)).data
        rms = np.sqrt(np.mean((out / gain) ** 2))
        assert abs(rms - 1.0) < 1e-4


# ---------------------------------------------------------------------------
# rope


def test_rope_position_zero_is_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 4, 8)).astype(np.float32)
    out = nm.rope_apply(t(x), [0])
    np.testing.assert_array_equal(out.data, x)


def test_rope_preserves_norm():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 4, 8)).astype(np.float32)
    out = nm.rope_apply(t(x), np.arange(6)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-5)


def test_rope_relative_shift_invariance():
    rng = np.random.default_rng(9)
    for s in (1, 5, 17):
        q = rng.normal(size=(1, 8)).astype(np.float32)
        k = rng.normal(size=(1, 8)).astype(np.float32)
        m, n = 3, 7
        d0 = float(np.dot(nm.rope_apply(t(q), [m]).data[0], nm.rope_apply(t(k), [n]).data[0]))
        d1 = float(np.dot(nm.rope_apply(t(q), [m + s]).data[0], nm.rope_apply(t(k), [n + s]).data[0]))
        assert abs(d0 - d1) < 1e-5


def test_rope_odd_dim_rejected():
    with pytest.raises(ConfigError):
        nm.rope_apply(t(np.zeros((2, 3))), [0, 1])


# ---------------------------------------------------------------------------
# embedding lookup


def test_embedding_row_zero_exact():
    table = np.arange(12, dtype=np.float32).reshape(4, 3)
    out = nm.embedding_lookup(t(table), [0])
    np.testing.assert_array_equal(out.data[0], table[0])


def test_embedding_gather_vs_loop_oracle():
    rng = np.random.default_rng(21)
    table = rng.normal(size=(10, 4)).astype(np.float32)
    ids = rng.integers(0, 10, size=13)
    got = nm.embedding_lookup(t(table), ids).data
    for i, idx in enumerate(ids):
        np.testing.assert_array_equal(got[i], table[idx])


def test_embedding_repeated_id_grad_sums():
    table = nm.Tensor(np.zeros((5, 2), dtype=np.float32), requires_grad=True)
    tape = nm.Tape()
    with tape:
        rows = nm.embedding_lookup(table, [3, 3])
        w = nm.constant(np.array([[1.0, 2.0], [10.0, 20.0]], dtype=np.float32))
        loss = nm.sum_all(nm.mul(rows, w))
    grads = tape.backward(loss)
    g = tape.grad_for(grads, table)
    np.testing.assert_allclose(g[3], [11.0, 22.0])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        nm.embedding_lookup(t(np.zeros((4, 2))), [4])


# ---------------------------------------------------------------------------
# backward contracts


def test_backward_sum_gives_ones():
    x = nm.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    tape = nm.Tape()
    with tape:
        loss = nm.sum_all(x)
    g = tape.grad_for(tape.backward(loss), x)
    np.testing.assert_array_equal(g, np.ones((2, 3), dtype=np.float32))


def test_backward_dot_with_self():
    x = nm.Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32), requires_grad=True)
    tape = nm.Tape()
    with tape:
        loss = nm.sum_all(nm.mul(x, x))
    g = tape.grad_for(tape.backward(loss), x)
    np.testing.assert_allclose(g, 2.0 * x.data)


def test_backward_requires_scalar_loss():
    x = nm.Tensor(np.ones(3), requires_grad=True)
    tape = nm.Tape()
    with tape:
        y = nm.mul(x, x)
    with pytest.raises(NumericsError):
        tape.backward(y)


def test_backward_off_tape_loss_rejected():
    tape = nm.Tape()
    loss = nm.sum_all(nm.Tensor(np.ones(2), requires_grad=True))
    with pytest.raises(NumericsError):
        tape.backward(loss)


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(31)
    x = nm.Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
    w = nm.Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
    tape = nm.Tape()
    with tape:
        h = nm.silu(nm.matmul(x, w))
        loss = nm.mean_all(nm.mul(h, h))
    g1 = tape.backward(loss)
    g2 = tape.backward(loss)
    for k in g1:
        assert np.array_equal(g1[k].data, g2[k].data)


def test_backward_mlp_against_finite_differences():
    rng = np.random.default_rng(17)
    w1 = rng.normal(size=(5, 7)).astype(np.float32)
    w2 = rng.normal(size=(7, 1)).astype(np.float32)
    x0 = rng.normal(size=(2, 5)).astype(np.float32)

    def f(xt):
        h = nm.silu(nm.matmul(xt, nm.constant(w1, dtype=xt.dtype)))
        out = nm.matmul(h, nm.constant(w2, dtype=xt.dtype))
        return nm.mean_all(out)

    assert nm.grad_check(f, nm.Tensor(x0), step=1e-4) < 1e-3


def test_finite_guard_raises():
    big = t(np.array([1e30], dtype=np.float32))
    with np.errstate(over="ignore"):
        with pytest.raises(NumericsError):
            nm.mul(nm.scale(big, 1e30), nm.scale(big, 1e30))


# ---------------------------------------------------------------------------
# grad_check harness


def test_grad_check_sum_of_squares():
    def f(xt):
        return nm.sum_all(nm.mul(xt, xt))

    err = nm.grad_check(f, nm.Tensor(np.array([1.0, 2.0], dtype=np.float32)))
    assert err < 1e-8


def test_grad_check_softmax_ce_composite():
    rng = np.random.default_rng(77)
    x0 = rng.normal(size=(3, 6)).astype(np.float32)
    targets = [1, 5, 0]

    def f(xt):
        return nm.cross_entropy(xt, targets)

    assert nm.grad_check(f, nm.Tensor(x0)) < 1e-3


def test_grad_check_rms_norm_composite():
    rng = np.random.default_rng(78)
    x0 = rng.normal(size=(2, 8)).astype(np.float32)
    gain = rng.uniform(0.5, 1.5, size=8).astype(np.float32)

    def f(xt):
        out = nm.rms_norm(xt, nm.constant(gain, dtype=xt.dtype))
        return nm.mean_all(nm.mul(out, out))

    assert nm.grad_check(f, nm.Tensor(x0)) < 1e-3


def test_grad_check_detects_nondeterminism():
    state = {"n": 0}

    def f(xt):
        state["n"] += 1
        return nm.sum_all(nm.scale(xt, float(state["n"])))

    with pytest.raises(DeterminismError):
        nm.grad_check(f, nm.Tensor(np.ones(2, dtype=np.float32)))


def _op_checks(seed):
    rng = np.random.default_rng(seed)
    x_mat = rng.normal(size=(3, 4)).astype(np.float32)
    w = rng.normal(size=(4, 3)).astype(np.float32)
    gain = rng.uniform(0.5, 1.5, size=4).astype(np.float32)
    ids = rng.integers(0, 3, size=5)
    targets = rng.integers(0, 4, size=3)
    b3 = rng.normal(size=(2, 3, 4)).astype(np.float32)
    checks = {
        "add": lambda xt: nm.sum_all(nm.mul(nm.add(xt, nm.constant(w.T, dtype=xt.dtype)), xt)),
        "sub": lambda xt: nm.sum_all(nm.mul(nm.sub(xt, nm.constant(w.T, dtype=xt.dtype)), xt)),
        "mul": lambda xt: nm.sum_all(nm.mul(nm.mul(xt, nm.constant(w.T, dtype=xt.dtype)), xt)),
        "scale": lambda xt: nm.sum_all(nm.scale(xt, 2.5)),
        "matmul": lambda xt: nm.mean_all(nm.matmul(xt, nm.constant(w, dtype=xt.dtype))),
        "matmul_b": lambda xt: nm.mean_all(
            nm.matmul(nm.reshape(xt, (1, 3, 4)), nm.constant(b3.transpose(0, 2, 1)[:1], dtype=xt.dtype))),
        "transpose": lambda xt: nm.sum_all(nm.mul(nm.transpose(xt, (1, 0)), nm.constant(w, dtype=xt.dtype))),
        "reshape": lambda xt: nm.sum_all(nm.mul(nm.reshape(xt, (2, 6)), nm.reshape(xt, (2, 6)))),
        "concat": lambda xt: nm.sum_all(nm.mul(nm.concat([xt, xt], axis=0), nm.concat([xt, xt], axis=0))),
        "narrow": lambda xt: nm.sum_all(nm.mul(nm.narrow(xt, 1, 1, 3), nm.narrow(xt, 1, 0, 2))),
        "softmax": lambda xt: nm.mean_all(nm.mul(nm.softmax(xt), nm.constant(w.T, dtype=xt.dtype))),
        "cross_entropy": lambda xt: nm.cross_entropy(xt, targets),
        "rms_norm": lambda xt: nm.mean_all(nm.mul(nm.rms_norm(xt, nm.constant(gain, dtype=xt.dtype)), xt)),
        "rope": lambda xt: nm.sum_all(nm.mul(nm.rope_apply(xt, [2, 5, 9]), xt)),
        "embedding": lambda xt: nm.mean_all(nm.mul(nm.embedding_lookup(xt, ids),
                                                   nm.embedding_lookup(xt, ids))),
        "silu": lambda xt: nm.mean_all(nm.silu(xt)),
        "sum_all": lambda xt: nm.sum_all(xt),
        "mean_all": lambda xt: nm.mean_all(xt),
        "mean_axis": lambda xt: nm.sum_all(nm.mul(nm.mean_axis(xt, 0), nm.constant(gain[None, :], dtype=xt.dtype))),
        "unfold": lambda xt: nm.mean_all(nm.mul(nm.unfold_time(xt, 2, 2, 1), nm.unfold_time(xt, 2, 2, 1))),
    }
    return x_mat, checks


@pytest.mark.parametrize("seed", range(10))
def test_every_differentiable_op_grad_checks(seed):
    x_mat, checks = _op_checks(seed)
    for name, f in checks.items():
        err = nm.grad_check(f, nm.Tensor(x_mat), step=1e-4)
        assert err < 1e-3, f"op {name} failed grad check with rel err {err}"


# ---------------------------------------------------------------------------
# misc structural ops


def test_unfold_time_matches_manual_windows():
    x = np.arange(12, dtype=np.float32).reshape(6, 2)
    out = nm.unfold_time(t(x), kernel=4, stride=2, pad=1).data
    padded = np.vstack([np.zeros((1, 2), np.float32), x, np.zeros((1, 2), np.float32)])
    assert out.shape == (3, 8)
    for i in range(3):
        np.testing.assert_array_equal(out[i], padded[2 * i:2 * i + 4].reshape(-1))


def test_unfold_time_ceil_halving():
    # kernel 3 / stride 2 / pad 1 halves the time axis with ceiling rounding
    for T in (9, 10, 11, 40):
        x = t(np.zeros((T, 3), dtype=np.float32))
        out = nm.unfold_time(x, kernel=3, stride=2, pad=1)
        assert out.shape[0] == (T + 1) // 2


def test_tensor_immutable():
    x = t(np.ones(3))
    with pytest.raises(ValueError):
        x.data[0] = 5.0


def test_tape_reset_and_reuse():
    tape = nm.Tape()
    x = nm.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with tape:
        loss = nm.sum_all(x)
    assert tape.backward(loss)
    tape.reset()
    assert tape.tid_of(x) is None and not tape.nodes


def test_tensor_record_round_trip():
    buf = io.BytesIO()
    rng = np.random.default_rng(55)
    arr = rng.normal(size=(3, 2)).astype(np.float32)
    nm.write_tensor_record(buf, "weights/w1", arr)
    nm.write_tensor_record(buf, "b", np.float32([1, 2, 3]))
    buf.seek(0)
    name1, a1 = nm.read_tensor_record(buf)
    name2, a2 = nm.read_tensor_record(buf)
    assert nm.read_tensor_record(buf) is None
    assert name1 == "weights/w1" and name2 == "b"
    np.testing.assert_array_equal(a1, arr)


def test_tensor_record_layout_bytes():
    # byte-level oracle for the record format
    buf = io.BytesIO()
    nm.write_tensor_record(buf, "ab", np.array([[1.0]], dtype=np.float32))
    raw = buf.getvalue()
    assert raw[:4] == (2).to_bytes(4, "little")
    assert raw[4:6] == b"ab"
    assert raw[6:10] == (2).to_bytes(4, "little")          # rank
    assert raw[10:14] == (1).to_bytes(4, "little")         # dim 0
    assert raw[14:18] == (1).to_bytes(4, "little")         # dim 1
    assert raw[18:] == np.float32(1.0).tobytes()

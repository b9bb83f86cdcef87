import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthvla import ops
from depthvla.gradcheck import check_op
from depthvla.tensor import ShapeError, Tape, Tensor, backward, no_tape

INSTANCES = 20
TOL = 1e-3


def _shape(rng, ndim, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=ndim))


def _attn_inputs(rng):
    b, t, s, d = (int(v) for v in rng.integers(1, 4, size=4))
    return [rng.standard_normal((b, t, d)), rng.standard_normal((b, s, d)), rng.standard_normal((b, s, d))]


def _masked_attention(q, k, v):
    t, s = q.shape[-2], k.shape[-2]
    mask = np.zeros((t, s))
    mask[:, 1:][np.arange(t) % 2 == 1] = ops.MASK_NEG
    return ops.scaled_dot_attention(q, k, v, mask)


def _dropout(x):
    return ops.dropout(x, 0.3, np.random.default_rng(11), training=True)


def _embedding(table):
    return ops.embedding(table, np.array([[0, 2, 2], [1, 0, 3]]))


# name -> (fn, input factory)
CASES = {
    "add": (ops.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))]),
    "sub": (ops.sub, lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 1))]),
    "mul": (ops.mul, lambda r: [r.standard_normal((2, 3, 2)), r.standard_normal((3, 2))]),
    "scale": (lambda a: ops.scale(a, -1.7), lambda r: [r.standard_normal(_shape(r, 2))]),
    "square": (ops.square, lambda r: [r.standard_normal(_shape(r, 3))]),
    "matmul": (ops.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "matmul_batched": (ops.matmul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 5))]),
    "linear": (ops.linear, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5)),
                                      r.standard_normal((5,))]),
    "gelu": (ops.gelu, lambda r: [2 * r.standard_normal(_shape(r, 2))]),
    "dropout": (_dropout, lambda r: [r.standard_normal((4, 5))]),
    "sum_axis": (lambda x: ops.sum(x, axis=1), lambda r: [r.standard_normal(_shape(r, 3))]),
    "sum_all": (ops.sum, lambda r: [r.standard_normal(_shape(r, 2))]),
    "mean_axis": (lambda x: ops.mean(x, axis=-1, keepdims=True), lambda r: [r.standard_normal(_shape(r, 3))]),
    "reshape": (lambda x: ops.reshape(x, (-1,)), lambda r: [r.standard_normal(_shape(r, 3))]),
    "transpose": (lambda x: ops.transpose(x, (2, 0, 1)), lambda r: [r.standard_normal(_shape(r, 3))]),
    "broadcast_to": (lambda x: ops.broadcast_to(x, (3,) + x.shape), lambda r: [r.standard_normal((2, 1))]),
    "concat": (lambda a, b: ops.concat([a, b], axis=1),
               lambda r: [r.standard_normal((2, 3, 2)), r.standard_normal((2, 1, 2))]),
    "slice_axis": (lambda x: ops.slice_axis(x, 1, 1, 3), lambda r: [r.standard_normal((2, 4, 3))]),
    "embedding": (_embedding, lambda r: [r.standard_normal((4, 3))]),
    "softmax": (lambda x: ops.softmax(x, axis=-1), lambda r: [r.standard_normal(_shape(r, 2, 2, 5))]),
    "softmax_axis0": (lambda x: ops.softmax(x, axis=0), lambda r: [r.standard_normal(_shape(r, 2, 2, 5))]),
    "layernorm": (ops.layernorm, lambda r: [r.standard_normal((3, 5)), 1 + r.standard_normal(5) * 0.3,
                                            r.standard_normal(5)]),
    "attention": (ops.scaled_dot_attention, _attn_inputs),
    "attention_masked": (_masked_attention, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4)),
                                                       r.standard_normal((2, 3, 4))]),
    "mse": (lambda p, t: ops.mse(p, t), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    fn, make = CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(check_op(fn, make(rng), rng) for _ in range(INSTANCES))
    assert worst < TOL, f"{name}: relative error {worst:.2e}"


def test_matmul_examples():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ops.matmul(a, b).data, b.data)
    assert ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = ops.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50), st.integers(0, 2**31))
def test_softmax_rows_sum_to_one(rows, cols, offset, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 10 + offset
    np.testing.assert_allclose(ops.softmax(Tensor(x)).data.sum(-1), 1.0, atol=1e-6)


def test_layernorm_examples():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(ops.layernorm(Tensor([[3.0, 3.0]]), g, b).data, [[0.0, 0.0]])
    np.testing.assert_allclose(ops.layernorm(Tensor([[1.0, -1.0]]), g, b).data, [[1.0, -1.0]], atol=1e-5)


def test_attention_single_token_returns_value():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.standard_normal((1, 4))) for _ in range(3))
    np.testing.assert_allclose(ops.scaled_dot_attention(q, k, v).data, v.data, rtol=1e-6)


def test_attention_blocked_pair_gets_zero_weight():
    rng = np.random.default_rng(1)
    q, k = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    mask = np.zeros((3, 3))
    mask[0, 1] = ops.MASK_NEG
    w = ops.attention_weights(q, k, mask)
    assert w[0, 1] < 1e-12


def test_attention_matches_float64_brute_force():
    rng = np.random.default_rng(2)
    q, k, v = (rng.standard_normal((3, 4)).astype(np.float32) for _ in range(3))
    s = q.astype(np.float64) @ k.T.astype(np.float64) / 2.0
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    ref = p @ v.astype(np.float64)
    out = ops.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_fully_blocked_row_raises():
    x = Tensor(np.ones((2, 4)))
    mask = np.zeros((2, 2))
    mask[1, :] = ops.MASK_NEG
    with pytest.raises(ops.MaskError):
        ops.scaled_dot_attention(x, x, x, mask)


def test_backward_examples():
    x = Tensor([1.0, -2.0, 5.0], grad_enabled=True)
    with Tape() as tape:
        loss = ops.sum(ops.scale(x, 2.0))
    np.testing.assert_array_equal(backward(loss, tape)[x], [2.0, 2.0, 2.0])

    y = Tensor([3.0], grad_enabled=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(y, y))
    np.testing.assert_array_equal(backward(loss, tape)[y], [6.0])


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), grad_enabled=True)
    with Tape() as tape:
        out = ops.scale(x, 2.0)
    with pytest.raises(ShapeError):
        backward(out, tape)


def test_unreachable_leaf_gets_zero_gradient():
    x = Tensor(np.ones(3), grad_enabled=True)
    unused = Tensor(np.ones((2, 2)), grad_enabled=True)
    with Tape() as tape:
        loss = ops.sum(x)
    grads = backward(loss, tape, leaves=[x, unused])
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))


def test_shared_input_gradients_accumulate():
    x = Tensor([2.0], grad_enabled=True)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(x, x), x))
    assert backward(loss, tape)[x][0] == pytest.approx(5.0)


def test_tape_records_in_topological_order():
    x = Tensor(np.ones(2), grad_enabled=True)
    with Tape() as tape:
        a = ops.scale(x, 2.0)
        b = ops.add(a, x)
        ops.sum(b)
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            assert t is x or id(t) in seen
        seen.add(id(node.out))


def test_no_tape_suspends_recording():
    x = Tensor(np.ones(2), grad_enabled=True)
    with Tape() as tape:
        with no_tape():
            ops.scale(x, 2.0)
    assert len(tape.nodes) == 0


def test_dropout_identity_cases():
    x = Tensor(np.random.default_rng(0).standard_normal((5, 5)))
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(ops.dropout(x, 0.0, rng, training=True).data, x.data)
    np.testing.assert_array_equal(ops.dropout(x, 0.7, rng, training=False).data, x.data)


def test_dropout_inverted_scaling():
    x = Tensor(np.ones((200, 200)))
    out = ops.dropout(x, 0.25, np.random.default_rng(0), training=True).data
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1 / 0.75, rtol=1e-6)
    assert abs(out.mean() - 1.0) < 0.02


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        ops.embedding(Tensor(np.ones((3, 2))), np.array([3]))


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    q, k, v = (Tensor(rng.standard_normal((2, 5, 4))) for _ in range(3))
    a = ops.scaled_dot_attention(q, k, v).data
    b = ops.scaled_dot_attention(q, k, v).data
    assert a.tobytes() == b.tobytes()


def test_forward_stays_finite_on_large_inputs():
    x = Tensor(np.random.default_rng(4).standard_normal((3, 6)) * 1e3)
    g, b = Tensor(np.ones(6)), Tensor(np.zeros(6))
    for out in (ops.softmax(x), ops.layernorm(x, g, b), ops.gelu(x)):
        assert np.all(np.isfinite(out.data))


def test_float32_default_dtype():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert ops.add(Tensor([1.0]), Tensor([2.0])).dtype == np.float32

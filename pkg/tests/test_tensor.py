"""Unit and property tests for the autodiff engine.

Every differentiable op is checked against a central-difference oracle that
knows nothing about the engine: it re-runs the forward pass with single
entries perturbed by +/-h and compares slopes.
"""

import math

import numpy as np
import pytest

from domaintune import tensor as T
from domaintune.tensor import ContractError, ShapeError, Tape, Tensor

FD_STEP = 1e-5
FD_RTOL = 1e-4


def fd_check(build, params, rtol=FD_RTOL, h=FD_STEP):
    """Compare tape gradients of scalar ``build(params)`` with central differences.

    ``build`` must construct the graph from scratch on each call so that the
    perturbed re-evaluations see fresh forwards.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build(params)
    tape.backward(loss)
    for p in params:
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build(params).item()
            flat[i] = orig - h
            down = build(params).item()
            flat[i] = orig
            want = (up - down) / (2.0 * h)
            got = p.grad.ravel()[i]
            denom = max(abs(want), abs(got), 1.0)
            assert abs(want - got) / denom < rtol, (
                f"grad mismatch at flat index {i}: fd={want!r} tape={got!r}")


def make(rng, shape, std=0.8):
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


# ---------------------------------------------------------------------------
# Frozen forward values
# ---------------------------------------------------------------------------


def test_softmax_rows_uniform_and_log2():
    out = T.softmax_rows(Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)
    out = T.softmax_rows(Tensor([[math.log(2.0), 0.0]]))
    np.testing.assert_allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]], rtol=1e-12)


def test_softmax_rows_shift_invariance():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 7))
    base = T.softmax_rows(Tensor(a)).data
    shifted = T.softmax_rows(Tensor(a + 123.456)).data
    np.testing.assert_allclose(base, shifted, atol=1e-12)
    np.testing.assert_allclose(base.sum(axis=1), np.ones(4), atol=1e-12)


def test_mse_loss_example():
    loss = T.mse_loss(Tensor([0.0, 0.0]), Tensor([2.0, 0.0]))
    assert loss.item() == pytest.approx(2.0, abs=1e-15)


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = Tensor(np.zeros((3, 4)))
    loss = T.cross_entropy_logits(logits, [0, 1, 3])
    assert loss.item() == pytest.approx(math.log(4.0), rel=1e-12)


def test_backward_quadratic_example():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.mse_loss(x, Tensor([0.0]))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [4.0], rtol=1e-12)


def test_layer_norm_rows_are_standardized():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((5, 16)) * 3 + 2)
    gain = Tensor(np.ones(16))
    bias = Tensor(np.zeros(16))
    y = T.layer_norm(x, gain, bias).data
    np.testing.assert_allclose(y.mean(axis=1), np.zeros(5), atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), np.ones(5), rtol=1e-3)


def test_embedding_lookup_rows_and_scatter_grad():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    with Tape() as tape:
        out = T.embedding_lookup(table, [3, 0, 3])
        loss = T.sum_all(out)
    np.testing.assert_allclose(out.data, [[9, 10, 11], [0, 1, 2], [9, 10, 11]])
    tape.backward(loss)
    # duplicated id 3 accumulates twice
    np.testing.assert_allclose(table.grad[3], [2.0, 2.0, 2.0])
    np.testing.assert_allclose(table.grad[0], [1.0, 1.0, 1.0])
    np.testing.assert_allclose(table.grad[1], [0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Error contracts
# ---------------------------------------------------------------------------


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError) as err:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "[2, 3]" in str(err.value) and "[4, 2]" in str(err.value)
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.concat_rows(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_bad_ids_raise_index_error():
    table = Tensor(np.zeros((4, 3)))
    with pytest.raises(IndexError):
        T.embedding_lookup(table, [0, 4])
    with pytest.raises(IndexError):
        T.cross_entropy_logits(Tensor(np.zeros((1, 4))), [7])
    with pytest.raises(ContractError):
        T.cross_entropy_logits(Tensor(np.zeros((0, 4))), [])


def test_attention_mask_shape_checked():
    rng = np.random.default_rng(2)
    q = Tensor(rng.standard_normal((3, 8)))
    kv = Tensor(rng.standard_normal((5, 8)))
    with pytest.raises(ShapeError):
        T.multi_head_attention(q, kv, kv, 2, mask=np.zeros((3, 4)))
    with pytest.raises(ContractError):
        T.multi_head_attention(q, kv, kv, 3)


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------


def test_fd_matmul_chain():
    rng = np.random.default_rng(10)
    a, b = make(rng, (3, 4)), make(rng, (4, 2))

    def build(ps):
        return T.mean_all(T.matmul(ps[0], ps[1]))

    fd_check(build, [a, b])


def test_fd_add_bias_scale_mul():
    rng = np.random.default_rng(11)
    x, b, y = make(rng, (3, 4)), make(rng, (4,)), make(rng, (3, 4))

    def build(ps):
        return T.mean_all(T.mul(T.scale(T.add(ps[0], ps[1]), 1.7), ps[2]))

    fd_check(build, [x, b, y])


def test_fd_softmax_rows():
    rng = np.random.default_rng(12)
    a = make(rng, (4, 5))
    w = Tensor(rng.standard_normal((4, 5)))

    def build(ps):
        return T.mean_all(T.mul(T.softmax_rows(ps[0]), w))

    fd_check(build, [a])


def test_fd_layer_norm():
    rng = np.random.default_rng(13)
    x, g, b = make(rng, (3, 6)), make(rng, (6,)), make(rng, (6,))
    w = Tensor(rng.standard_normal((3, 6)))

    def build(ps):
        return T.mean_all(T.mul(T.layer_norm(ps[0], ps[1], ps[2]), w))

    fd_check(build, [x, g, b])


def test_fd_concat_slice_transpose():
    rng = np.random.default_rng(14)
    a, b = make(rng, (2, 5)), make(rng, (3, 5))

    def build(ps):
        cat = T.concat_rows(ps[0], ps[1])
        piece = T.slice_cols(T.slice_rows(cat, 1, 4), 1, 4)
        return T.mean_all(T.matmul(piece, T.transpose(piece)))

    fd_check(build, [a, b])


def test_fd_activations():
    rng = np.random.default_rng(15)
    # keep relu inputs away from the hinge so central differences are valid
    a = Tensor(rng.standard_normal((4, 4)) + np.sign(rng.standard_normal((4, 4))) * 0.3,
               requires_grad=True)
    w = make(rng, (4, 4))

    def build(ps):
        return T.mean_all(T.add(T.relu(ps[0]), T.tanh(T.matmul(ps[0], ps[1]))))

    fd_check(build, [a, w])


def test_fd_embedding_and_cross_entropy():
    rng = np.random.default_rng(16)
    table = make(rng, (6, 8))
    proj = make(rng, (8, 6))
    ids = [0, 3, 3, 5]
    targets = [1, 2, 0, 5]

    def build(ps):
        h = T.embedding_lookup(ps[0], ids)
        return T.cross_entropy_logits(T.matmul(h, ps[1]), targets)

    fd_check(build, [table, proj])


def test_fd_mse():
    rng = np.random.default_rng(17)
    p, t = make(rng, (3, 5)), make(rng, (3, 5))

    def build(ps):
        return T.mse_loss(ps[0], ps[1])

    fd_check(build, [p, t])


def test_fd_attention_with_mask_and_prefix_concat():
    rng = np.random.default_rng(18)
    q = make(rng, (3, 8))
    k = make(rng, (4, 8))
    v = make(rng, (4, 8))
    pk = make(rng, (2, 8))
    pv = make(rng, (2, 8))
    causal = np.triu(np.full((3, 4), -np.inf), k=2)
    mask = np.concatenate([np.zeros((3, 2)), causal], axis=1)

    def build(ps):
        kc = T.concat_rows(ps[3], ps[1])
        vc = T.concat_rows(ps[4], ps[2])
        out = T.multi_head_attention(ps[0], kc, vc, 2, mask=mask)
        return T.mean_all(T.mul(out, out))

    fd_check(build, [q, k, v, pk, pv])


def test_fd_random_op_chains():
    """A batch of randomized compositions, all against the same oracle."""
    rng = np.random.default_rng(99)
    for trial in range(6):
        x = make(rng, (3, 6))
        w1 = make(rng, (6, 6))
        g = make(rng, (6,))
        b = make(rng, (6,))

        def build(ps):
            h = T.tanh(T.matmul(ps[0], ps[1]))
            h = T.layer_norm(h, ps[2], ps[3])
            h = T.multi_head_attention(h, h, h, 3)
            return T.mse_loss(h, Tensor(np.ones((3, 6)) * 0.1))

        fd_check(build, [x, w1, g, b])


# ---------------------------------------------------------------------------
# Tape semantics
# ---------------------------------------------------------------------------


def test_grad_accumulates_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.mse_loss(x, Tensor([0.0, 0.0]))
    tape.backward(loss)
    first = x.grad.copy()
    with Tape() as tape2:
        loss2 = T.mse_loss(x, Tensor([0.0, 0.0]))
    tape2.backward(loss2)
    np.testing.assert_allclose(x.grad, 2.0 * first)


def test_grad_scale_averages_examples():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        l1 = T.mse_loss(x, Tensor([0.0]))
        l2 = T.mse_loss(x, Tensor([1.0]))
    tape.backward(l1, grad_scale=0.5)
    tape.backward(l2, grad_scale=0.5)
    want = 0.5 * (2 * 3.0) + 0.5 * (2 * (3.0 - 1.0))
    np.testing.assert_allclose(x.grad, [want])


def test_non_participating_leaf_keeps_zero_grad():
    x = Tensor([1.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    with Tape() as tape:
        loss = T.mse_loss(x, Tensor([0.0]))
    tape.backward(loss)
    np.testing.assert_allclose(unused.grad, [0.0])


def test_no_recording_outside_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    out = T.scale(x, 3.0)
    assert out.grad is None and not out.requires_grad


def test_tape_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
        with Tape() as tape:
            h = T.multi_head_attention(T.matmul(x, w), x, x, 2)
            loss = T.mse_loss(h, Tensor(np.zeros((4, 6))))
        tape.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_each_node_visited_once():
    x = Tensor([1.0, 1.0], requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
        z = T.add(y, y)  # diamond: y feeds z twice
        loss = T.mse_loss(z, Tensor([0.0, 0.0]))
    tape.backward(loss)
    # d/dx mean((4x)^2) under 2-elem mean = 16x
    np.testing.assert_allclose(x.grad, [16.0, 16.0])

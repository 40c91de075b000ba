import numpy as np
import pytest

from dmst import autodiff as ad
from dmst.attention import rope_precompute
from dmst.errors import InvalidInput
from dmst.sparsify import soft_threshold_matrix

FD_H = 1e-6
FD_TOL = 1e-6


def fd_gradients(fn, arrays):
    # independent oracle: central differences of the scalar numpy evaluation
    grads = []
    for which, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[which][idx] += FD_H
            minus[which][idx] -= FD_H
            g[idx] = (fn(*plus) - fn(*minus)) / (2 * FD_H)
        grads.append(g)
    return grads


def check_op(build, arrays):
    """Compare backward gradients of ``build`` against finite differences."""
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()

    def numeric(*arrs):
        return build(*[ad.Tensor(a) for a in arrs]).data.item()

    for t, fd in zip(tensors, fd_gradients(numeric, arrays)):
        scale = max(float(np.max(np.abs(fd))), 1.0)
        assert np.max(np.abs(t.grad - fd)) / scale < FD_TOL


def weighted(rng, shape):
    # fixed projection turning an op output into a scalar with varied seeds
    C = rng.normal(size=shape)
    return lambda t: ad.sum_(ad.mul(t, C))


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def test_add_sub_mul_div_gradients():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 4))
    w = weighted(rng, (3, 4))
    check_op(lambda x, y: w(ad.add(x, y)), [a, b])
    check_op(lambda x, y: w(ad.sub(x, y)), [a, b])
    check_op(lambda x, y: w(ad.mul(x, y)), [a, b])
    check_op(lambda x, y: w(ad.div(x, y)), [a, b])


def test_broadcast_add_and_mul_gradients():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 1))
    b = rng.normal(size=(1, 4))
    w = weighted(rng, (3, 4))
    check_op(lambda x, y: w(ad.add(x, y)), [a, b])
    check_op(lambda x, y: w(ad.mul(x, y)), [a, b])


def test_neg_and_pow_gradients():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.5, 2.0, size=(2, 5))
    w = weighted(rng, (2, 5))
    check_op(lambda x: w(ad.neg(x)), [a])
    check_op(lambda x: w(ad.pow_scalar(x, 3.0)), [a])
    check_op(lambda x: w(ad.pow_scalar(x, -0.5)), [a])


def test_matmul_gradients():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    w = weighted(rng, (3, 2))
    check_op(lambda x, y: w(ad.matmul(x, y)), [a, b])


def test_batched_matmul_with_broadcast_gradients():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    w = weighted(rng, (2, 3, 5))
    check_op(lambda x, y: w(ad.matmul(x, y)), [a, b])


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def test_reshape_transpose_broadcast_gradients():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(2, 6))
    w1 = weighted(rng, (3, 4))
    check_op(lambda x: w1(ad.reshape(x, (3, 4))), [a])
    b = rng.normal(size=(2, 3, 4))
    w2 = weighted(rng, (4, 2, 3))
    check_op(lambda x: w2(ad.transpose(x, (2, 0, 1))), [b])
    c = rng.normal(size=(3, 1))
    w3 = weighted(rng, (3, 5))
    check_op(lambda x: w3(ad.broadcast_to(x, (3, 5))), [c])


def test_concat_and_getitem_gradients():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 2))
    w = weighted(rng, (2, 5))
    check_op(lambda x, y: w(ad.concat([x, y], axis=1)), [a, b])
    c = rng.normal(size=(4, 4))
    w2 = weighted(rng, (2, 4))
    check_op(lambda x: w2(ad.getitem(x, slice(1, 3))), [c])


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def test_sum_and_mean_gradients():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4))
    w = weighted(rng, (3,))
    check_op(lambda x: w(ad.sum_(x, axis=1)), [a])
    check_op(lambda x: w(ad.mean(x, axis=1)), [a])
    wk = weighted(rng, (3, 1))
    check_op(lambda x: wk(ad.sum_(x, axis=1, keepdims=True)), [a])
    check_op(lambda x: ad.mean(x), [a])


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def test_sigmoid_relu_gelu_exp_log_gradients():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(3, 4))
    # keep relu inputs away from the kink where the derivative jumps
    a = np.where(np.abs(a) < 0.1, 0.3, a)
    pos = rng.uniform(0.5, 3.0, size=(3, 4))
    w = weighted(rng, (3, 4))
    check_op(lambda x: w(ad.sigmoid(x)), [a])
    check_op(lambda x: w(ad.relu(x)), [a])
    check_op(lambda x: w(ad.gelu(x)), [a])
    check_op(lambda x: w(ad.exp(x)), [a])
    check_op(lambda x: w(ad.log(x)), [pos])


def test_softmax_gradient():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(4, 5))
    w = weighted(rng, (4, 5))
    check_op(lambda x: w(ad.softmax(x, axis=-1)), [a])
    check_op(lambda x: w(ad.softmax(x, axis=0)), [a])


def test_soft_threshold_rows_gradient_at_stable_active_set():
    rng = np.random.default_rng(10)
    checked = 0
    while checked < 10:
        a = rng.normal(size=(2, 6))
        out, thresholds, active = soft_threshold_matrix(a)
        margin = np.where(active, out, np.inf).min()
        slack = np.where(active, np.inf, thresholds[:, None] - a).min()
        if margin < 1e-3 or slack < 1e-3:
            continue  # perturbation would flip the active set
        w = weighted(rng, (2, 6))
        check_op(lambda x: w(ad.soft_threshold_rows(x)), [a])
        checked += 1


def test_rope_rotate_gradient_and_norm_preservation():
    rng = np.random.default_rng(11)
    table = rope_precompute(5, 6)
    a = rng.normal(size=(5, 6))
    w = weighted(rng, (5, 6))
    check_op(lambda x: w(ad.rope_rotate(x, table)), [a])
    # the adjoint is the inverse rotation, so gradient norms match seed norms
    t = ad.Tensor(a, requires_grad=True)
    out = ad.rope_rotate(t, table)
    seed = rng.normal(size=(5, 6))
    out.backward(seed)
    assert np.max(np.abs(np.linalg.norm(t.grad, axis=1) - np.linalg.norm(seed, axis=1))) < 1e-12


def test_cross_entropy_mean_gradient():
    rng = np.random.default_rng(12)
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    t = ad.Tensor(logits, requires_grad=True)
    loss = ad.cross_entropy_mean(t, labels)
    loss.backward()

    def numeric(arr):
        return ad.cross_entropy_mean(ad.Tensor(arr), labels).data.item()

    fd = fd_gradients(numeric, [logits])[0]
    assert np.max(np.abs(t.grad - fd)) < FD_TOL


def test_cross_entropy_mean_known_value():
    # uniform logits over C classes cost exactly log C
    logits = np.zeros((3, 4))
    labels = np.array([0, 1, 2])
    loss = ad.cross_entropy_mean(ad.Tensor(logits), labels)
    assert abs(loss.data.item() - np.log(4.0)) < 1e-12


def test_cross_entropy_rejects_bad_shapes():
    with pytest.raises(InvalidInput):
        ad.cross_entropy_mean(ad.Tensor(np.zeros((3, 4))), np.zeros(2, dtype=int))
    with pytest.raises(InvalidInput):
        ad.cross_entropy_mean(ad.Tensor(np.zeros(4)), np.zeros(4, dtype=int))


# ---------------------------------------------------------------------------
# graph mechanics
# ---------------------------------------------------------------------------


def test_reused_tensor_accumulates_gradient():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(x, x)
    y.backward(np.array([1.0]))
    assert np.array_equal(x.grad, [2.0])


def test_diamond_graph_gradient():
    # z = x * y + x: dz/dx = y + 1, dz/dy = x
    x = ad.Tensor(np.array([3.0]), requires_grad=True)
    y = ad.Tensor(np.array([5.0]), requires_grad=True)
    z = ad.add(ad.mul(x, y), x)
    z.backward(np.array([1.0]))
    assert np.array_equal(x.grad, [6.0])
    assert np.array_equal(y.grad, [3.0])


def test_detach_blocks_gradient_flow():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = ad.mul(x.detach(), x)
    y.backward(np.array([1.0]))
    assert np.array_equal(x.grad, [2.0])  # only the live branch contributes


def test_backward_requires_scalar_without_seed():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(InvalidInput):
        ad.add(x, x).backward()


def test_zero_grad_resets_accumulation():
    x = ad.Tensor(np.array([1.0]), requires_grad=True)
    ad.mul(x, 3.0).backward(np.array([1.0]))
    assert np.array_equal(x.grad, [3.0])
    x.zero_grad()
    assert x.grad is None


def test_operator_sugar_matches_functions():
    rng = np.random.default_rng(13)
    a = ad.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    left = (a + b) * a - b / 2.0
    right = ad.sub(ad.mul(ad.add(a, b), a), ad.div(b, 2.0))
    assert np.array_equal(left.data, right.data)

"""Tape-based gradients verified against central finite differences."""

import numpy as np
import pytest

from trafficfuse.autodiff import Tensor, gelu, no_grad, softmax, stop_gradient


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def gradcheck(fn, *arrays, h=1e-6, tol=1e-6):
    """Compare tape gradients of a scalar-valued fn against central FD."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    out.backward()
    for leaf, base in zip(leaves, arrays):
        work = base.copy()
        flat = work.reshape(-1)
        num = np.zeros(flat.size)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            fp = fn(*[Tensor(w if w is not work else work) for w in _swap(arrays, base, work)]).item()
            flat[k] = keep - h
            fm = fn(*[Tensor(w if w is not work else work) for w in _swap(arrays, base, work)]).item()
            flat[k] = keep
            num[k] = (fp - fm) / (2.0 * h)
        err = rel_err(leaf.grad.reshape(-1), num)
        assert err < tol, f"gradient mismatch {err}"


def _swap(arrays, target, replacement):
    return [replacement if a is target else a for a in arrays]


RNG = np.random.default_rng(11)


def test_add_mul_broadcast():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4,))
    c = RNG.normal(size=(3, 1))
    gradcheck(lambda x, y, z: ((x + y) * z).sum(), a, b, c)


def test_sub_div():
    a = RNG.normal(size=(2, 5)) + 3.0
    b = RNG.normal(size=(5,)) + 3.0
    gradcheck(lambda x, y: (x / y - y).sum(), a, b)


def test_scalar_mixing():
    a = RNG.normal(size=(4,))
    gradcheck(lambda x: (2.0 * x + 1.0 - x / 3.0).sum(), a)
    gradcheck(lambda x: (1.0 / (x + 10.0)).sum(), a)


@pytest.mark.parametrize(
    "sa,sb",
    [
        ((3, 4), (4, 2)),
        ((2, 3, 4), (4, 5)),
        ((2, 3, 4), (2, 4, 5)),
        ((3, 4), (2, 4, 1)),
        ((1, 2, 3, 4), (5, 1, 4, 2)),
    ],
)
def test_matmul_broadcast_shapes(sa, sb):
    a = RNG.normal(size=sa)
    b = RNG.normal(size=sb)
    gradcheck(lambda x, y: (x @ y).sum(), a, b)
    # nonuniform downstream gradient
    w = RNG.normal(size=np.matmul(a, b).shape)
    gradcheck(lambda x, y: ((x @ y) * w).sum(), a, b)


def test_reductions():
    a = RNG.normal(size=(3, 4, 5))
    gradcheck(lambda x: x.sum(), a)
    gradcheck(lambda x: (x.sum(axis=1) ** 2 if False else (x.sum(axis=1) * x.sum(axis=1))).sum(), a)
    gradcheck(lambda x: (x.mean(axis=-1, keepdims=True) * x).sum(), a)
    gradcheck(lambda x: x.mean(), a)


def test_getitem_slices():
    a = RNG.normal(size=(4, 6))
    gradcheck(lambda x: (x[1:3, ::2] * 2.0).sum(), a)
    gradcheck(lambda x: x[:, 0].sum(), a)


def test_transpose_reshape():
    a = RNG.normal(size=(2, 3, 4))
    w = RNG.normal(size=(4, 3, 2))
    gradcheck(lambda x: (x.transpose((2, 1, 0)) * w).sum(), a)
    gradcheck(lambda x: (x.swapaxes(-1, -2) @ x).sum(), a)
    gradcheck(lambda x: (x.reshape(6, 4) @ x.reshape(4, 6)).sum(), a)


def test_elementwise_nonlinear():
    a = RNG.normal(size=(3, 4))
    gradcheck(lambda x: (x.exp() / (1.0 + x.exp())).sum(), a)
    gradcheck(lambda x: (x * x + 4.0).log().sum(), a)
    gradcheck(lambda x: (x * x + 1.0).sqrt().sum(), a)
    # keep |x| and relu away from their kinks
    b = np.where(np.abs(a) < 0.2, a + 0.5, a)
    gradcheck(lambda x: x.abs().sum(), b)
    gradcheck(lambda x: x.relu().sum(), b)
    gradcheck(lambda x: gelu(x).sum(), a, tol=1e-5)


def test_softmax_gradient():
    a = RNG.normal(size=(2, 3, 5)) * 3.0
    w = RNG.normal(size=(2, 3, 5))
    gradcheck(lambda x: (softmax(x) * w).sum(), a)


def test_softmax_rows_sum_to_one():
    a = Tensor(RNG.normal(size=(4, 7)) * 10.0)
    s = softmax(a).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert (s >= 0).all()


def test_diamond_reuse_accumulates():
    a = RNG.normal(size=(3,))
    gradcheck(lambda x: (x * x + x.exp() * x).sum(), a)
    # the same tensor feeding two branches of one op
    t = Tensor(a.copy(), requires_grad=True)
    out = (t + t).sum()
    out.backward()
    assert np.allclose(t.grad, 2.0)


def test_layernorm_composite():
    a = RNG.normal(size=(2, 5, 8))
    g = RNG.normal(size=(8,))
    b = RNG.normal(size=(8,))

    def ln(x, gg, bb):
        m = x.mean(axis=-1, keepdims=True)
        v = ((x - m) * (x - m)).mean(axis=-1, keepdims=True)
        return (((x - m) / (v + 1e-5).sqrt()) * gg + bb).sum()

    gradcheck(ln, a, g, b)


def test_mlp_composite():
    x = RNG.normal(size=(6, 4))
    w1 = RNG.normal(size=(4, 8)) * 0.5
    b1 = RNG.normal(size=(8,)) * 0.1
    w2 = RNG.normal(size=(8, 2)) * 0.5

    def mlp(xx, a, c, d):
        h = gelu(xx @ a + c)
        return ((h @ d) * (h @ d)).mean()

    gradcheck(mlp, x, w1, b1, w2, tol=1e-5)


def test_stop_gradient_blocks_flow():
    t = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    out = (stop_gradient(t * 2.0) * t).sum()
    out.backward()
    # only the direct factor contributes: d/dt (c * t) = c = 2t
    assert np.allclose(t.grad, [4.0, 6.0])


def test_no_grad_builds_no_tape():
    t = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = (t * 5.0).sum()
    assert out._backward is None and not out.requires_grad


def test_backward_requires_scalar():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()


def test_grad_not_tracked_for_constants():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones(3))
    out = (a * b).sum()
    assert not out.requires_grad

"""Every differentiable op against central differences at float64."""

import numpy as np
import pytest

from dualid.autodiff import Parameter, ShapeError, Tensor, finite_diff_check, no_grad
from dualid.autodiff import tensor as T

SEEDS = range(100)


def _p(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Parameter(x, dtype=np.float64)


def _weighted(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return T.sum_(T.mul(out, w))


CASES = {
    "add": lambda r: ((_p(r, 3, 4), _p(r, 4)), lambda a, b: T.add(a, b)),
    "subtract": lambda r: ((_p(r, 2, 3), _p(r, 2, 3)), lambda a, b: T.sub(a, b)),
    "multiply": lambda r: ((_p(r, 3, 1), _p(r, 3, 5)), lambda a, b: T.mul(a, b)),
    "scale": lambda r: ((_p(r, 4),), lambda a: T.scale(a, 2.5)),
    "divide": lambda r: ((_p(r, 3, 2), _p(r, 3, 2, positive=True)), lambda a, b: T.div(a, b)),
    "matmul": lambda r: ((_p(r, 2, 3, 4), _p(r, 4, 5)), lambda a, b: T.matmul(a, b)),
    "matmul_batched": lambda r: ((_p(r, 2, 3, 4), _p(r, 2, 4, 2)), lambda a, b: T.matmul(a, b)),
    "linear": lambda r: ((_p(r, 2, 3, 4), _p(r, 4, 5), _p(r, 5)), lambda x, w, b: T.linear(x, w, b)),
    "transpose": lambda r: ((_p(r, 2, 3, 4),), lambda a: T.transpose(a, (2, 0, 1))),
    "reshape": lambda r: ((_p(r, 2, 6),), lambda a: T.reshape(a, (3, 4))),
    "concatenate": lambda r: ((_p(r, 2, 3), _p(r, 2, 2)), lambda a, b: T.concat([a, b], axis=1)),
    "slice": lambda r: ((_p(r, 4, 5),), lambda a: T.getitem(a, (slice(1, 3), slice(None, None, 2)))),
    "softmax": lambda r: ((_p(r, 3, 5),), lambda a: T.softmax(a)),
    "log_softmax": lambda r: ((_p(r, 3, 5),), lambda a: T.log_softmax(a)),
    "layer_norm": lambda r: ((_p(r, 3, 6), _p(r, 6), _p(r, 6)), lambda x, g, b: T.layer_norm(x, g, b)),
    "silu": lambda r: ((_p(r, 3, 4),), lambda a: T.silu(a)),
    "gelu": lambda r: ((_p(r, 3, 4),), lambda a: T.gelu(a)),
    "embedding": lambda r: ((_p(r, 6, 3),), lambda w: T.embedding(w, [[0, 2, 2], [5, 1, 0]])),
    "conv3x3": lambda r: ((_p(r, 2, 4, 4, 2), _p(r, 3, 3, 2, 3), _p(r, 3)),
                          lambda x, w, b: T.conv3x3(x, w, b, stride=1)),
    "conv3x3_stride2": lambda r: ((_p(r, 1, 4, 6, 2), _p(r, 3, 3, 2, 2), _p(r, 2)),
                                  lambda x, w, b: T.conv3x3(x, w, b, stride=2)),
    "upsample2x": lambda r: ((_p(r, 1, 2, 3, 2),), lambda a: T.upsample2x(a)),
    "mean": lambda r: ((_p(r, 3, 4),), lambda a: T.mean(a, axis=1, keepdims=True)),
    "sum": lambda r: ((_p(r, 3, 4, 2),), lambda a: T.sum_(a, axis=(0, 2))),
    "l2_norm": lambda r: ((_p(r, 3, 4),), lambda a: T.l2_norm(a, axis=1)),
    "mse": lambda r: ((_p(r, 3, 4), _p(r, 3, 4)), lambda a, b: T.mse(a, b)),
    "attention": lambda r: ((_p(r, 2, 3, 4), _p(r, 2, 5, 4), _p(r, 2, 5, 4)),
                            lambda q, k, v: T.attention(q, k, v, heads=2)),
}


@pytest.mark.parametrize("op", sorted(CASES))
def test_gradient_matches_finite_differences(op):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        params, fn = CASES[op](rng)
        wrng_seed = seed + 10_000

        def loss():
            return _weighted(fn(*params), np.random.default_rng(wrng_seed))

        report = finite_diff_check(loss, list(params), tolerance=1e-4)
        assert report.passed, f"{op} seed={seed}\n{report}"
        worst = max(worst, report.max_rel_error)
    assert worst < 1e-4


def test_forward_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(m, eye).data, m.data)
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    assert T.l2_norm(Tensor([3.0, 4.0])).item() == pytest.approx(5.0)


def test_backward_examples():
    x = Parameter([1.0, 2.0, 3.0], dtype=np.float64)
    T.sum_(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    y = Parameter([3.0, 4.0], dtype=np.float64)
    T.l2_norm(y).backward()
    np.testing.assert_allclose(y.grad, [0.6, 0.8])


def test_backward_accumulates_and_rejects_nonscalar():
    x = Parameter([1.0, -2.0], dtype=np.float64)
    loss = T.sum_(T.mul(x, x))
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(x.grad, [4.0, -8.0])
    with pytest.raises(ValueError, match="scalar"):
        T.mul(x, 2.0).backward()


def test_intermediates_receive_grads():
    x = Parameter([1.0, 2.0], dtype=np.float64)
    h = T.mul(x, 3.0)
    T.sum_(T.mul(h, h)).backward()
    np.testing.assert_allclose(h.grad, [6.0, 12.0])


@pytest.mark.parametrize("seed", range(20))
def test_backward_is_linear(seed):
    rng = np.random.default_rng(seed)
    x = Parameter(rng.standard_normal((3, 4)), dtype=np.float64)
    w = Parameter(rng.standard_normal((4, 2)), dtype=np.float64)
    a, b = rng.standard_normal(2)

    def l1():
        return T.sum_(T.silu(T.matmul(x, w)))

    def l2():
        return T.mean(T.softmax(T.matmul(x, w)) * T.matmul(x, w))

    grads = []
    for fn in (l1, l2):
        fn().backward()
        grads.append((x.grad.copy(), w.grad.copy()))
        x.grad = w.grad = None
    T.add(T.scale(l1(), a), T.scale(l2(), b)).backward()
    np.testing.assert_allclose(x.grad, a * grads[0][0] + b * grads[1][0], atol=1e-10)
    np.testing.assert_allclose(w.grad, a * grads[0][1] + b * grads[1][1], atol=1e-10)


def test_deterministic_ops():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((2, 8, 8, 3)).astype(np.float32))
        w = Tensor(rng.standard_normal((3, 3, 3, 4)).astype(np.float32))
        return T.silu(T.conv3x3(x, w, stride=2)).data

    assert run().tobytes() == run().tobytes()


@pytest.mark.parametrize(
    "fn, match",
    [
        (lambda: T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))), r"matmul.*\(2, 3\).*\(2, 3\)"),
        (lambda: T.add(Tensor(np.ones(3)), Tensor(np.ones(4))), r"add.*\(3,\).*\(4,\)"),
        (lambda: T.conv3x3(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 1)))), "conv3x3"),
        (lambda: T.mse(Tensor(np.ones(2)), Tensor(np.ones(3))), "mse"),
    ],
)
def test_shape_errors_name_op_and_shapes(fn, match):
    with pytest.raises(ShapeError, match=match):
        fn()


def test_no_grad_skips_recording():
    x = Parameter([1.0, 2.0])
    with no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._backward is None

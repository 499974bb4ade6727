import zlib

import numpy as np
import pytest

import vizcap.tensor as T
from vizcap.tensor import GraphError, NonFiniteError, ShapeError, Tensor, no_grad
from gradcheck import check

CASES = 100
TOL = 1e-4


def _away_from_zero(x, gap=1e-2):
    return np.where(np.abs(x) < gap, gap, x)


def _shape(rng, max_rank=3, max_extent=4):
    return tuple(int(n) for n in rng.integers(1, max_extent + 1, size=rng.integers(1, max_rank + 1)))


def _mask(rng, shape):
    m = rng.random(shape) < 0.7
    # keep at least one entry per row
    idx = rng.integers(0, shape[-1], size=shape[:-1])
    np.put_along_axis(m, idx[..., None], True, axis=-1)
    return m


def case_add(rng):
    s = _shape(rng)
    b = s[-1:] if rng.random() < 0.5 else s
    return (lambda x, y: x + y), [rng.normal(size=s), rng.normal(size=b)]


def case_mul(rng):
    s = _shape(rng)
    return (lambda x, y: x * y), [rng.normal(size=s), rng.normal(size=(1,) + s[1:])]


def case_div(rng):
    s = _shape(rng)
    den = rng.uniform(0.5, 2.0, size=s) * rng.choice([-1, 1], size=s)
    return (lambda x, y: x / y), [rng.normal(size=s), den]


def case_exp(rng):
    return T.exp, [rng.normal(size=_shape(rng))]


def case_log(rng):
    return T.log, [rng.uniform(0.2, 3.0, size=_shape(rng))]


def case_relu(rng):
    return T.relu, [_away_from_zero(rng.normal(size=_shape(rng)))]


def case_gelu(rng):
    return T.gelu, [rng.normal(scale=2.0, size=_shape(rng))]


def case_sum(rng):
    s = _shape(rng)
    axis, keep = int(rng.integers(len(s))), bool(rng.integers(2))
    return (lambda x: T.tsum(x, axis=axis, keepdims=keep)), [rng.normal(size=s)]


def case_mean(rng):
    s = _shape(rng)
    return (lambda x: T.mean(x, axis=-1)), [rng.normal(size=s)]


def case_reshape(rng):
    s = _shape(rng)
    return (lambda x: T.reshape(x, (-1,))), [rng.normal(size=s)]


def case_transpose(rng):
    s = _shape(rng, max_rank=3)
    axes = tuple(rng.permutation(len(s)))
    return (lambda x: T.transpose(x, axes)), [rng.normal(size=s)]


def case_concat(rng):
    a, b, c = (int(n) for n in rng.integers(1, 4, size=3))
    axis = int(rng.integers(2))
    sa = (a, c) if axis == 0 else (c, a)
    sb = (b, c) if axis == 0 else (c, b)
    return (lambda x, y: T.concat([x, y], axis=axis)), [rng.normal(size=sa), rng.normal(size=sb)]


def case_matmul(rng):
    n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
    batch = tuple(int(v) for v in rng.integers(1, 3, size=rng.integers(0, 3)))
    b_batch = batch if rng.random() < 0.5 else ()
    return T.matmul, [rng.normal(size=batch + (n, k)), rng.normal(size=b_batch + (k, m))]


def case_embedding(rng):
    v, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
    ids = rng.integers(0, v, size=_shape(rng, max_rank=2))
    return (lambda w: T.embedding(w, ids)), [rng.normal(size=(v, d))]


def case_layer_norm(rng):
    # width 2 saturates to +-1 and its x-gradient (~eps) drowns in roundoff
    s = _shape(rng)[:-1] + (int(rng.integers(3, 7)),)
    d = s[-1]
    return T.layer_norm, [rng.normal(size=s), rng.normal(size=d), rng.normal(size=d)]


def case_masked_softmax(rng):
    s = _shape(rng)
    m = _mask(rng, s)
    return (lambda x: T.masked_softmax(x, m)), [rng.normal(size=s)]


def case_masked_logsumexp(rng):
    s = _shape(rng)
    m = _mask(rng, s)
    return (lambda x: T.masked_logsumexp(x, m)), [rng.normal(size=s)]


def case_log_softmax(rng):
    s = _shape(rng)
    return T.log_softmax, [rng.normal(size=s)]


def case_getitem(rng):
    n = int(rng.integers(2, 6))
    idx = rng.integers(0, n, size=3)
    return (lambda x: x[idx]), [rng.normal(size=(n, 2))]


def case_layernorm_matmul(rng):
    n, d, m = (int(v) for v in rng.integers(2, 5, size=3))

    def f(x, w, g):
        return T.matmul(T.layer_norm(x, g, Tensor(np.zeros(d))), w)

    return f, [rng.normal(size=(n, d)), rng.normal(size=(d, m)), rng.normal(size=d)]


PRIMITIVES = {name[5:]: fn for name, fn in globals().items() if name.startswith("case_")}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(CASES):
        op, arrays = PRIMITIVES[name](rng)
        worst = max(worst, check(op, arrays, rng))
    assert worst <= TOL, f"{name}: relative error {worst:.2e}"


def test_product_rule():
    x, y = Tensor(2.0, requires_grad=True), Tensor(3.0, requires_grad=True)
    (x * y).backward()
    assert x.grad == 3.0 and y.grad == 2.0


def test_softmax_first_component_gradient():
    x = Tensor(np.zeros(2), requires_grad=True)
    T.masked_softmax(x)[0].backward()
    np.testing.assert_allclose(x.grad, [0.25, -0.25], atol=1e-12)


def test_backward_twice_doubles():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    for _ in range(2):
        (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array(1.5), requires_grad=True)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(6.0)


def test_masked_softmax_examples():
    np.testing.assert_array_equal(T.masked_softmax(Tensor([0.0, 0.0]), [True, True]).data, [0.5, 0.5])
    np.testing.assert_array_equal(T.masked_softmax(Tensor([5.0, 0.0]), [True, False]).data, [1.0, 0.0])


def test_masked_softmax_properties():
    rng = np.random.default_rng(7)
    for _ in range(200):
        s = _shape(rng)
        x = rng.normal(scale=5, size=s)
        m = _mask(rng, s)
        p = T.masked_softmax(Tensor(x), m).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
        assert (p[~m] == 0).all()
        shifted = T.masked_softmax(Tensor(x + rng.normal() * 10), m).data
        np.testing.assert_allclose(shifted, p, atol=1e-12)


def test_masked_softmax_all_excluded_is_error():
    with pytest.raises(ShapeError):
        T.masked_softmax(Tensor([1.0, 2.0]), [False, False])


def test_layer_norm_constant_input_is_zero():
    x = Tensor(np.full((2, 5), 3.7))
    out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()
    with pytest.raises(GraphError):
        Tensor(np.ones(1)).sum().backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    assert T.grad_enabled()


def test_float32_preserved():
    w = T.parameter(np.ones((3, 3)))
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    out = T.gelu(T.matmul(x, w) + 1.0) * 0.5
    assert out.dtype == np.float32


def test_dropout_identity_without_rng():
    x = Tensor(np.arange(4.0))
    assert T.dropout(x, 0.5, None) is x
    y = T.dropout(x, 0.5, np.random.default_rng(0))
    kept = y.data != 0
    np.testing.assert_allclose(y.data[kept], 2 * x.data[kept])

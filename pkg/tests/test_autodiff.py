import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetsolver import autodiff as ad
from hetsolver.autodiff import Segments, Tape, Tensor
from hetsolver.errors import NonFinite, NotScalar, ShapeMismatch

H = 1e-5
RTOL = 1e-4


def rel_err(a, b, floor=1e-6):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def finite_difference(fn, arrays, probe):
    grads = []
    for k, x in enumerate(arrays):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            for sign in (1, -1):
                shifted = [a.copy() for a in arrays]
                shifted[k][idx] += sign * H
                value = float(np.sum(fn(*[Tensor(a) for a in shifted]).data * probe))
                g[idx] += sign * value / (2 * H)
        grads.append(g)
    return grads


def check_gradient(fn, *arrays, seed=0):
    rng = np.random.default_rng(seed)
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        probe = rng.normal(size=out.shape)
        loss = ad.sum_all(ad.mul(out, probe))
    got = ad.grad(tape, loss, leaves)
    want = finite_difference(fn, [a.copy() for a in arrays], probe)
    for g, w in zip(got, want):
        assert rel_err(g, w) < RTOL


SEG = Segments.from_ids([0, 0, 0, 2, 2, 3], 5)

PRIMITIVES = {
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "matvec": (lambda a, b: ad.matmul(a, b), [(3, 4), (4,)]),
    "add_bias": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "scale_rows": (lambda a, s: ad.scale(a, s), [(3, 4), (3,)]),
    "scale_scalar": (lambda a, s: ad.scale(a, s), [(3, 4), ()]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)]),
    "gather": (lambda a: ad.gather(a, [2, 0, 2, 1]), [(3, 4)]),
    "leaky_relu": (lambda a: ad.leaky_relu(a), [(3, 4)]),
    "relu": (lambda a: ad.relu(a), [(3, 4)]),
    "tanh": (lambda a: ad.tanh(a), [(3, 4)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(3, 4)]),
    "exp": (lambda a: ad.exp(a), [(3, 4)]),
    "layer_norm": (lambda a, g, b: ad.layer_norm(a, g, b), [(3, 5), (5,), (5,)]),
    "segment_softmax": (lambda e: ad.segment_softmax(e, SEG), [(6,)]),
    "segment_sum": (lambda x: ad.segment_sum(x, SEG), [(6, 3)]),
    "mse_reduce": (lambda p, t: ad.mse_reduce(p, t, [True, False, True]), [(3, 2), (3, 2)]),
    "reshape": (lambda a: ad.reshape(a, (2, 6)), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients_match_finite_differences(name, seed):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    check_gradient(fn, *arrays, seed=seed)


def test_log_gradient():
    rng = np.random.default_rng(3)
    check_gradient(ad.log, rng.uniform(0.5, 2.0, size=(4,)))


def test_composite_gradient():
    rng = np.random.default_rng(4)

    def fn(x, w, a):
        z = ad.leaky_relu(ad.matmul(x, w))
        e = ad.matmul(z, a)
        alpha = ad.segment_softmax(e, SEG)
        return ad.layer_norm(ad.segment_sum(ad.scale(ad.gather(z, [0, 1, 2, 3, 4, 5]), alpha), SEG))

    check_gradient(fn, rng.normal(size=(6, 3)), rng.normal(size=(3, 4)), rng.normal(size=(4,)))


def test_softmax_example():
    y = ad.segment_softmax(Tensor([2.0, -0.4]), Segments.from_ids([0, 0], 1)).data
    oracle = np.exp([2.0, -0.4]) / (np.exp(2.0) + np.exp(-0.4))
    np.testing.assert_allclose(y, oracle, rtol=0, atol=1e-15)
    np.testing.assert_allclose(y, [0.9168, 0.0832], atol=1e-4)


def test_singleton_softmax_and_leaky():
    assert ad.segment_softmax(Tensor([3.7]), Segments.from_ids([0], 1)).data.tolist() == [1.0]
    assert float(ad.leaky_relu(Tensor(-2.0), 0.2).data) == -0.4


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    (g,) = ad.grad(tape, y, [x])
    assert float(g) == 6.0


def test_mse_of_identical_is_flat():
    p = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        loss = ad.mse_reduce(p, np.arange(6.0).reshape(3, 2))
    (g,) = ad.grad(tape, loss, [p])
    assert np.all(g == 0.0)


def test_not_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.exp(x)
    with pytest.raises(NotScalar):
        ad.grad(tape, y, [x])


def test_non_finite_trips():
    with pytest.raises(NonFinite):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(NonFinite):
        ad.log(Tensor([0.0]))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeMismatch):
        Segments.from_ids([1, 0], 2)


def test_tape_order_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = ad.sum_all(ad.exp(ad.scale(x, 2.0)))
    seen = {id(x)}
    for out, inputs, _ in tape.records:
        assert all(id(i) in seen or not i.requires_grad for i in inputs)
        seen.add(id(out))
    assert tape.records[-1][0] is y


def test_no_recording_without_tape_or_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    ad.exp(x)
    with Tape() as tape:
        ad.exp(Tensor(np.ones(2)))
    assert len(tape) == 0


@settings(max_examples=50, deadline=None)
@given(sizes=st.lists(st.integers(1, 6), min_size=1, max_size=6), seed=st.integers(0, 2**16))
def test_softmax_normalises_every_segment(sizes, seed):
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(len(sizes)) * 2, sizes)
    seg = Segments.from_ids(ids, 2 * len(sizes))
    y = ad.segment_softmax(Tensor(rng.normal(scale=10, size=ids.size)), seg).data
    assert np.all(y >= 0)
    sums = np.bincount(ids, weights=y)[::2]
    assert np.all(np.abs(sums - 1.0) < 1e-12)


@settings(max_examples=50, deadline=None)
@given(rows=st.integers(1, 5), cols=st.integers(2, 16), seed=st.integers(0, 2**16))
def test_layer_norm_standardises_rows(rows, cols, seed):
    # Rows with spread >> sqrt(eps) so the epsilon shift stays below 1e-6.
    rng = np.random.default_rng(seed)
    x = rng.normal(loc=rng.normal(size=(rows, 1)), scale=5.0, size=(rows, cols))
    x += 50.0 * np.linspace(-1.0, 1.0, cols)
    y = ad.layer_norm(Tensor(x)).data
    assert np.all(np.abs(y.mean(axis=1)) < 1e-10)
    assert np.all(np.abs(y.var(axis=1) - 1.0) < 1e-6)


def test_sinusoid_embedding_is_deterministic():
    a = ad.sinusoid_embed([0.1, 0.2], 8).data
    b = ad.sinusoid_embed([0.1, 0.2], 8).data
    assert a.shape == (2, 8) and np.array_equal(a, b)
    np.testing.assert_allclose(a[:, :4] ** 2 + a[:, 4:] ** 2, 1.0)
    with pytest.raises(ShapeMismatch):
        ad.sinusoid_embed([0.1], 7)

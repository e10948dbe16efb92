import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from unirecon.errors import DimensionError, DomainError, GradCheckError, NumericError
from unirecon.numerics import (
    ParameterStore,
    SeededRng,
    Tensor,
    concat,
    embedding,
    gaussian_log_density,
    grad_check,
    layer_norm,
    log_softmax,
    matmul,
    minimum,
    precision,
    sample_gaussian,
    softmax,
    stack,
)
from unirecon.numerics.checkpoint import decode_checkpoint, encode_checkpoint


# -- matmul -----------------------------------------------------------------

def test_matmul_identity():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(matmul(eye, eye).data, np.eye(2))


def test_matmul_zero():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(a, Tensor([[0], [0]])).data, [[0], [0]])


def test_matmul_hand_arithmetic():
    # 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
    out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_accumulates_both():
    a = Tensor(np.arange(6).reshape(2, 3) / 6, requires_grad=True)
    b = Tensor(np.arange(12).reshape(3, 4) / 12, requires_grad=True)
    matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T, rtol=1e-6)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 4)), rtol=1e-6)


# -- softmax ------------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_allclose(softmax(Tensor([0, 0, 0])).data, [1 / 3] * 3, atol=1e-7)


def test_softmax_cold_limit():
    p = softmax(Tensor([10.0, 0.0]), temperature=1e-3).data
    assert p[0] == pytest.approx(1.0) and p[1] < 1e-30


def test_softmax_two_values():
    # e^1/(e^1+e^2) and e^2/(e^1+e^2)
    e1, e2 = math.exp(1), math.exp(2)
    np.testing.assert_allclose(softmax(Tensor([1.0, 2.0])).data, [e1 / (e1 + e2), e2 / (e1 + e2)], atol=1e-6)
    np.testing.assert_allclose(softmax(Tensor([1.0, 2.0])).data, [0.26894, 0.73106], atol=1e-5)


def test_softmax_rejects_bad_temperature():
    with pytest.raises(DomainError):
        softmax(Tensor([1.0]), temperature=0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-80, 80), min_size=1, max_size=12), st.floats(0.05, 5.0))
def test_softmax_is_probability_vector(logits, temp):
    p = softmax(Tensor(logits), temperature=temp).data.astype(np.float64)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-6
    order = np.argsort(logits, kind="stable")
    assert np.all(np.diff(p[order]) >= -1e-7)


# -- gaussian log density -----------------------------------------------------

def test_gaussian_density_at_mean():
    v = gaussian_log_density(Tensor([0.3]), Tensor([0.3]), 1.0).item()
    assert v == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert v == pytest.approx(-0.91894, abs=1e-5)


def test_gaussian_density_unit_offset():
    v = gaussian_log_density(Tensor([1.0]), Tensor([0.0]), 1.0).item()
    assert v == pytest.approx(-0.5 - 0.5 * math.log(2 * math.pi), abs=1e-12)


def test_gaussian_density_additive_constant():
    one = gaussian_log_density(Tensor([0.0]), Tensor([0.0]), 0.3).item()
    two = gaussian_log_density(Tensor([0.0, 0.0]), Tensor([0.0, 0.0]), 0.3).item()
    assert two == pytest.approx(2 * one, rel=1e-12)


def test_gaussian_density_domain():
    with pytest.raises(DomainError):
        gaussian_log_density(Tensor([0.0]), Tensor([0.0]), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.floats(1e-3, 10.0), st.integers(0, 2**31))
def test_gaussian_density_matches_scipy(d, var, seed):
    rng = np.random.default_rng(seed)
    x, m = rng.normal(size=d).astype(np.float32), rng.normal(size=d).astype(np.float32)
    ours = gaussian_log_density(Tensor(x), Tensor(m), var).item()
    oracle = norm.logpdf(x.astype(np.float64), loc=m.astype(np.float64), scale=math.sqrt(var)).sum()
    assert ours == pytest.approx(oracle, rel=1e-9, abs=1e-9)


# -- per-op finite differences -------------------------------------------------

def _fd_check(fn, *shapes, seed=0, eps=1e-3, tol=1e-4):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        xs = [Tensor(rng.uniform(-1, 1, size=s), requires_grad=True) for s in shapes]
        w = rng.normal(size=fn(*xs).shape)
        (fn(*xs) * Tensor(w)).sum().backward()
        for x in xs:
            flat = x.data.reshape(-1)
            num = np.empty_like(flat)
            for i in range(flat.size):
                o = flat[i]
                flat[i] = o + eps
                up = float((fn(*xs) * Tensor(w)).sum().data)
                flat[i] = o - eps
                dn = float((fn(*xs) * Tensor(w)).sum().data)
                flat[i] = o
                num[i] = (up - dn) / (2 * eps)
            ana = x.grad.reshape(-1)
            err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-2)
            assert err.max() < tol, (fn, err.max())


OPS = {
    "add": (lambda a, b: a + b, (3, 4), (4,)),
    "sub": (lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": (lambda a, b: a * b, (3, 4), (3, 4)),
    "div": (lambda a, b: a / (b * b + 1.0), (2, 3), (2, 3)),
    "matmul": (lambda a, b: matmul(a, b), (2, 3, 4), (4, 5)),
    "bmm": (lambda a, b: matmul(a, b), (2, 3, 4), (2, 4, 2)),
    "exp": (lambda a: a.exp(), (5,)),
    "log": (lambda a: (a * a + 0.5).log(), (5,)),
    "tanh": (lambda a: a.tanh(), (5,)),
    "sigmoid": (lambda a: a.sigmoid(), (5,)),
    "silu": (lambda a: a.silu(), (5,)),
    "gelu": (lambda a: a.gelu(), (5,)),
    "sqrt": (lambda a: (a * a + 0.1).sqrt(), (5,)),
    "pow": (lambda a: (a * a + 0.1) ** 1.5, (5,)),
    "sum_axis": (lambda a: a.sum(axis=1), (3, 4)),
    "mean": (lambda a: a.mean(axis=0, keepdims=True), (3, 4)),
    "reshape": (lambda a: a.reshape(4, 3), (3, 4)),
    "transpose": (lambda a: a.transpose(2, 0, 1), (2, 3, 4)),
    "swapaxes": (lambda a: a.swapaxes(-1, -2), (2, 3, 4)),
    "getitem": (lambda a: a[1:, ::2], (3, 4)),
    "fancy_index": (lambda a: a[np.array([0, 2, 2]), np.array([1, 1, 3])], (3, 4)),
    "concat": (lambda a, b: concat([a, b], axis=1), (2, 3), (2, 2)),
    "stack": (lambda a, b: stack([a, b], axis=0), (2, 3), (2, 3)),
    "softmax": (lambda a: softmax(a, temperature=0.7), (2, 5)),
    "log_softmax": (lambda a: log_softmax(a, temperature=1.3), (2, 5)),
    "layer_norm": (lambda a, g, b: layer_norm(a, g, b), (3, 6), (6,), (6,)),
    "gauss": (lambda a, b: gaussian_log_density(a, b, 0.7, axis=-1), (3, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, *shapes = OPS[name]
    for seed in range(3):
        _fd_check(fn, *shapes, seed=seed)


def test_embedding_gradient_scatter_adds():
    w = Tensor(np.arange(12).reshape(4, 3), requires_grad=True)
    embedding(w, [[1, 1], [3, 0]]).sum().backward()
    np.testing.assert_array_equal(w.grad[:, 0], [1, 2, 0, 1])
    with pytest.raises(DimensionError):
        embedding(w, [4])


def test_minimum_routes_gradient():
    a = Tensor([1.0, 5.0], requires_grad=True)
    b = Tensor([2.0, 3.0], requires_grad=True)
    minimum(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1, 0])
    np.testing.assert_array_equal(b.grad, [0, 1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_aborts():
    with pytest.raises(NumericError):
        Tensor([1e30]) * Tensor([1e30]) * Tensor([1e30])
    with pytest.raises(NumericError):
        Tensor([float("nan")])


def test_float32_storage_and_float64_reduction():
    t = Tensor(np.ones(4))
    assert t.dtype == np.float32
    assert matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))).dtype == np.float32
    assert t.sum().dtype == np.float64
    assert t.reshape(2, 2).sum(axis=1).dtype == np.float32


# -- gradient check -----------------------------------------------------------

def _store(**arrays):
    s = ParameterStore()
    for k, v in arrays.items():
        s.add(k, v)
    return s.seal()


def test_grad_check_quadratic():
    s = _store(w=np.random.default_rng(0).uniform(-1, 1, 7))
    err = grad_check(lambda: (s["w"] * s["w"]).sum() * 0.5, s, epsilon=1e-4)
    assert err < 1e-6


def test_grad_check_constant_parameter_has_zero_gradient():
    s = _store(w=np.ones(3), unused=np.ones(2))
    s.zero_grad()
    loss = (s["w"] * s["w"]).sum()
    loss.backward()
    assert s["unused"].grad is None
    assert grad_check(lambda: (s["w"] * s["w"]).sum(), s, epsilon=1e-4) < 1e-6


def test_grad_check_rejects_nondeterministic_loss():
    s = _store(w=np.ones(3))
    calls = iter(range(1000))
    with pytest.raises(GradCheckError):
        grad_check(lambda: (s["w"] * float(next(calls))).sum(), s)


def test_grad_check_restores_float32_params():
    s = _store(w=np.linspace(-1, 1, 5))
    before = s.snapshot()
    grad_check(lambda: (s["w"].tanh()).sum(), s)
    assert s["w"].dtype == np.float32
    np.testing.assert_array_equal(s["w"].data, before["w"])


# -- rng --------------------------------------------------------------------

def test_sample_gaussian_deterministic():
    a = sample_gaussian(SeededRng(5), (3, 4)).data
    b = sample_gaussian(SeededRng(5), (3, 4)).data
    np.testing.assert_array_equal(a, b)


def test_sample_gaussian_moments():
    x = SeededRng(11).normal(100_000)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05


def test_split_streams_uncorrelated():
    a, b = SeededRng(3).split(2)
    x, y = a.normal(100_000), b.normal(100_000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.02


def test_child_stream_independent_of_parent_consumption():
    r1, r2 = SeededRng(9), SeededRng(9)
    r1.normal(1000)
    np.testing.assert_array_equal(r1.child(2).normal(5), r2.child(2).normal(5))
    assert r1.position == 1000


# -- parameter store and checkpoints ------------------------------------------

def test_snapshot_restore_bit_exact():
    s = _store(a=np.random.default_rng(1).normal(size=(3, 2)), b=np.zeros(4))
    snap = s.snapshot()
    s["a"].data += 1
    s.restore(snap)
    np.testing.assert_array_equal(s["a"].data, snap["a"])


def test_store_key_set_sealed():
    s = _store(a=np.ones(1))
    with pytest.raises(Exception):
        s.add("b", np.ones(1))


def test_checkpoint_round_trip_bit_exact():
    rng = np.random.default_rng(2)
    tensors = {"x.w": rng.normal(size=(3, 5)).astype(np.float32), "s": np.float32(2.5),
               "z": np.zeros((0,), np.float32)}
    blob = encode_checkpoint(tensors, "decoder", 12, "abc", meta={"note": [1, 2]})
    man, back = decode_checkpoint(blob)
    assert man.component == "decoder" and man.step == 12 and man.meta == {"note": [1, 2]}
    assert [e[0] for e in man.index] == ["s", "x.w", "z"]
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k], "<f4").tobytes()
    assert encode_checkpoint(back, "decoder", 12, "abc", meta={"note": [1, 2]}) == blob

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypsep import diffkit as dk
from hypsep import manifold, nn

TOL = 1e-4


def test_constants_and_shapes():
    out = dk.add(dk.param(3.0), 4.0)
    assert float(out.value) == 7.0
    m = dk.matmul(dk.param(np.ones((2, 3))), np.ones((3, 1)))
    assert m.shape == (2, 1)
    t = dk.tanh(dk.param(0.0))
    assert float(t.value) == 0.0 and t.vjp is not None


def test_untaped_inputs_return_arrays():
    out = dk.tanh(np.array([0.1, 0.2]))
    assert isinstance(out, np.ndarray)


@pytest.mark.parametrize("build, point, expected", [
    (lambda p: dk.square(p["w"]), {"w": 3.0}, {"w": 6.0}),
    (lambda p: dk.tanh(p["w"]), {"w": 0.0}, {"w": 1.0}),
    (lambda p: dk.square(dk.add(dk.mul(p["w"], 2.0), p["b"])), {"w": 1.0, "b": 0.0}, {"w": 8.0, "b": 4.0}),
])
def test_hand_derived_gradients(build, point, expected):
    _, g = dk.grads_of(build, point)
    for k, v in expected.items():
        assert float(g[k]) == pytest.approx(v, abs=1e-12)


def test_shape_mismatch_names_op():
    with pytest.raises(ValueError, match="add"):
        dk.add(dk.param(np.ones(3)), np.ones(4))
    with pytest.raises(ValueError, match="matmul"):
        dk.matmul(dk.param(np.ones((2, 3))), np.ones((2, 3)))


def test_backward_contract():
    with pytest.raises(ValueError, match="scalar"):
        dk.backward(dk.mul(dk.param(np.ones(3)), 2.0))
    with pytest.raises(TypeError):
        dk.backward(np.float64(1.0))
    w, unused = dk.param(np.ones(3)), dk.param(np.ones((2, 2)))
    gw, gu = dk.backward(dk.sum(dk.square(w)), [w, unused])
    np.testing.assert_array_equal(gw, 2 * np.ones(3))
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_backward_deterministic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 4))
    W = rng.standard_normal((4, 3))
    build = lambda p: dk.sum(dk.log_softmax(dk.matmul(x, p["W"])))  # noqa: E731
    _, g1 = dk.grads_of(build, {"W": W})
    _, g2 = dk.grads_of(build, {"W": W})
    np.testing.assert_array_equal(g1["W"], g2["W"])


def test_shared_node_accumulates():
    _, g = dk.grads_of(lambda p: dk.mul(p["x"], p["x"]), {"x": 1.5})
    assert float(g["x"]) == pytest.approx(3.0)


def test_quadratic_grad_check_tight():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((4, 4))
    A = A @ A.T
    rep = dk.grad_check(lambda p: dk.sum(dk.mul(p["x"], dk.matmul(A, p["x"]))), {"x": rng.standard_normal((4, 1))})
    assert rep.max_rel_error <= 1e-9


def _pos(rng, shape):
    return rng.uniform(0.2, 2.0, size=shape)


def _ball(rng, shape, kappa=1.0):
    return manifold.exp_map0(0.7 * rng.standard_normal(shape), kappa)


UNARY = {
    "neg": (dk.neg, np.random.Generator.standard_normal),
    "exp": (dk.exp, np.random.Generator.standard_normal),
    "log": (dk.log, _pos),
    "sqrt": (dk.sqrt, _pos),
    "tanh": (dk.tanh, np.random.Generator.standard_normal),
    "sigmoid": (dk.sigmoid, np.random.Generator.standard_normal),
    "atanh": (dk.atanh, lambda r, s: r.uniform(-0.9, 0.9, size=s)),
    "asinh": (dk.asinh, np.random.Generator.standard_normal),
    "acosh": (dk.acosh, lambda r, s: r.uniform(1.2, 3.0, size=s)),
    "tanhc": (dk.tanhc, np.random.Generator.standard_normal),
    "atanhc": (dk.atanhc, lambda r, s: r.uniform(-0.9, 0.9, size=s)),
    "square": (dk.square, np.random.Generator.standard_normal),
    "power": (lambda x: dk.power(x, 3.0), np.random.Generator.standard_normal),
    "softmax": (lambda x: dk.softmax(x, axis=-1), np.random.Generator.standard_normal),
    "log_softmax": (lambda x: dk.log_softmax(x, axis=-1), np.random.Generator.standard_normal),
    "norm": (lambda x: dk.norm(x), np.random.Generator.standard_normal),
    "sum": (lambda x: dk.sum(x, axis=0), np.random.Generator.standard_normal),
    "mean": (lambda x: dk.mean(x, axis=1, keepdims=True), np.random.Generator.standard_normal),
    "transpose": (dk.transpose, np.random.Generator.standard_normal),
    "reshape": (lambda x: dk.reshape(x, (-1,)), np.random.Generator.standard_normal),
    "getitem": (lambda x: x[1:, [0, 2, 2]], np.random.Generator.standard_normal),
    "clip": (lambda x: dk.clip(x, -0.5, 0.5), np.random.Generator.standard_normal),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives_grad_check(name):
    fn, sample = UNARY[name]
    rng = np.random.default_rng(sorted(UNARY).index(name))
    weights = rng.standard_normal((3, 3))
    for _ in range(10):
        x = sample(rng, (3, 3))
        if name == "clip":
            # keep away from the kinks at +-0.5
            x = np.where(np.abs(np.abs(x) - 0.5) < 1e-3, 0.1, x)

        def build(p):
            out = fn(p["x"])
            return dk.sum(dk.mul(out, np.resize(weights, dk.value(out).shape)))

        assert dk.grad_check(build, {"x": x}).max_rel_error <= TOL


def test_series_branches_near_zero():
    for fn in (dk.tanhc, dk.atanhc):
        rep = dk.grad_check(lambda p: dk.sum(fn(p["x"])), {"x": np.array([0.0, 3e-5, -2e-5])}, h=1e-6)
        assert rep.max_rel_error <= TOL
        assert np.all(np.isfinite(fn(np.array([0.0, 1e-300]))))


BINARY = {
    "add": dk.add, "sub": dk.sub, "mul": dk.mul, "div": dk.div,
    "maximum": dk.maximum, "minimum": dk.minimum,
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitives_with_broadcast(name):
    fn = BINARY[name]
    rng = np.random.default_rng(len(name))
    for _ in range(10):
        a = rng.standard_normal((4, 3))
        b = rng.uniform(0.5, 1.5, size=(3,)) * rng.choice([-1, 1], size=3)
        rep = dk.grad_check(lambda p: dk.sum(dk.square(fn(p["a"], p["b"]))), {"a": a, "b": b})
        assert rep.max_rel_error <= TOL


def test_matmul_concat_stack_where():
    rng = np.random.default_rng(5)
    cond = rng.uniform(size=(4, 2)) > 0.5
    for _ in range(10):
        p = {"A": rng.standard_normal((4, 3)), "B": rng.standard_normal((3, 2))}

        def build(q):
            m = dk.matmul(q["A"], q["B"])
            c = dk.concat([m, dk.tanh(m)], axis=1)
            s = dk.stack([m, dk.where(cond, m, dk.exp(m))], axis=0)
            return dk.add(dk.sum(dk.square(c)), dk.sum(dk.tanh(s)))

        assert dk.grad_check(build, p).max_rel_error <= TOL


@pytest.mark.parametrize("kappa", [0.1, 1.0])
def test_manifold_compositions(kappa):
    rng = np.random.default_rng(int(kappa * 10))
    for _ in range(10):
        a, b = _ball(rng, (3, 2), kappa), _ball(rng, (3, 2), kappa)
        v = rng.standard_normal((3, 2))
        assert dk.grad_check(lambda p: dk.sum(manifold.mobius_add(p["a"], p["b"], kappa)),
                             {"a": a, "b": b}).max_rel_error <= TOL
        assert dk.grad_check(lambda p: dk.sum(manifold.dist(np.zeros((3, 2)), manifold.exp_map0(p["v"], kappa),
                                                            kappa)), {"v": v}).max_rel_error <= TOL
        assert dk.grad_check(lambda p: dk.sum(manifold.log_map0(p["a"], kappa)), {"a": a}).max_rel_error <= TOL


def test_hmlr_logit_grad_check():
    rng = np.random.default_rng(7)
    for _ in range(10):
        params = {"H": _ball(rng, (5, 2)), "P": _ball(rng, (3, 2)), "A": rng.standard_normal((3, 2))}
        rep = dk.grad_check(lambda p: dk.sum(dk.tanh(nn.hmlr_logits(p["H"], p["P"], p["A"], 1.0))), params)
        assert rep.max_rel_error <= TOL


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-5, 5), y=st.floats(-5, 5))
def test_polymorphic_values_match_numpy(x, y):
    a, b = np.array([x]), np.array([y])
    taped = dk.add(dk.mul(dk.param(a), b), dk.tanh(dk.param(b)))
    np.testing.assert_allclose(taped.value, a * b + np.tanh(b))
    np.testing.assert_allclose(dk.add(dk.mul(a, b), dk.tanh(b)), a * b + np.tanh(b))

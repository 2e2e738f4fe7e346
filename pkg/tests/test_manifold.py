import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hypsep import manifold as M
from hypsep.diffkit import EPS_BALL


def _inside(rng, n, kappa, max_frac=0.99, dim=2):
    d = rng.standard_normal((n, dim))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    r = rng.uniform(0, max_frac, size=(n, 1)) / np.sqrt(kappa)
    return d * r


finite = st.floats(-4, 4, allow_nan=False)
vec2 = arrays(np.float64, 2, elements=finite)
kappas = st.sampled_from([0.1, 1.0])


# --- closed-form values -------------------------------------------------------

@pytest.mark.parametrize("x, kappa, expected", [
    ((0.0, 0.0), 1.0, 2.0),
    ((0.5, 0.0), 1.0, 2.0 / 0.75),
    ((0.5, 0.0), 0.1, 2.0 / 0.975),
])
def test_conformal_factor_values(x, kappa, expected):
    assert M.conformal_factor(np.array(x), kappa).item() == pytest.approx(expected, abs=1e-12)


def test_conformal_factor_outside_raises():
    with pytest.raises(M.OutsideBallError):
        M.conformal_factor(np.array([1.0, 0.0]), 1.0)


@pytest.mark.parametrize("v, kappa, expected", [
    ((0.0, 0.0), 1.0, (0.0, 0.0)),
    ((0.5, 0.0), 1.0, (0.462117, 0.0)),
    ((3.0, 4.0), 1.0, (0.599945, 0.799927)),
])
def test_exp_map0_values(v, kappa, expected):
    np.testing.assert_allclose(M.exp_map0(np.array(v), kappa), expected, atol=1e-6)


@pytest.mark.parametrize("y, expected", [
    ((0.0, 0.0), (0.0, 0.0)),
    ((0.462117, 0.0), (0.5, 0.0)),
    ((0.9, 0.0), (1.472219, 0.0)),
])
def test_log_map0_values(y, expected):
    np.testing.assert_allclose(M.log_map0(np.array(y), 1.0), expected, atol=1e-6)


def test_log_map0_outside_raises():
    with pytest.raises(M.OutsideBallError):
        M.log_map0(np.array([0.0, 1.2]), 1.0)


@pytest.mark.parametrize("a, b, expected", [
    ((0.0, 0.0), (0.3, 0.2), (0.3, 0.2)),
    ((0.5, 0.0), (-0.5, 0.0), (0.0, 0.0)),
    ((0.5, 0.0), (0.25, 0.0), (0.75 / 1.125, 0.0)),
])
def test_mobius_add_values(a, b, expected):
    np.testing.assert_allclose(M.mobius_add(np.array(a), np.array(b), 1.0), expected, atol=1e-12)


@pytest.mark.parametrize("r, a, expected", [
    (1.0, (0.3, 0.4), (0.3, 0.4)),
    (0.0, (0.3, 0.4), (0.0, 0.0)),
    (2.0, (0.462117, 0.0), (0.761594, 0.0)),
])
def test_mobius_scalar_mul_values(r, a, expected):
    np.testing.assert_allclose(M.mobius_scalar_mul(r, np.array(a), 1.0), expected, atol=1e-6)


def test_dist_values():
    a = np.array([0.3, 0.1])
    assert float(M.dist(a, a, 1.0)) == 0.0
    assert float(M.dist(np.zeros(2), np.array([0.5, 0.0]), 1.0)) == pytest.approx(np.log(3.0), abs=1e-12)
    assert float(M.dist_cosh(np.zeros(2), np.array([0.5, 0.0]), 1.0)) == pytest.approx(np.arccosh(5 / 3), abs=1e-12)
    small = float(M.dist(np.array([0.1, 0.0]), np.array([0.3, 0.0]), 1e-8))
    assert small == pytest.approx(0.4, abs=1e-6)


@pytest.mark.parametrize("x, kappa, norm", [
    ((0.2, 0.0), 1.0, 0.2),
    ((1.0, 0.0), 1.0, 0.999995),
    ((0.0, 10.0), 0.01, 9.99995),
])
def test_clamp_to_ball(x, kappa, norm):
    out = M.clamp_to_ball(np.array(x), kappa)
    assert np.linalg.norm(out) == pytest.approx(norm, abs=1e-6)
    assert kappa * np.sum(out ** 2) <= 1 - EPS_BALL + 1e-15


def test_curvature_convention():
    assert M.Curvature(-0.1).kappa == pytest.approx(0.1)
    assert M.Curvature(0.0).is_euclidean
    with pytest.raises(ValueError):
        M.Curvature(0.0).kappa
    with pytest.raises(ValueError):
        M.Curvature(0.5)


def test_ballpoint_curvature_mismatch():
    a = M.BallPoint(np.array([0.1, 0.2]), 1.0)
    b = M.BallPoint(np.array([0.1, 0.2]), 0.1)
    with pytest.raises(M.CurvatureMismatchError):
        a + b
    with pytest.raises(M.CurvatureMismatchError):
        a.dist(b)
    assert (a + M.BallPoint(np.zeros(2), 1.0)).coords == pytest.approx(a.coords)
    assert (1.0 * a).coords == pytest.approx(a.coords)


def test_ballpoint_rejects_outside():
    with pytest.raises(M.OutsideBallError):
        M.BallPoint(np.array([0.8, 0.8]), 1.0)


# --- batch invariants -----------------------------------------------------------

@pytest.mark.parametrize("kappa", [0.1, 1.0])
def test_round_trip_batch(kappa):
    rng = np.random.default_rng(0)
    v = rng.standard_normal((10_000, 2))
    v *= (rng.uniform(0, 4, size=(10_000, 1)) / np.linalg.norm(v, axis=-1, keepdims=True))
    err = np.linalg.norm(M.log_map0(M.exp_map0(v, kappa), kappa) - v, axis=-1)
    assert err.max() <= 1e-9


@pytest.mark.parametrize("kappa", [0.1, 1.0])
def test_gyrogroup_laws_batch(kappa):
    rng = np.random.default_rng(1)
    a, b = _inside(rng, 10_000, kappa), _inside(rng, 10_000, kappa)
    zero = np.zeros_like(a)
    assert np.abs(M.mobius_add(zero, b, kappa) - b).max() <= 1e-9
    assert np.abs(M.mobius_add(-a, a, kappa)).max() <= 1e-9
    assert np.abs(M.mobius_add(-a, M.mobius_add(a, b, kappa), kappa) - b).max() <= 1e-9


def test_distance_forms_agree():
    rng = np.random.default_rng(2)
    a, b = _inside(rng, 10_000, 1.0, 0.95), _inside(rng, 10_000, 1.0, 0.95)
    assert np.abs(M.dist(a, b, 1.0) - M.dist_cosh(a, b, 1.0)).max() <= 1e-9


def test_euclidean_limit():
    rng = np.random.default_rng(3)
    a, b = _inside(rng, 1000, 4.0), _inside(rng, 1000, 4.0)   # norms <= 0.5
    e = np.linalg.norm(a - b, axis=-1)
    assert np.all(np.abs(M.dist(a, b, 1e-8) - 2 * e) <= 1e-5 * (1 + e))


def test_radial_monotone():
    r = np.linspace(0, 0.99, 200)
    x = np.stack([r, np.zeros_like(r)], axis=-1)
    d = M.dist(np.zeros_like(x), x, 1.0)
    assert np.all(np.diff(d) > 0)


# --- properties -------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(v=vec2, kappa=kappas)
def test_exp_map_lands_inside_and_keeps_direction(v, kappa):
    y = M.exp_map0(v, kappa)
    assert M.in_ball(y, kappa)
    if np.linalg.norm(v) > 1e-6:
        cos = y @ v / (np.linalg.norm(y) * np.linalg.norm(v))
        assert cos == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(a=vec2, b=vec2, c=vec2, kappa=kappas)
def test_distance_axioms(a, b, c, kappa):
    a, b, c = (M.exp_map0(x, kappa) for x in (a, b, c))
    dab, dba = float(M.dist(a, b, kappa)), float(M.dist(b, a, kappa))
    assert dab >= 0
    assert abs(dab - dba) <= 1e-10 * max(1.0, dab)
    assert float(M.dist(a, c, kappa)) <= dab + float(M.dist(b, c, kappa)) + 1e-9 * max(1.0, dab)


@settings(max_examples=200, deadline=None)
@given(a=vec2, b=vec2, r=st.floats(-3, 3), kappa=kappas)
def test_every_output_inside_ball(a, b, r, kappa):
    pa, pb = M.exp_map0(a, kappa), M.exp_map0(b, kappa)
    for out in (M.mobius_add(pa, pb, kappa), M.mobius_scalar_mul(r, pa, kappa), M.clamp_to_ball(a, kappa)):
        assert M.in_ball(out, kappa)


@settings(max_examples=100, deadline=None)
@given(x=arrays(np.float64, 2, elements=st.floats(-0.7, 0.7)))
def test_zero_distance_iff_equal(x):
    assert float(M.dist(x, x, 1.0)) <= 1e-12
    y = x + np.array([1e-3, 0.0])
    assert float(M.dist(x, y, 1.0)) > 0.0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypsep import diffkit as dk
from hypsep import manifold
from hypsep.optim import (MomentState, NonFiniteGradientError, OptimConfig, Optimizer, adam_step,
                          clip_global_norm, plateau_schedule, radam_step, riemannian_grad_at_origin)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, st_ = adam_step(p, {"w": np.zeros(2)}, MomentState())
    np.testing.assert_array_equal(new["w"], p["w"])
    assert st_.step == 1


def test_adam_first_step_closed_form():
    cfg = OptimConfig()
    new, _ = adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, MomentState(), cfg)
    assert float(new["w"]) == pytest.approx(-cfg.lr / (1 + cfg.eps), rel=1e-12)


def test_adam_does_not_mutate_inputs():
    p = {"w": np.ones(3)}
    state = MomentState()
    adam_step(p, {"w": np.ones(3)}, state)
    assert state.step == 0 and not state.m
    np.testing.assert_array_equal(p["w"], np.ones(3))


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    grads = [rng.standard_normal(4) for _ in range(50)]

    def run():
        p, s = {"w": np.zeros(4)}, MomentState()
        for g in grads:
            p, s = adam_step(p, {"w": g}, s)
        return p["w"]

    np.testing.assert_array_equal(run(), run())


def test_nonfinite_gradient_names_parameter():
    with pytest.raises(NonFiniteGradientError, match="enc.w0"):
        adam_step({"enc.w0": np.zeros(2)}, {"enc.w0": np.array([np.nan, 0.0])}, MomentState())
    with pytest.raises(NonFiniteGradientError, match="parent.p"):
        radam_step({"parent.p": np.zeros((1, 2))}, {"parent.p": np.array([[np.inf, 0.0]])}, MomentState(), 1.0)


def test_adam_converges_on_quadratic():
    target = np.array([0.7, -1.3, 2.0])
    p, s = {"w": np.zeros(3)}, MomentState()
    cfg = OptimConfig(lr=1e-2)
    for _ in range(5000):
        p, s = adam_step(p, {"w": 2 * (p["w"] - target)}, s, cfg)
    assert np.linalg.norm(p["w"] - target) <= 1e-3


@pytest.mark.parametrize("kappa", [0.1, 1.0])
def test_radam_converges_on_squared_distance(kappa):
    q = manifold.exp_map0(np.array([[0.9, -0.4]]), kappa)
    p = {"p": manifold.exp_map0(np.array([[-1.2, 0.8]]), kappa)}
    s = MomentState()
    cfg = OptimConfig(lr=1e-2)
    for _ in range(5000):
        _, g = dk.grads_of(lambda t: dk.sum(dk.square(manifold.dist(t["p"], q, kappa))), p)
        p, s = radam_step(p, g, s, kappa, cfg)
    assert manifold.dist(p["p"], q, kappa).item() <= 1e-3


def test_radam_zero_gradient_fixed_point():
    p = {"p": np.array([[0.3, 0.2]])}
    new, _ = radam_step(p, {"p": np.zeros((1, 2))}, MomentState(), 1.0)
    np.testing.assert_allclose(new["p"], p["p"], atol=1e-15)


def test_origin_frame_gradient_at_origin_is_quarter():
    g = np.array([[0.8, -0.4]])
    np.testing.assert_allclose(riemannian_grad_at_origin(np.zeros((1, 2)), g, 1.0), g / 4)


def test_radam_first_step_at_origin_matches_euclidean_adam():
    # Adam is invariant to the 1/4 gradient scale, so the first step has the Euclidean size
    g = np.array([[0.5, -0.1]])
    cfg = OptimConfig(lr=1e-3)
    new, _ = radam_step({"p": np.zeros((1, 2))}, {"p": g}, MomentState(), 1.0, cfg)
    e, _ = adam_step({"p": np.zeros((1, 2))}, {"p": g / 4}, MomentState(), cfg)
    np.testing.assert_allclose(new["p"], manifold.exp_map0(e["p"], 1.0), atol=1e-12)


def test_ball_invariant_under_many_random_steps():
    # 10^6 point updates: 1000 independent points for 1000 steps, with steps large enough to hit the clamp
    rng = np.random.default_rng(0)
    kappa = 1.0
    p = {"p": manifold.exp_map0(rng.standard_normal((1000, 2)), kappa)}
    s = MomentState()
    cfg = OptimConfig(lr=0.5)
    for _ in range(1000):
        p, s = radam_step(p, {"p": 100 * rng.standard_normal((1000, 2))}, s, kappa, cfg)
        assert manifold.in_ball(p["p"], kappa)


@pytest.mark.parametrize("history, expected", [
    ([1.0 - 0.01 * i for i in range(30)], 1.0),
    ([1.0] * 11, 0.5),
    ([1.0] * 22, 0.25),
    ([1.0] * 10, 1.0),
])
def test_plateau_schedule(history, expected):
    assert plateau_schedule(history, patience=10) == expected


def test_plateau_schedule_needs_history():
    with pytest.raises(ValueError):
        plateau_schedule([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60))
def test_plateau_schedule_monotone(history):
    mults = [plateau_schedule(history[:i + 1]) for i in range(len(history))]
    assert all(b <= a for a, b in zip(mults, mults[1:]))
    assert all(m > 0 for m in mults)


def test_clip_global_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}
    clipped, total = clip_global_norm(g, 2.5)
    assert total == pytest.approx(5.0)
    assert np.sqrt(sum(np.sum(v * v) for v in clipped.values())) == pytest.approx(2.5)
    same, _ = clip_global_norm(g, 10.0)
    assert same is g


def test_optimizer_routes_and_roundtrips_state():
    params = {"enc.w": np.ones((2, 2)), "parent.p": np.zeros((2, 2)), "parent.a": np.ones((2, 2))}
    opt = Optimizer({"parent.p"}, 1.0)
    grads = {k: 0.1 * np.ones_like(v) for k, v in params.items()}
    new = opt.step(params, grads, 1e-2)
    assert set(opt.euclid_state.m) == {"enc.w", "parent.a"}
    assert set(opt.ball_state.m) == {"parent.p"}
    assert manifold.in_ball(new["parent.p"], 1.0)
    other = Optimizer({"parent.p"}, 1.0)
    other.load_state(opt.state_arrays())
    assert other.euclid_state.step == 1
    np.testing.assert_array_equal(other.ball_state.v["parent.p"], opt.ball_state.v["parent.p"])


def test_optimizer_requires_curvature_for_ball_params():
    with pytest.raises(ValueError):
        Optimizer({"parent.p"}, None)

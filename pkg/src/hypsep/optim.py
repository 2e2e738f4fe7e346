"""Adam for Euclidean parameters, Riemannian Adam for ball-valued ones, and
the plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import manifold


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 10
    factor: float = 0.5
    clip_norm: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.factor < 1:
            raise ValueError("factor must be in (0, 1)")


@dataclass
class MomentState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "MomentState":
        return MomentState({k: a.copy() for k, a in self.m.items()},
                           {k: a.copy() for k, a in self.v.items()}, self.step)

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/step": np.array(self.step)}
        for k, a in self.m.items():
            out[f"{prefix}/m/{k}"] = a
        for k, a in self.v.items():
            out[f"{prefix}/v/{k}"] = a
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str) -> "MomentState":
        st = cls(step=int(arrays[f"{prefix}/step"]))
        for key, a in arrays.items():
            if key.startswith(f"{prefix}/m/"):
                st.m[key[len(prefix) + 3:]] = a
            elif key.startswith(f"{prefix}/v/"):
                st.v[key[len(prefix) + 3:]] = a
        return st


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads, total
    s = max_norm / total
    return {k: g * s for k, g in grads.items()}, total


def _moments(name, g, state, cfg):
    b1, b2 = cfg.betas
    m = b1 * state.m.get(name, np.zeros_like(g)) + (1 - b1) * g
    v = b2 * state.v.get(name, np.zeros_like(g)) + (1 - b2) * g * g
    state.m[name], state.v[name] = m, v
    t = state.step
    return (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + cfg.eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: MomentState,
              cfg: OptimConfig = OptimConfig(), lr: float | None = None):
    """Bias-corrected Adam.  Returns (new params, new state); inputs are not mutated."""
    _check_finite(grads)
    lr = cfg.lr if lr is None else lr
    state = state.copy()
    state.step += 1
    out = dict(params)
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
        out[name] = params[name] - lr * _moments(name, g, state, cfg)
    return out, state


def riemannian_grad_at_origin(p, egrad, kappa):
    """Euclidean gradient -> Riemannian gradient at p, expressed in the
    tangent frame at the origin.

    The Riemannian gradient is egrad / lambda_p^2; the Moebius translation
    y -> p (+) y has differential (2 / lambda_p) I at y = 0, so the same
    displacement seen from the origin is (lambda_p / 2) times it.
    """
    lam = np.asarray(manifold.conformal_factor(p, kappa))
    return egrad / (2.0 * lam)


def radam_step(ball_params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: MomentState,
               kappa: float, cfg: OptimConfig = OptimConfig(), lr: float | None = None):
    """Riemannian Adam with moments kept in the origin tangent frame.

    Step: p <- clamp(p (+) exp_0(-lr * m_hat / (sqrt(v_hat) + eps))).
    """
    _check_finite(grads)
    lr = cfg.lr if lr is None else lr
    state = state.copy()
    state.step += 1
    out = dict(ball_params)
    for name, g in grads.items():
        p = ball_params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        r0 = riemannian_grad_at_origin(p, g, kappa)
        step = -lr * _moments(name, r0, state, cfg)
        out[name] = manifold.mobius_add(p, manifold.exp_map0(step, kappa), kappa)
    return out, state


def plateau_schedule(history, patience: int = 10, factor: float = 0.5) -> float:
    """Learning-rate multiplier after the given validation losses.

    Halves each time ``patience`` consecutive epochs fail to beat the best
    loss so far; the counter restarts after each halving.
    """
    if len(history) == 0:
        raise ValueError("plateau_schedule needs at least one validation loss")
    mult, best, bad = 1.0, np.inf, 0
    for loss in history:
        if loss < best:
            best, bad = loss, 0
        else:
            bad += 1
            if bad >= patience:
                mult *= factor
                bad = 0
    return mult


class Optimizer:
    """Routes Euclidean parameters to Adam and ball parameters to Riemannian Adam."""

    def __init__(self, ball_params: set[str], kappa: float | None, cfg: OptimConfig = OptimConfig()):
        if ball_params and kappa is None:
            raise ValueError("ball parameters need a curvature")
        self.ball = set(ball_params)
        self.kappa = kappa
        self.cfg = cfg
        self.euclid_state = MomentState()
        self.ball_state = MomentState()

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        _check_finite(grads)
        grads, _ = clip_global_norm(grads, self.cfg.clip_norm)
        e_grads = {k: g for k, g in grads.items() if k not in self.ball}
        b_grads = {k: g for k, g in grads.items() if k in self.ball}
        new, self.euclid_state = adam_step(params, e_grads, self.euclid_state, self.cfg, lr)
        if b_grads:
            upd, self.ball_state = radam_step({k: params[k] for k in b_grads}, b_grads,
                                              self.ball_state, self.kappa, self.cfg, lr)
            new.update(upd)
        return new

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {**self.euclid_state.to_arrays("adam"), **self.ball_state.to_arrays("radam")}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.euclid_state = MomentState.from_arrays(arrays, "adam")
        self.ball_state = MomentState.from_arrays(arrays, "radam")

"""Poincare-ball geometry with origin-centred exp/log maps.

Curvature is configured signed (``c <= 0``) and every formula uses the
magnitude ``kappa = |c|``.  Points are arrays whose last axis is the
embedding dimension; all functions broadcast over leading axes and accept
:mod:`hypsep.diffkit` tensors as well as plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkit as dk
from .diffkit import EPS_BALL


class OutsideBallError(ValueError):
    pass


class CurvatureMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Curvature:
    c: float = -1.0

    def __post_init__(self):
        if not np.isfinite(self.c) or self.c > 0:
            raise ValueError(f"curvature must be finite and <= 0, got {self.c}")

    @property
    def kappa(self) -> float:
        if self.c == 0:
            raise ValueError("c = 0 is Euclidean; no ball geometry is defined")
        return abs(self.c)

    @property
    def is_euclidean(self) -> bool:
        return self.c == 0


def _kappa(k) -> float:
    k = k.kappa if isinstance(k, Curvature) else float(k)
    if not k > 0:
        raise ValueError(f"kappa must be > 0, got {k}")
    return k


def _sqnorm(x):
    return dk.sum(dk.square(x), axis=-1, keepdims=True)


def _inner(a, b):
    return dk.sum(dk.mul(a, b), axis=-1, keepdims=True)


def _require_inside(x, kappa, what="point"):
    xv = dk.value(x)
    if not np.all(np.isfinite(xv)):
        raise OutsideBallError(f"{what} has non-finite coordinates")
    if np.any(kappa * np.sum(xv * xv, axis=-1) >= 1.0):
        raise OutsideBallError(f"{what} lies on or outside the ball of radius {1 / np.sqrt(kappa):.6g}")


def max_radius(kappa) -> float:
    return float(np.sqrt((1.0 - EPS_BALL) / _kappa(kappa)))


def clamp_to_ball(x, kappa):
    """Pull points with kappa*|x|^2 >= 1 - eps radially back onto that shell."""
    kappa = _kappa(kappa)
    r = max_radius(kappa)
    n = dk.norm(x)
    return dk.mul(x, dk.div(r, dk.maximum(n, r)))


def conformal_factor(x, kappa):
    kappa = _kappa(kappa)
    _require_inside(x, kappa)
    return dk.div(2.0, dk.sub(1.0, dk.mul(kappa, _sqnorm(x))))


def exp_map0(v, kappa):
    kappa = _kappa(kappa)
    sk = np.sqrt(kappa)
    y = dk.mul(dk.tanhc(dk.mul(sk, dk.norm(v))), v)
    return clamp_to_ball(y, kappa)


def log_map0(y, kappa):
    kappa = _kappa(kappa)
    _require_inside(y, kappa)
    sk = np.sqrt(kappa)
    return dk.mul(dk.atanhc(dk.mul(sk, dk.norm(y))), y)


def mobius_add(a, b, kappa):
    kappa = _kappa(kappa)
    ab = _inner(a, b)
    a2 = _sqnorm(a)
    b2 = _sqnorm(b)
    coef_a = dk.add(dk.add(1.0, dk.mul(2.0 * kappa, ab)), dk.mul(kappa, b2))
    coef_b = dk.sub(1.0, dk.mul(kappa, a2))
    den = dk.add(dk.add(1.0, dk.mul(2.0 * kappa, ab)), dk.mul(kappa * kappa, dk.mul(a2, b2)))
    den = dk.maximum(den, 1e-15)
    out = dk.div(dk.add(dk.mul(coef_a, a), dk.mul(coef_b, b)), den)
    return clamp_to_ball(out, kappa)


def mobius_scalar_mul(r, a, kappa):
    return exp_map0(dk.mul(r, log_map0(a, kappa)), kappa)


def dist(a, b, kappa):
    """Geodesic distance (2/sqrt(kappa)) * atanh(sqrt(kappa) * |(-a) + b|)."""
    kappa = _kappa(kappa)
    _require_inside(a, kappa)
    _require_inside(b, kappa)
    sk = np.sqrt(kappa)
    w = mobius_add(dk.neg(a), b, kappa)
    d = dk.mul(2.0 / sk, dk.atanh(dk.mul(sk, dk.norm(w))))
    return dk.reshape(d, dk.value(d).shape[:-1])


def dist_cosh(a, b, kappa):
    """Same distance through the arccosh form; poorly conditioned for tiny distances."""
    kappa = _kappa(kappa)
    _require_inside(a, kappa)
    _require_inside(b, kappa)
    num = dk.mul(2.0 * kappa, _sqnorm(dk.sub(a, b)))
    den = dk.mul(dk.sub(1.0, dk.mul(kappa, _sqnorm(a))), dk.sub(1.0, dk.mul(kappa, _sqnorm(b))))
    d = dk.div(dk.acosh(dk.maximum(dk.add(1.0, dk.div(num, den)), 1.0)), np.sqrt(kappa))
    return dk.reshape(d, dk.value(d).shape[:-1])


def in_ball(x, kappa, tol: float = 1e-12) -> bool:
    """True when every point satisfies kappa*|x|^2 <= 1 - eps (up to ``tol``)."""
    xv = dk.value(x)
    return bool(np.all(_kappa(kappa) * np.sum(xv * xv, axis=-1) <= (1.0 - EPS_BALL) * (1.0 + tol)))


@dataclass(frozen=True)
class BallPoint:
    """A point of the ball tagged with its curvature magnitude."""

    coords: np.ndarray
    kappa: float

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        _require_inside(coords, _kappa(self.kappa))
        object.__setattr__(self, "coords", coords)

    def _same(self, other: "BallPoint"):
        if not np.isclose(self.kappa, other.kappa, rtol=0, atol=0):
            raise CurvatureMismatchError(f"kappa {self.kappa} vs {other.kappa}")

    def __add__(self, other: "BallPoint") -> "BallPoint":
        self._same(other)
        return BallPoint(mobius_add(self.coords, other.coords, self.kappa), self.kappa)

    def __neg__(self) -> "BallPoint":
        return BallPoint(-self.coords, self.kappa)

    def __rmul__(self, r: float) -> "BallPoint":
        return BallPoint(mobius_scalar_mul(r, self.coords, self.kappa), self.kappa)

    def dist(self, other: "BallPoint") -> float:
        self._same(other)
        return float(dist(self.coords, other.coords, self.kappa))

    def log0(self) -> np.ndarray:
        return log_map0(self.coords, self.kappa)

    @classmethod
    def exp0(cls, v, kappa: float) -> "BallPoint":
        return cls(exp_map0(np.asarray(v, dtype=np.float64), kappa), kappa)

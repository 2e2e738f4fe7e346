"""Separator network: per-bin embeddings, optional ball projection and the
hierarchical (parent + per-parent child) MLR heads."""

from __future__ import annotations

import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from . import diffkit as dk
from . import manifold

MASK_TOL = 1e-6
CHECKPOINT_VERSION = 1
# runtime normalization / ball-membership assertions; switched off only for benchmarking
RUNTIME_CHECKS = True


class MaskNormalizationError(AssertionError):
    pass


class DegenerateNormalError(ValueError):
    pass


BACKBONES = ("feedforward-context", "recurrent", "bin-stats")
STAT_WINDOWS = (5, 17, 33)
STAT_PERCENTILES = (50, 90, 99)
N_FREQ_ENC = 4


@dataclass(frozen=True)
class EncoderConfig:
    n_bins: int = 257
    context: int = 2
    hidden: tuple[int, ...] = (128, 128)
    embed_dim: int = 2
    dropout: float = 0.0
    backbone: str = "feedforward-context"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.context < 0 or not self.hidden:
            raise ValueError("context must be >= 0 and at least one hidden layer is needed")

    @classmethod
    def desk(cls, n_bins: int = 257) -> "EncoderConfig":
        """Per-bin network over utterance statistics; the desk-scale default for trained runs."""
        return cls(n_bins=n_bins, context=0, hidden=(64, 64), embed_dim=2, backbone="bin-stats")

    @classmethod
    def full(cls, n_bins: int = 257) -> "EncoderConfig":
        """Full-scale shape: four 600-unit recurrent layers, dropout 0.3.

        Recorded for reference; the desk-scale runs never build it.
        """
        return cls(n_bins=n_bins, context=0, hidden=(600, 600, 600, 600), embed_dim=2,
                   dropout=0.3, backbone="recurrent")


TABLE1_DENSITIES = {
    2: ((2, 0), (2, 1), (2, 2), (1, 2), (0, 2)),
    3: ((3, 0), (3, 1), (2, 2), (1, 3), (0, 3)),
}


@dataclass(frozen=True)
class HierarchySpec:
    """Two parents (near, far), each with ``children`` child slots.

    Leaves 0..children-1 belong to near, the rest to far.
    """

    children: int = 2

    def __post_init__(self):
        if self.children not in (2, 3):
            raise ValueError(f"children per parent must be 2 or 3, got {self.children}")

    @property
    def slots(self) -> tuple[int, int]:
        return (self.children, self.children)

    @property
    def n_leaves(self) -> int:
        return 2 * self.children

    @property
    def leaf_parent(self) -> tuple[int, ...]:
        return (0,) * self.children + (1,) * self.children

    def densities(self) -> tuple[tuple[int, int], ...]:
        return TABLE1_DENSITIES[self.children]

    def check_density(self, density) -> tuple[int, int]:
        n, f = (int(v) for v in density)
        if n < 0 or f < 0 or n + f < 1 or n > self.children or f > self.children or n + f > 4:
            raise ValueError(f"density {{{n},{f}}} is not valid for {self.children} children per parent")
        return n, f


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hierarchy: HierarchySpec = field(default_factory=HierarchySpec)
    c: float = -1.0
    levels: str = "two-level"
    child_mask: str = "joint"

    def __post_init__(self):
        manifold.Curvature(self.c)
        if self.levels not in ("parent", "two-level"):
            raise ValueError(f"levels must be 'parent' or 'two-level', got {self.levels!r}")
        if self.child_mask not in ("joint", "conditional"):
            raise ValueError(f"child_mask must be 'joint' or 'conditional', got {self.child_mask!r}")

    @property
    def hyperbolic(self) -> bool:
        return self.c != 0

    @property
    def kappa(self) -> float:
        return manifold.Curvature(self.c).kappa

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder"))
        hier = HierarchySpec(**d.pop("hierarchy"))
        return cls(encoder=enc, hierarchy=hier, **d)


# --- features ---------------------------------------------------------------

def features(X) -> np.ndarray:
    """log(1 + |X|), normalized to zero mean / unit variance per utterance."""
    f = np.log1p(np.abs(X))
    std = f.std()
    return (f - f.mean()) / (std if std > 0 else 1.0)


def context_stack(feats, radius: int) -> np.ndarray:
    """(T, F) -> (T, (2r+1)F): each frame with its zero-padded neighbours."""
    T, F = feats.shape
    padded = np.zeros((T + 2 * radius, F), dtype=feats.dtype)
    padded[radius:radius + T] = feats
    return np.concatenate([padded[k:k + T] for k in range(2 * radius + 1)], axis=1)


# --- parameters -------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> tuple[dict[str, np.ndarray], set[str]]:
    """Fresh parameters and the names of the ball-valued ones."""
    enc = cfg.encoder
    params: dict[str, np.ndarray] = {}
    if enc.backbone in ("feedforward-context", "bin-stats"):
        fan_in = n_stat_features() if enc.backbone == "bin-stats" else (2 * enc.context + 1) * enc.n_bins
        for i, width in enumerate(enc.hidden):
            params[f"enc.w{i}"] = _uniform(rng, fan_in, (fan_in, width))
            params[f"enc.b{i}"] = _uniform(rng, fan_in, (width,))
            fan_in = width
    else:
        fan_in = (2 * enc.context + 1) * enc.n_bins
        for i, width in enumerate(enc.hidden):
            for d in ("fw", "bw"):
                params[f"enc.{d}{i}.wx"] = _uniform(rng, fan_in, (fan_in, width))
                params[f"enc.{d}{i}.wh"] = _uniform(rng, width, (width, width))
                params[f"enc.{d}{i}.b"] = _uniform(rng, fan_in, (width,))
            fan_in = 2 * width
    if enc.backbone == "bin-stats":
        params["enc.out.w"] = _uniform(rng, fan_in, (fan_in, enc.embed_dim))
        params["enc.out.b"] = _uniform(rng, fan_in, (enc.embed_dim,))
    else:
        out_dim = enc.n_bins * enc.embed_dim
        params["enc.out.w"] = _uniform(rng, fan_in, (fan_in, out_dim))
        params["enc.out.b"] = _uniform(rng, fan_in, (out_dim,))

    heads = [("parent", 2)]
    if cfg.levels == "two-level":
        heads.append(("child", cfg.hierarchy.n_leaves))
    ball: set[str] = set()
    L = enc.embed_dim
    for name, k in heads:
        if cfg.hyperbolic:
            params[f"{name}.a"] = 0.01 * rng.standard_normal((k, L))
            params[f"{name}.p"] = manifold.exp_map0(0.01 * rng.standard_normal((k, L)), cfg.kappa)
            ball.add(f"{name}.p")
        else:
            params[f"{name}.w"] = _uniform(rng, L, (k, L))
            params[f"{name}.b"] = _uniform(rng, L, (k,))
    return params, ball


def repair_normals(params: dict, rng: np.random.Generator, min_norm: float = 1e-8) -> int:
    """Re-randomize collapsed MLR normals in place; returns how many were reset."""
    reset = 0
    for name, a in params.items():
        if not name.endswith(".a"):
            continue
        bad = np.linalg.norm(a, axis=-1) < min_norm
        if bad.any():
            a[bad] = 0.01 * rng.standard_normal((int(bad.sum()), a.shape[-1]))
            reset += int(bad.sum())
    return reset


# --- layers -----------------------------------------------------------------

def _dropout(h, rate, rng):
    if rate <= 0 or rng is None:
        return h
    keep = (rng.uniform(size=dk.value(h).shape) >= rate) / (1.0 - rate)
    return dk.mul(h, keep)


def _recurrent(params, x, enc: EncoderConfig, train, rng):
    """Bidirectional tanh recurrence over frames; x is (T, D)."""
    T = dk.value(x).shape[0]
    h_in = x
    for i, width in enumerate(enc.hidden):
        outs = {}
        for d, order in (("fw", range(T)), ("bw", range(T - 1, -1, -1))):
            wx, wh, b = (params[f"enc.{d}{i}.{n}"] for n in ("wx", "wh", "b"))
            proj = dk.add(dk.matmul(h_in, wx), b)
            h = np.zeros((1, width))
            steps = [None] * T
            for t in order:
                h = dk.tanh(dk.add(proj[t:t + 1], dk.matmul(h, wh)))
                steps[t] = h
            outs[d] = dk.concat(steps, axis=0)
        h_in = dk.concat([outs["fw"], outs["bw"]], axis=1)
        if train and i < len(enc.hidden) - 1:
            h_in = _dropout(h_in, enc.dropout, rng)
    return h_in


def bin_stats(feats) -> np.ndarray:
    """(T, F) -> (T*F, n_stat_features): a fixed per-bin descriptor.

    Local running max/min over several frame windows, the two neighbouring
    bins on each side, per-frequency percentiles over the utterance, a few
    utterance-wide statistics and the frequency encoding.
    """
    T, F = feats.shape
    cols = [feats]
    for w in STAT_WINDOWS:
        cols += [maximum_filter1d(feats, w, axis=0, mode="nearest"),
                 minimum_filter1d(feats, w, axis=0, mode="nearest")]
    padded = np.pad(feats, ((0, 0), (2, 2)), mode="edge")
    cols += [padded[:, 2 + d:2 + d + F] for d in (-2, -1, 1, 2)]
    for q in np.percentile(feats, STAT_PERCENTILES, axis=0):
        cols.append(np.broadcast_to(q, (T, F)))
    depth = maximum_filter1d(feats, 17, axis=0) - minimum_filter1d(feats, 17, axis=0)
    for g in (depth.mean(), np.percentile(feats, 90), feats.std()):
        cols.append(np.full((T, F), g))
    pos = np.arange(F) / max(F - 1, 1)
    for enc_row in (pos, np.sin(np.pi * pos), np.cos(np.pi * pos), np.sin(2 * np.pi * pos)):
        cols.append(np.broadcast_to(enc_row, (T, F)))
    return np.stack(cols, axis=-1).reshape(T * F, -1)


def n_stat_features() -> int:
    return 1 + 2 * len(STAT_WINDOWS) + 4 + len(STAT_PERCENTILES) + 3 + N_FREQ_ENC


def _bin_mlp(params, x, enc: EncoderConfig, train, rng):
    h = x
    for i in range(len(enc.hidden)):
        h = dk.tanh(dk.add(dk.matmul(h, params[f"enc.w{i}"]), params[f"enc.b{i}"]))
        if train and i < len(enc.hidden) - 1:
            h = _dropout(h, enc.dropout, rng)
    return dk.add(dk.matmul(h, params["enc.out.w"]), params["enc.out.b"])


def encode(params, feats, enc: EncoderConfig, train: bool = False, rng=None, rows=None, inputs=None):
    """(T, F) features -> (T*F, L) embeddings, one row per TF bin.

    ``rows`` keeps only those flattened bins; the bin-stats backbone then
    skips the network for the rest.  ``inputs`` is a precomputed
    ``bin_stats(feats)`` (bin-stats only), cached by the trainer.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != enc.n_bins:
        raise ValueError(f"features of shape {feats.shape} do not match {enc.n_bins} bins")
    T = feats.shape[0]
    if enc.backbone == "bin-stats":
        x = bin_stats(feats) if inputs is None else inputs
        x = np.asarray(x if rows is None else x[rows], dtype=np.float64)
        return _bin_mlp(params, x, enc, train, rng)
    if rows is not None:
        return dk.getitem(encode(params, feats, enc, train, rng), rows)
    x = context_stack(feats, enc.context)
    if enc.backbone == "feedforward-context":
        h = x
        for i in range(len(enc.hidden)):
            h = dk.tanh(dk.add(dk.matmul(h, params[f"enc.w{i}"]), params[f"enc.b{i}"]))
            if train and i < len(enc.hidden) - 1:
                h = _dropout(h, enc.dropout, rng)
    else:
        h = _recurrent(params, x, enc, train, rng)
    z = dk.add(dk.matmul(h, params["enc.out.w"]), params["enc.out.b"])
    return dk.reshape(z, (T * enc.n_bins, enc.embed_dim))


def project(Z, kappa):
    """Map embeddings onto the ball; exp_map0 already ends with the clamp."""
    H = manifold.exp_map0(Z, kappa)
    if RUNTIME_CHECKS and not manifold.in_ball(H, kappa):
        raise AssertionError("projected embedding escaped the ball")
    return H


def euclid_mlr(Z, W, b):
    """Linear logits Z W^T + b, shape (N, K)."""
    return dk.add(dk.matmul(Z, dk.transpose(W)), b)


def hmlr_logits(H, P, A, kappa):
    """Signed hyperbolic MLR logits for every row of H against every class.

    Uses the closed form of w = (-p) (+) H through inner products so that only
    (N, K) arrays are formed:  w = alpha * (-p) + beta * H.
    """
    kappa = float(kappa)
    a_norm = dk.norm(A, axis=-1, keepdims=False)
    if np.any(dk.value(a_norm) < 1e-8):
        raise DegenerateNormalError("an MLR normal a_k has collapsed below 1e-8")
    sk = np.sqrt(kappa)
    lam = dk.reshape(manifold.conformal_factor(P, kappa), (dk.value(P).shape[0],))
    h2 = dk.sum(dk.square(H), axis=-1, keepdims=True)            # (N, 1)
    p2 = dk.sum(dk.square(P), axis=-1, keepdims=False)           # (K,)
    ph = dk.matmul(H, dk.transpose(P))                           # (N, K)
    pa = dk.sum(dk.mul(P, A), axis=-1, keepdims=False)           # (K,)
    ha = dk.matmul(H, dk.transpose(A))                           # (N, K)
    # (-p) (+) H  with  <-p, H> = -ph
    num_a = dk.add(dk.sub(1.0, dk.mul(2.0 * kappa, ph)), dk.mul(kappa, h2))
    num_b = dk.sub(1.0, dk.mul(kappa, p2))
    den = dk.add(dk.sub(1.0, dk.mul(2.0 * kappa, ph)), dk.mul(kappa * kappa, dk.mul(p2, h2)))
    den = dk.maximum(den, 1e-15)
    alpha = dk.div(num_a, den)
    beta = dk.div(num_b, den)
    w_a = dk.sub(dk.mul(beta, ha), dk.mul(alpha, pa))
    w2 = dk.add(dk.sub(dk.mul(dk.square(alpha), p2), dk.mul(2.0 * dk.mul(alpha, beta), ph)),
                dk.mul(dk.square(beta), h2))
    w2 = dk.maximum(w2, 0.0)
    # same radial clamp as manifold.clamp_to_ball, applied through the scalars
    r = manifold.max_radius(kappa)
    scale = dk.div(r, dk.maximum(dk.sqrt(dk.maximum(w2, 1e-300)), r))
    w_a = dk.mul(w_a, scale)
    w2 = dk.mul(w2, dk.square(scale))
    arg = dk.div(dk.mul(2.0 * sk, w_a), dk.mul(dk.sub(1.0, dk.mul(kappa, w2)), a_norm))
    return dk.mul(dk.div(dk.mul(lam, a_norm), sk), dk.asinh(arg))


def hmlr_logit(H, p, a, kappa) -> float:
    """Logit of a single point against a single class (p, a)."""
    H = np.asarray(H, dtype=np.float64).reshape(1, -1)
    out = hmlr_logits(H, np.reshape(p, (1, -1)), np.reshape(a, (1, -1)), kappa)
    return float(np.asarray(out)[0, 0])


def groupwise_softmax(logits, slots):
    """Softmax within consecutive groups of columns."""
    parts, start = [], 0
    for n in slots:
        parts.append(dk.softmax(logits[:, start:start + n], axis=-1))
        start += n
    return dk.concat(parts, axis=-1)


def check_masks(parent, child=None, slots=None, joint=None, tol: float = MASK_TOL) -> None:
    """Assert the per-bin normalization contracts of the hierarchical head."""
    pv = dk.value(parent)
    if np.max(np.abs(pv.sum(axis=-1) - 1.0)) > tol:
        raise MaskNormalizationError("parent masks do not sum to 1")
    if child is not None:
        cv = dk.value(child)
        start = 0
        for n in slots:
            if np.max(np.abs(cv[:, start:start + n].sum(axis=-1) - 1.0)) > tol:
                raise MaskNormalizationError("child conditional masks do not sum to 1 within a parent")
            start += n
    if joint is not None:
        if np.max(np.abs(dk.value(joint).sum(axis=-1) - 1.0)) > tol:
            raise MaskNormalizationError("joint leaf masks do not sum to 1")


@dataclass
class HeadOutput:
    parent: object                 # (N, 2) posteriors
    child: object = None           # (N, K) conditional posteriors, groupwise normalized
    joint: object = None           # (N, K) parent x child

    def leaf_masks(self, mode: str = "joint"):
        return self.joint if mode == "joint" else self.child


def hierarchical_head(emb, params, cfg: ModelConfig) -> HeadOutput:
    """Parent posteriors plus per-parent conditional child posteriors.

    ``emb`` is H (ball points) for a hyperbolic model and Z otherwise.
    """
    hier = cfg.hierarchy

    def logits(name):
        if cfg.hyperbolic:
            return hmlr_logits(emb, params[f"{name}.p"], params[f"{name}.a"], cfg.kappa)
        return euclid_mlr(emb, params[f"{name}.w"], params[f"{name}.b"])

    parent = dk.softmax(logits("parent"), axis=-1)
    if cfg.levels == "parent":
        if RUNTIME_CHECKS:
            check_masks(parent)
        return HeadOutput(parent=parent)
    child_logits = logits("child")
    if dk.value(child_logits).shape[-1] != hier.n_leaves:
        raise ValueError("child head size does not match the hierarchy")
    child = groupwise_softmax(child_logits, hier.slots)
    parent_per_leaf = dk.getitem(parent, (slice(None), list(hier.leaf_parent)))
    joint = dk.mul(parent_per_leaf, child)
    if RUNTIME_CHECKS:
        check_masks(parent, child, hier.slots, joint)
    return HeadOutput(parent=parent, child=child, joint=joint)


@dataclass
class ForwardOutput:
    Z: object
    H: object
    head: HeadOutput


class Separator:
    """Parameters plus the forward pass for one utterance at a time."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 ball_params: set[str] | None = None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            params, ball_params = init_params(cfg, np.random.default_rng(seed))
        self.params = params
        self.ball_params = set(ball_params or ())
        if not cfg.hyperbolic and self.ball_params:
            raise AssertionError("a Euclidean model must not own ball-valued parameters")

    def forward(self, feats, params=None, train: bool = False, rng=None, rows=None, inputs=None) -> ForwardOutput:
        params = self.params if params is None else params
        Z = encode(params, feats, self.cfg.encoder, train=train, rng=rng, rows=rows, inputs=inputs)
        if self.cfg.hyperbolic:
            H = project(Z, self.cfg.kappa)
            head = hierarchical_head(H, params, self.cfg)
        else:
            H = None
            head = hierarchical_head(Z, params, self.cfg)
        return ForwardOutput(Z=Z, H=H, head=head)

    def masks(self, feats) -> dict[str, np.ndarray]:
        """Untaped inference; masks reshaped to (T, F, ...)."""
        T = feats.shape[0]
        F = self.cfg.encoder.n_bins
        out = self.forward(feats)
        res = {"parent": np.asarray(out.head.parent).reshape(T, F, 2)}
        if out.head.child is not None:
            res["child"] = np.asarray(out.head.child).reshape(T, F, -1)
            res["joint"] = np.asarray(out.head.joint).reshape(T, F, -1)
        if out.H is not None:
            res["H"] = np.asarray(out.H).reshape(T, F, -1)
        return res


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model: Separator, extra: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> Path:
    """Write an .npz container atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CHECKPOINT_VERSION,
        "model": model.cfg.to_dict(),
        "c": model.cfg.c,
        "ball_params": sorted(model.ball_params),
        "extra": extra or {},
    }
    payload = {f"param/{k}": v for k, v in model.params.items()}
    for k, v in (arrays or {}).items():
        payload[f"aux/{k}"] = v
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **payload)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[Separator, dict, dict[str, np.ndarray]]:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
        aux = {k[len("aux/"):]: data[k].copy() for k in data.files if k.startswith("aux/")}
    cfg = ModelConfig.from_dict(header["model"])
    model = Separator(cfg, params=params, ball_params=set(header["ball_params"]))
    return model, header["extra"], aux

"""Certainty analysis: per-bin embedding norms grouped by acoustic condition."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import nn
from . import signal as sig
from .scene import Manifest, density_tag

FLOOR_DB = -60.0


class EuclideanCheckpointError(ValueError):
    pass


class EmptyConditionWarning(UserWarning):
    pass


@dataclass
class NormSamples:
    """Column-oriented samples: one entry per retained TF bin."""

    scene_id: np.ndarray
    bin_index: np.ndarray
    source: np.ndarray      # IBM-dominant source index within the scene
    norm: np.ndarray
    condition: np.ndarray

    def __len__(self):
        return len(self.norm)

    @classmethod
    def concat(cls, parts: list["NormSamples"]) -> "NormSamples":
        if not parts:
            e = np.array([])
            return cls(e.astype(str), e.astype(int), e.astype(int), e, e.astype(str))
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("scene_id", "bin_index", "source", "norm", "condition")))


def condition_tag(record: dict) -> str:
    cond = record.get("condition") or {}
    if "relative_distance" in cond:
        return f"{cond['relative_distance']:.2f}"
    if "mic_distance" in cond:
        return f"{cond['mic_distance']:.2f}"
    return density_tag(record["density"])


def scene_norms(model: nn.Separator, record: dict, root: Path, sample_rate: int,
                stft_cfg: sig.StftConfig = sig.StftConfig(), floor_db: float = FLOOR_DB) -> NormSamples:
    files = record["files"]
    mix = sig.read_wav(root / files["mix"], sample_rate)
    X = sig.stft(mix, stft_cfg)
    mag = np.abs(X)
    peak = mag.max()
    keep = (mag > peak * 10.0 ** (floor_db / 20.0)) if peak > 0 else np.zeros(mag.shape, bool)
    keep = keep.ravel()
    n = int(keep.sum())
    tag = condition_tag(record)
    if n == 0:
        return NormSamples(np.full(0, record["id"]), np.zeros(0, int), np.zeros(0, int), np.zeros(0),
                           np.full(0, tag))
    H = model.masks(nn.features(X))["H"].reshape(-1, model.cfg.encoder.embed_dim)
    specs = [np.abs(sig.stft(sig.read_wav(root / files[f"src{k}"], sample_rate), stft_cfg))
             for k in range(len(record["sources"]))]
    dominant = sig.dominant_index(specs).ravel()
    idx = np.flatnonzero(keep)
    return NormSamples(np.full(n, record["id"]), idx, dominant[idx], np.linalg.norm(H[idx], axis=-1),
                       np.full(n, tag))


def collect_norms(checkpoint, manifest: Manifest, stft_cfg: sig.StftConfig = sig.StftConfig(),
                  floor_db: float = FLOOR_DB) -> NormSamples:
    """Ball-point norms of every TF bin above the energy floor, per scene.

    Each bin is attributed to the source that dominates it in the ideal
    binary mask.
    """
    model = checkpoint if isinstance(checkpoint, nn.Separator) else nn.load_checkpoint(checkpoint)[0]
    if not model.cfg.hyperbolic:
        raise EuclideanCheckpointError("norm analysis needs a hyperbolic checkpoint (c < 0)")
    parts = [scene_norms(model, rec, manifest.root, manifest.sample_rate, stft_cfg, floor_db)
             for rec in manifest.scenes]
    out = NormSamples.concat(parts)
    bound = manifold_bound(model.cfg.kappa)
    if len(out) and out.norm.max() >= bound:
        raise AssertionError("embedding norm reached the ball boundary")
    return out


def manifold_bound(kappa: float) -> float:
    return 1.0 / np.sqrt(kappa)


@dataclass
class ConditionSummary:
    condition: str
    mean: float
    median: float
    count: int


def histogram_by_condition(samples: NormSamples, bins=20, range_=None, conditions=None):
    """Area-normalized norm histograms and summary statistics per condition.

    Returns (edges, {condition: density}, [ConditionSummary]).
    """
    if len(samples) == 0:
        raise ValueError("no samples to histogram")
    if conditions is None:
        conditions = list(dict.fromkeys(samples.condition.tolist()))
    if range_ is None:
        range_ = (0.0, float(samples.norm.max()) or 1.0)
    edges = np.histogram_bin_edges(samples.norm, bins=bins, range=range_)
    hists, summary = {}, []
    for c in conditions:
        vals = samples.norm[samples.condition == c]
        if vals.size == 0:
            warnings.warn(f"condition {c!r} has no samples", EmptyConditionWarning)
            hists[c] = np.zeros(len(edges) - 1)
            summary.append(ConditionSummary(c, float("nan"), float("nan"), 0))
            continue
        hists[c] = np.histogram(vals, bins=edges, density=True)[0]
        summary.append(ConditionSummary(c, float(vals.mean()), float(np.median(vals)), int(vals.size)))
    return edges, hists, summary


def write_histograms(path, edges, hists) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "bin_left", "bin_right", "density_value"])
        for c, h in hists.items():
            for lo, hi, v in zip(edges[:-1], edges[1:], h):
                w.writerow([c, lo, hi, v])
    return path


def write_summary(path, summary: list[ConditionSummary]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "mean", "median", "count"])
        for s in summary:
            w.writerow([s.condition, s.mean, s.median, s.count])
    return path


@dataclass
class TrendReport:
    rho: float
    sign: int
    passed: bool
    n_conditions: int


def trend_test(means, order=None) -> TrendReport:
    """Spearman correlation between condition order and mean norm.

    ``means`` is either a sequence already in condition order or a mapping
    together with ``order``.  Passes when rho > 0.
    """
    if order is not None:
        means = [means[c] for c in order]
    means = np.asarray(means, dtype=np.float64)
    if means.size < 3:
        raise ValueError("a trend test needs at least 3 ordered conditions")
    rho = float(spearmanr(np.arange(means.size), means).statistic)
    return TrendReport(rho, int(np.sign(rho)), bool(rho > 0), int(means.size))


def write_points(path, model: nn.Separator, record: dict, root: Path, sample_rate: int,
                 stft_cfg: sig.StftConfig = sig.StftConfig(), max_points: int | None = 5000, seed: int = 0) -> Path:
    """Raw ball coordinates of one scene's bins with their dominant source (disk scatter data)."""
    if not model.cfg.hyperbolic:
        raise EuclideanCheckpointError("point export needs a hyperbolic checkpoint")
    s = scene_norms(model, record, root, sample_rate, stft_cfg)
    X = sig.stft(sig.read_wav(root / record["files"]["mix"], sample_rate), stft_cfg)
    H = model.masks(nn.features(X))["H"].reshape(-1, model.cfg.encoder.embed_dim)[s.bin_index]
    sel = np.arange(len(s))
    if max_points is not None and len(sel) > max_points:
        sel = np.sort(np.random.default_rng(seed).choice(len(sel), max_points, replace=False))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_index", "source"] + [f"h{i}" for i in range(H.shape[1])])
        for i in sel:
            w.writerow([s.bin_index[i], s.source[i], *H[i]])
    return path

"""Hierarchical cross-entropy losses with child-level PIT, the training loop,
evaluation in the Table-2/3 layout, and curvature sweeps."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffkit as dk
from . import nn
from . import signal as sig
from .optim import OptimConfig, Optimizer, plateau_schedule
from .scene import Manifest, density_tag

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
LOG_COLUMNS = ["epoch", "lr", "parent", "near", "far", "total", "val", "seconds"]


class NonFiniteLossError(FloatingPointError):
    pass


# --- losses -----------------------------------------------------------------

def cross_entropy(target, probs):
    """Mean over bins of CE(target || probs) with probabilities floored at 1e-7.

    ``target`` is a one-hot (or all-zero, for a silent group) mask of shape
    (N, K); ``probs`` may be a tensor.
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1, dk.value(probs).shape[-1])
    logp = dk.log(dk.clip(probs, PROB_FLOOR, 1.0))
    return dk.neg(dk.mean(dk.sum(dk.mul(target, logp), axis=-1)))


def loss_parent(target, probs):
    t = np.asarray(target)
    if t.reshape(-1, 2).shape[0] != dk.value(probs).shape[0]:
        raise ValueError(f"parent target with {t.size // 2} bins vs predictions {dk.value(probs).shape}")
    return cross_entropy(t, probs)


def _ce_matrix(target, probs_v):
    """C[j, i] = mean_n -target[n, j] * log p[n, i]."""
    logp = np.log(np.clip(probs_v, PROB_FLOOR, 1.0))
    return -(target.T @ logp) / target.shape[0]


def loss_children_pit(targets: dict[str, np.ndarray], child_probs, hierarchy: nn.HierarchySpec):
    """Sum of near and far child CE, minimized over slot permutations within
    each parent.  Returns (loss, (near_perm, far_perm), (near_loss, far_loss)).

    ``perm[j]`` is the predicted slot assigned to target slot j.  Parents are
    never permuted; a silent parent (all-zero target) contributes 0.
    """
    probs_v = dk.value(child_probs)
    if probs_v.shape[-1] != hierarchy.n_leaves:
        raise ValueError(f"child predictions have {probs_v.shape[-1]} slots, hierarchy has {hierarchy.n_leaves}")
    start = 0
    terms, perms = [], []
    for name, n in zip(("near", "far"), hierarchy.slots):
        t = np.asarray(targets[name], dtype=np.float64).reshape(-1, n)
        sl = (slice(None), slice(start, start + n))
        C = _ce_matrix(t, probs_v[sl])
        best, best_perm = np.inf, None
        for perm in itertools.permutations(range(n)):
            val = float(sum(C[j, perm[j]] for j in range(n)))
            if val < best:
                best, best_perm = val, perm
        permuted = np.zeros_like(t)
        permuted[:, list(best_perm)] = t
        terms.append(cross_entropy(permuted, dk.getitem(child_probs, sl)))
        perms.append(best_perm)
        start += n
    return dk.add(terms[0], terms[1]), tuple(perms), tuple(terms)


@dataclass
class LossBreakdown:
    parent: float
    near: float = 0.0
    far: float = 0.0

    @property
    def total(self) -> float:
        return self.parent + self.near + self.far


def compound_loss(head: nn.HeadOutput, targets: sig.IbmTargets, cfg: nn.ModelConfig, rows=None):
    """Total loss (tensor or float) and its breakdown; ``rows`` selects a
    subset of flattened TF bins matching a subsampled forward pass."""
    def pick(mask):
        mask = mask.reshape(-1, mask.shape[-1])
        return mask if rows is None else mask[rows]

    lp = loss_parent(pick(targets.parent_mask()), head.parent)
    if cfg.levels == "parent":
        return lp, LossBreakdown(float(dk.value(lp)))
    lc, _, (ln, lf) = loss_children_pit(
        {"near": pick(targets.child_mask("near")), "far": pick(targets.child_mask("far"))}, head.child, cfg.hierarchy)
    total = dk.add(lp, lc)
    return total, LossBreakdown(float(dk.value(lp)), float(dk.value(ln)), float(dk.value(lf)))


# --- data -------------------------------------------------------------------

@dataclass
class Example:
    id: str
    density: tuple[int, int]
    feats: np.ndarray
    targets: sig.IbmTargets
    inputs: np.ndarray | None = None     # cached per-bin descriptors (bin-stats backbone)

    def encoder_inputs(self, enc: nn.EncoderConfig):
        if enc.backbone != "bin-stats":
            return None
        if self.inputs is None:
            self.inputs = nn.bin_stats(self.feats.astype(np.float64)).astype(np.float32)
        return self.inputs


def _targets_for(record, root: Path, manifest: Manifest, stft_cfg, slots):
    if "targets" in record and (root / record["targets"]).exists():
        with np.load(root / record["targets"]) as d:
            parent, near, far = d["parent"], d["near"], d["far"]
    else:
        specs = [sig.stft(sig.read_wav(root / record["files"][f"src{k}"], manifest.sample_rate), stft_cfg)
                 for k in range(len(record["sources"]))]
        t = sig.ibm_targets(specs, [s["label"] for s in record["sources"]], slots)
        parent, near, far = t.parent, t.near, t.far
    # int8 holds every slot index and keeps a 200-scene split small in memory
    return sig.IbmTargets(parent.astype(np.int8), near.astype(np.int8), far.astype(np.int8), tuple(slots))


def load_examples(manifest: Manifest, stft_cfg: sig.StftConfig, slots) -> list[Example]:
    root = manifest.root
    out = []
    for rec in manifest.scenes:
        mix = sig.read_wav(root / rec["files"]["mix"], manifest.sample_rate)
        feats = nn.features(sig.stft(mix, stft_cfg)).astype(np.float32)
        out.append(Example(rec["id"], tuple(rec["density"]), feats,
                           _targets_for(rec, root, manifest, stft_cfg, slots)))
    return out


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    bins_per_example: int | None = None    # random TF bins per example per step; None uses all
    draws_per_example: int = 1             # visits per example per epoch, each with fresh bins

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.bins_per_example is not None and self.bins_per_example < 1:
            raise ValueError("bins_per_example must be >= 1")
        if self.draws_per_example < 1:
            raise ValueError("draws_per_example must be >= 1")
        if self.draws_per_example > 1 and self.bins_per_example is None:
            raise ValueError("draws_per_example > 1 needs bins_per_example")

    @classmethod
    def desk(cls) -> "TrainConfig":
        return cls(batch_size=1, epochs=50, bins_per_example=1000, draws_per_example=8)

    @classmethod
    def full(cls, levels: str = "two-level") -> "TrainConfig":
        return cls(batch_size=96, epochs=300 if levels == "two-level" else 200)


@dataclass
class TrainResult:
    checkpoint: Path
    log: list[dict]
    model: nn.Separator
    best_val: float


def example_grads(model: nn.Separator, ex: Example, rng=None, n_bins: int | None = None):
    leaves = {k: dk.param(v, name=k) for k, v in model.params.items()}
    rows = None
    if n_bins is not None and n_bins < ex.feats.size:
        rows = np.sort(rng.choice(ex.feats.size, n_bins, replace=False))
    out = model.forward(ex.feats.astype(np.float64), params=leaves, train=True, rng=rng, rows=rows,
                        inputs=ex.encoder_inputs(model.cfg.encoder))
    total, breakdown = compound_loss(out.head, ex.targets, model.cfg, rows)
    if not np.isfinite(dk.value(total)):
        raise NonFiniteLossError(f"non-finite loss on {ex.id}")
    names = list(leaves)
    grads = dk.backward(total, [leaves[k] for k in names])
    return dict(zip(names, grads)), breakdown


def validation_loss(model: nn.Separator, examples: list[Example]) -> float:
    if not examples:
        return float("nan")
    vals = []
    for ex in examples:
        # descriptors are recomputed here rather than cached: validation runs once per epoch
        out = model.forward(ex.feats.astype(np.float64), inputs=ex.inputs)
        vals.append(compound_loss(out.head, ex.targets, model.cfg)[1].total)
    return float(np.mean(vals))


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def train_run(model_cfg: nn.ModelConfig, train_manifest: Manifest, out_dir, val_manifest: Manifest | None = None,
              train_cfg: TrainConfig = TrainConfig(), optim_cfg: OptimConfig = OptimConfig(),
              stft_cfg: sig.StftConfig = sig.StftConfig(), config_echo: dict | None = None,
              train_examples: list[Example] | None = None, val_examples: list[Example] | None = None) -> TrainResult:
    """Train on a rendered manifest; keeps the best-validation checkpoint.

    Writes ``train_log.csv`` and ``best.npz`` into ``out_dir``.  Without a
    validation manifest the training loss drives checkpointing and the
    plateau schedule.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slots = model_cfg.hierarchy.slots
    if train_examples is None:
        train_examples = load_examples(train_manifest, stft_cfg, slots)
    if val_examples is None:
        val_examples = load_examples(val_manifest, stft_cfg, slots) if val_manifest is not None else []
    if not train_examples:
        raise ValueError("empty training manifest")
    model = nn.Separator(model_cfg, seed=train_cfg.seed)
    opt = Optimizer(model.ball_params, model_cfg.kappa if model_cfg.hyperbolic else None, optim_cfg)
    rng = np.random.default_rng([train_cfg.seed, 1])
    ckpt = out_dir / "best.npz"
    rows: list[dict] = []
    val_hist: list[float] = []
    best_val = np.inf
    echo = config_echo or {}

    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = optim_cfg.lr * (plateau_schedule(val_hist, optim_cfg.patience, optim_cfg.factor) if val_hist else 1.0)
        order = rng.permutation(np.repeat(np.arange(len(train_examples)), train_cfg.draws_per_example))
        sums = np.zeros(3)
        for b in range(0, len(order), train_cfg.batch_size):
            batch = [train_examples[i] for i in order[b:b + train_cfg.batch_size]]
            acc = {k: np.zeros_like(v) for k, v in model.params.items()}
            for ex in batch:
                try:
                    g, bd = example_grads(model, ex, rng, train_cfg.bins_per_example)
                except NonFiniteLossError:
                    _write_log(out_dir / "train_log.csv", rows)
                    raise
                for k in acc:
                    acc[k] += g[k]
                sums += (bd.parent, bd.near, bd.far)
            grads = {k: v / len(batch) for k, v in acc.items()}
            model.params = opt.step(model.params, grads, lr)
            nn.repair_normals(model.params, rng)
        parent, near, far = sums / len(order)
        train_total = parent + near + far
        val = validation_loss(model, val_examples) if val_examples else train_total
        if not np.isfinite(val):
            _write_log(out_dir / "train_log.csv", rows)
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}; last good checkpoint kept")
        val_hist.append(val)
        rows.append({"epoch": epoch, "lr": lr, "parent": parent, "near": near, "far": far,
                     "total": train_total, "val": val, "seconds": round(time.perf_counter() - t0, 3)})
        _write_log(out_dir / "train_log.csv", rows)
        log.info("epoch %d lr %.2e train %.4f val %.4f", epoch, lr, train_total, val)
        if val < best_val:
            best_val = val
            nn.save_checkpoint(ckpt, model, extra={"epoch": epoch, "val": val, "config": echo,
                                                   "rng_state": rng.bit_generator.state},
                               arrays=opt.state_arrays())
    return TrainResult(ckpt, rows, nn.load_checkpoint(ckpt)[0], best_val)


# --- evaluation -------------------------------------------------------------

@dataclass
class EvalRecord:
    scene_id: str
    density: tuple[int, int]
    curvature: float
    parent_sisdri: dict[str, float] = field(default_factory=dict)
    noise_reduction: dict[str, float] = field(default_factory=dict)
    child_sisdri: list[float] = field(default_factory=list)


class MissingAudioError(FileNotFoundError):
    pass


def _read(root: Path, rel: str, sr: int) -> np.ndarray:
    path = root / rel
    if not path.exists():
        raise MissingAudioError(f"missing audio file {path}")
    return sig.read_wav(path, sr)


def best_child_assignment(estimates: list[np.ndarray], references: list[np.ndarray], mixture) -> list[float]:
    """SI-SDRi of each reference under the estimate assignment that maximizes their sum."""
    best, best_vals = -np.inf, []
    table = [[sig.si_sdri(e, r, mixture) for e in estimates] for r in references]
    for perm in itertools.permutations(range(len(estimates)), len(references)):
        vals = [table[j][perm[j]] for j in range(len(references))]
        if sum(vals) > best:
            best, best_vals = sum(vals), vals
    return best_vals


def evaluate_scene(masker, record: dict, root: Path, sample_rate: int, stft_cfg: sig.StftConfig,
                   curvature: float = 0.0, slots=(2, 2), leaf_mode: str = "joint") -> EvalRecord:
    """Score one scene.  ``masker(X, record)`` returns a dict with ``parent``
    (T, F, 2) masks and optionally ``leaf`` (T, F, K) masks."""
    files = record["files"]
    mix = _read(root, files["mix"], sample_rate)
    refs = {"near": _read(root, files["near"], sample_rate), "far": _read(root, files["far"], sample_rate)}
    labels = [s["label"] for s in record["sources"]]
    active = {"near": 0 in labels, "far": 1 in labels}
    X = sig.stft(mix, stft_cfg)
    masks = masker(X, record)
    rec = EvalRecord(record["id"], tuple(record["density"]), curvature)
    both = active["near"] and active["far"]
    for i, name in enumerate(("near", "far")):
        est = sig.apply_mask_and_resynthesize(X, masks["parent"][..., i], stft_cfg, len(mix))
        if not active[name]:
            rec.noise_reduction[name] = sig.noise_reduction(mix, est)
        elif both:
            rec.parent_sisdri[name] = sig.si_sdri(est, refs[name], mix)
    if "leaf" in masks:
        leaf = masks["leaf"]
        start = 0
        for p, n in enumerate(slots):
            members = [k for k, l in enumerate(labels) if l == p]
            if members:
                ests = [sig.apply_mask_and_resynthesize(X, leaf[..., start + j], stft_cfg, len(mix))
                        for j in range(n)]
                srcs = [_read(root, files[f"src{k}"], sample_rate) for k in members]
                rec.child_sisdri.extend(best_child_assignment(ests, srcs, mix))
            start += n
    return rec


def model_masker(model: nn.Separator):
    def masker(X, record):
        m = model.masks(nn.features(X))
        out = {"parent": m["parent"]}
        if "joint" in m:
            out["leaf"] = m[model.cfg.child_mask]
        return out
    return masker


def oracle_masker(stft_cfg: sig.StftConfig, root: Path, sample_rate: int, slots=(2, 2)):
    """Ideal binary masks from the rendered sources: the separation ceiling."""
    def masker(X, record):
        specs = [sig.stft(_read(root, record["files"][f"src{k}"], sample_rate), stft_cfg)
                 for k in range(len(record["sources"]))]
        t = sig.ibm_targets(specs, [s["label"] for s in record["sources"]], slots)
        parent = t.parent_mask()
        leaf = np.concatenate([t.child_mask("near") * parent[..., :1], t.child_mask("far") * parent[..., 1:]],
                              axis=-1)
        return {"parent": parent, "leaf": leaf}
    return masker


TABLE_COLUMNS = ["curvature", "density", "n_scenes", "parent_sisdri_near", "parent_sisdri_far",
                 "parent", "parent_is_noise_reduction", "noise_reduction_near", "noise_reduction_far",
                 "child_sisdri"]


def _mean(vals):
    vals = [v for v in vals if v is not None and np.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def aggregate(records: list[EvalRecord], densities=None) -> list[dict]:
    """Per-density rows plus an 'Average (SI-SDRi)' row.

    The parent column holds the mean near/far SI-SDRi for mixed densities and
    the silent parent's noise reduction otherwise (flagged).  The parent
    average runs over mixed densities only; the child average over all rows.
    """
    if densities is None:
        densities = []
        for r in records:
            if tuple(r.density) not in densities:
                densities.append(tuple(r.density))
    curv = records[0].curvature if records else 0.0
    rows = []
    for d in densities:
        sel = [r for r in records if tuple(r.density) == tuple(d)]
        if not sel:
            continue
        near = _mean([r.parent_sisdri.get("near") for r in sel])
        far = _mean([r.parent_sisdri.get("far") for r in sel])
        nr_near = _mean([r.noise_reduction.get("near") for r in sel])
        nr_far = _mean([r.noise_reduction.get("far") for r in sel])
        silent = d[0] == 0 or d[1] == 0
        if silent:
            parent = nr_near if d[0] == 0 else nr_far
        else:
            parent = _mean([near, far])
        rows.append({"curvature": curv, "density": density_tag(d), "n_scenes": len(sel),
                     "parent_sisdri_near": near, "parent_sisdri_far": far, "parent": parent,
                     "parent_is_noise_reduction": silent, "noise_reduction_near": nr_near,
                     "noise_reduction_far": nr_far,
                     "child_sisdri": _mean([_mean(r.child_sisdri) for r in sel if r.child_sisdri])})
    mixed = [r for r in rows if not r["parent_is_noise_reduction"]]
    rows.append({"curvature": curv, "density": "Average (SI-SDRi)", "n_scenes": sum(r["n_scenes"] for r in rows),
                 "parent_sisdri_near": _mean([r["parent_sisdri_near"] for r in mixed]),
                 "parent_sisdri_far": _mean([r["parent_sisdri_far"] for r in mixed]),
                 "parent": _mean([r["parent"] for r in mixed]), "parent_is_noise_reduction": False,
                 "noise_reduction_near": _mean([r["noise_reduction_near"] for r in rows]),
                 "noise_reduction_far": _mean([r["noise_reduction_far"] for r in rows]),
                 "child_sisdri": _mean([r["child_sisdri"] for r in rows])})
    return rows


def write_table(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in TABLE_COLUMNS})
    return path


def evaluate(model_or_checkpoint, manifest: Manifest, stft_cfg: sig.StftConfig = sig.StftConfig(),
             workers: int = 1, masker=None) -> tuple[list[EvalRecord], list[dict]]:
    """Score every scene of a rendered manifest; returns records and the table rows."""
    if masker is None:
        model = model_or_checkpoint
        if not isinstance(model, nn.Separator):
            model = nn.load_checkpoint(model_or_checkpoint)[0]
        masker = model_masker(model)
        curvature, leaf_mode = model.cfg.c, model.cfg.child_mask
    else:
        curvature, leaf_mode = 0.0, "joint"
    slots = (manifest.children, manifest.children)

    def one(rec):
        return evaluate_scene(masker, rec, manifest.root, manifest.sample_rate, stft_cfg, curvature, slots,
                              leaf_mode)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, manifest.scenes))
    else:
        records = [one(r) for r in manifest.scenes]
    densities = []
    for r in manifest.scenes:
        if tuple(r["density"]) not in densities:
            densities.append(tuple(r["density"]))
    return records, aggregate(records, densities)


def write_records(path, records: list[EvalRecord]) -> Path:
    path = Path(path)
    path.write_text(json.dumps([asdict(r) for r in records], indent=1))
    return path


# --- curvature sweep --------------------------------------------------------

@dataclass
class SweepResult:
    tables: dict[float, Path]
    checkpoints: dict[float, Path]
    scene_ids: dict[float, list[str]]
    ball_param_counts: dict[float, int]


def curvature_sweep(model_cfg: nn.ModelConfig, train_manifest: Manifest, test_manifest: Manifest, out_dir,
                    val_manifest: Manifest | None = None, curvatures=(0.0, -0.1, -1.0),
                    train_cfg: TrainConfig = TrainConfig(), optim_cfg: OptimConfig = OptimConfig(),
                    stft_cfg: sig.StftConfig = sig.StftConfig(), workers: int = 1) -> SweepResult:
    """Train and evaluate one model per curvature on identical data and seeds."""
    out_dir = Path(out_dir)
    slots = model_cfg.hierarchy.slots
    train_ex = load_examples(train_manifest, stft_cfg, slots)
    val_ex = load_examples(val_manifest, stft_cfg, slots) if val_manifest is not None else []
    res = SweepResult({}, {}, {}, {})
    all_rows = []
    for c in curvatures:
        cfg = nn.ModelConfig(encoder=model_cfg.encoder, hierarchy=model_cfg.hierarchy, c=float(c),
                             levels=model_cfg.levels, child_mask=model_cfg.child_mask)
        run_dir = out_dir / f"c{float(c):+.2f}"
        tr = train_run(cfg, train_manifest, run_dir, val_manifest, train_cfg, optim_cfg, stft_cfg,
                       train_examples=train_ex, val_examples=val_ex)
        if cfg.c == 0.0 and tr.model.ball_params:
            raise AssertionError("Euclidean sweep run constructed ball parameters")
        records, rows = evaluate(tr.model, test_manifest, stft_cfg, workers)
        res.tables[float(c)] = write_table(run_dir / "eval_table.csv", rows)
        res.checkpoints[float(c)] = tr.checkpoint
        res.scene_ids[float(c)] = [r.scene_id for r in records]
        res.ball_param_counts[float(c)] = len(tr.model.ball_params)
        all_rows.extend(rows)
    write_table(out_dir / "sweep_report.csv", all_rows)
    return res

"""Acoustic scene simulation: rooms, distance-labelled source placement, a
delay + attenuation + decaying-noise-tail renderer, speech-like dry sources
and dataset/probe manifests."""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from . import signal as sig
from .nn import HierarchySpec, TABLE1_DENSITIES

SPEED_OF_SOUND = 343.0
ROOM_MIN = (3.0, 4.0, 2.13)
ROOM_MAX = (7.0, 8.0, 3.03)
RT60_RANGE = (0.1, 0.5)
D_MIN = 0.1
MAX_REJECTIONS = 10_000
MANIFEST_VERSION = 1

TABLE1_COUNTS = {
    "train": (3156, 8217, 28059, 71152, 89416),
    "val": (45, 101, 321, 916, 1117),
    "test": (400, 400, 400, 400, 400),
}


class InfeasiblePlacementError(RuntimeError):
    pass


class ClippingWarning(UserWarning):
    pass


@dataclass
class Room:
    dims: np.ndarray
    rt60: float
    mic: np.ndarray

    def contains(self, point) -> bool:
        p = np.asarray(point)
        return bool(np.all(p > 0.0) and np.all(p < self.dims))

    def max_wall_distance(self) -> float:
        return float(max(np.max(self.mic), np.max(self.dims - self.mic)))

    def to_dict(self) -> dict:
        return {"dims": self.dims.tolist(), "rt60": self.rt60, "mic": self.mic.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Room":
        return cls(np.array(d["dims"], dtype=np.float64), float(d["rt60"]), np.array(d["mic"], dtype=np.float64))


@dataclass
class PlacedSource:
    position: np.ndarray
    distance: float
    label: int          # 0 near, 1 far
    slot: int           # child slot within the parent

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "distance": self.distance,
                "label": self.label, "slot": self.slot}


def sample_room(rng: np.random.Generator) -> Room:
    dims = rng.uniform(ROOM_MIN, ROOM_MAX)
    mic = rng.uniform(0.0, 1.0, size=3) * dims
    rt60 = float(rng.uniform(*RT60_RANGE))
    return Room(dims=dims, rt60=rt60, mic=mic)


def distance_bounds(room: Room) -> tuple[float, float]:
    return D_MIN, 0.95 * room.max_wall_distance()


def sample_distance(rng, lo: float, hi: float, beta: tuple[float, float] = (1.5, 1.5)) -> float:
    return float(lo + (hi - lo) * rng.beta(*beta))


def _unit_vector(rng) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _position_at(room: Room, d: float, rng, tries: int) -> np.ndarray | None:
    for _ in range(tries):
        pos = room.mic + d * _unit_vector(rng)
        if room.contains(pos):
            return pos
    return None


def place_sources(room: Room, hierarchy: HierarchySpec, density, tau: float,
                  rng: np.random.Generator, beta: tuple[float, float] = (1.5, 1.5)) -> list[PlacedSource]:
    """Draw one source per requested slot: near slots first, then far.

    Distances follow a scaled Beta; a draw whose near/far label does not fit
    the slot being filled is rejected, as is a direction that leaves the room.
    """
    n_near, n_far = hierarchy.check_density(density)
    lo, hi = distance_bounds(room)
    placed = []
    for label, count in ((0, n_near), (1, n_far)):
        for slot in range(count):
            for _ in range(MAX_REJECTIONS):
                d = sample_distance(rng, lo, hi, beta)
                if (d < tau) != (label == 0):
                    continue
                pos = _position_at(room, d, rng, tries=200)
                if pos is not None:
                    placed.append(PlacedSource(pos, d, label, slot))
                    break
            else:
                raise InfeasiblePlacementError(
                    f"no {'near' if label == 0 else 'far'} position found after {MAX_REJECTIONS} draws "
                    f"(mic {room.mic.round(2).tolist()} in room {room.dims.round(2).tolist()})")
    return placed


def synth_speech_like(duration: float, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Harmonic, syllable-modulated source with pauses; a stand-in for speech."""
    if duration <= 0:
        raise ValueError("duration must be > 0")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100.0, 300.0)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=8)
    voiced = sum(np.sin(2.0 * np.pi * k * f0 * t + phases[k - 1]) / k for k in range(1, 9))
    am_rate = rng.uniform(2.0, 8.0)
    env = 0.5 * (1.0 + np.sin(2.0 * np.pi * am_rate * t + rng.uniform(0.0, 2.0 * np.pi)))
    x = voiced * env
    # pauses: at least one per 6 s, 0.2-0.6 s long, with 10 ms ramps
    gate = np.ones(n)
    n_pauses = max(1, int(np.ceil(duration / 6.0))) + int(rng.integers(0, 2))
    ramp = max(1, int(0.01 * sample_rate))
    for _ in range(n_pauses):
        length = int(rng.uniform(0.2, 0.6) * sample_rate)
        length = min(length, n // 3)   # short chunks keep most of their signal
        start = int(rng.integers(0, max(1, n - length)))
        gate[start:start + length] = 0.0
        edge = np.linspace(1.0, 0.0, ramp)
        a = max(0, start - ramp)
        gate[a:start] = np.minimum(gate[a:start], edge[ramp - (start - a):])
        b = min(n, start + length + ramp)
        gate[start + length:b] = np.minimum(gate[start + length:b], edge[::-1][:b - start - length])
    x = x * gate
    sos = butter(4, [300.0, min(3400.0, 0.45 * sample_rate)], btype="bandpass", fs=sample_rate, output="sos")
    noise = sosfilt(sos, rng.standard_normal(n))
    rms_x = np.sqrt(np.mean(x * x))
    noise *= 0.1 * rms_x / max(np.sqrt(np.mean(noise * noise)), 1e-12)
    x = x + noise
    return 0.9 * x / np.max(np.abs(x))


def source_rir(distance: float, rt60: float, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Direct path (nearest-sample delay, 1/d gain) plus an exponentially
    decaying noise tail reaching -60 dB after rt60 seconds."""
    delay = int(round(distance / SPEED_OF_SOUND * sample_rate))
    n_tail = int(np.ceil(rt60 * sample_rate))
    h = np.zeros(delay + 1 + n_tail)
    h[delay] = 1.0 / max(distance, 0.1)
    tt = np.arange(1, n_tail + 1) / sample_rate
    g_rev = 0.1 * np.sqrt(rt60) * min(distance, 1.0)
    h[delay + 1:] = g_rev * rng.standard_normal(n_tail) * 10.0 ** (-3.0 * tt / rt60)
    return h


def render_source(dry, distance: float, rt60: float, sample_rate: int, seed) -> np.ndarray:
    h = source_rir(distance, rt60, sample_rate, np.random.default_rng(seed))
    return fftconvolve(np.asarray(dry, dtype=np.float64), h)[: len(dry)]


@dataclass
class Render:
    wet: list[np.ndarray]
    mixture: np.ndarray
    near: np.ndarray
    far: np.ndarray
    gain: float = 1.0


def render(room: Room, sources: list[PlacedSource], dry: list[np.ndarray], sample_rate: int,
           seed: int) -> Render:
    """Wet signals per source, their sum, and the near/far group references.

    Each source's tail noise comes from its own stream ``(seed, k)``.  If the
    mixture would clip, everything is scaled by one common gain (recorded).
    """
    if len(sources) != len(dry):
        raise ValueError("one dry signal per source is required")
    wet = [render_source(x, s.distance, room.rt60, sample_rate, [seed, k])
           for k, (s, x) in enumerate(zip(sources, dry))]
    peak = np.max(np.abs(np.sum(wet, axis=0)))
    gain = 1.0
    if peak > 1.0:
        warnings.warn(f"mixture peak {peak:.2f} > 1; peak-normalizing", ClippingWarning, stacklevel=2)
        gain = 0.99 / peak
        wet = [w * gain for w in wet]
    mixture = np.zeros(len(dry[0]))
    near = np.zeros(len(dry[0]))
    far = np.zeros(len(dry[0]))
    for s, w in zip(sources, wet):
        mixture = mixture + w
        if s.label == 0:
            near = near + w
        else:
            far = far + w
    return Render(wet=wet, mixture=mixture, near=near, far=far, gain=gain)


# --- datasets ---------------------------------------------------------------

def scale_counts(counts, total: int) -> list[int]:
    """Shrink counts to about ``total`` keeping ratios, at least 1 each."""
    counts = np.asarray(counts, dtype=np.float64)
    return [max(1, int(round(c))) for c in counts * total / counts.sum()]


@dataclass
class DatasetConfig:
    """Per-split scene counts for each density tag."""

    densities: list[tuple[int, int]] = field(default_factory=lambda: list(TABLE1_DENSITIES[2]))
    counts: dict[str, list[int]] = field(default_factory=lambda: {
        "train": scale_counts(TABLE1_COUNTS["train"], 200),
        "val": scale_counts(TABLE1_COUNTS["val"], 40),
        "test": [40] * 5,
    })
    chunk_seconds: float = 6.0
    beta: tuple[float, float] = (1.5, 1.5)

    def __post_init__(self):
        self.densities = [tuple(int(v) for v in d) for d in self.densities]
        self.beta = tuple(self.beta)
        for split, c in self.counts.items():
            if len(c) != len(self.densities):
                raise ValueError(f"split {split!r} has {len(c)} counts for {len(self.densities)} densities")
            if any(int(n) < 0 for n in c):
                raise ValueError("scene counts must be >= 0")
        if self.chunk_seconds <= 0:
            raise ValueError("chunk_seconds must be > 0")

    @classmethod
    def preset(cls, name: str, children: int = 2, chunk_seconds: float = 6.0) -> "DatasetConfig":
        dens = list(TABLE1_DENSITIES[children])
        if name == "table1-full":
            return cls(dens, {k: list(v) for k, v in TABLE1_COUNTS.items()}, chunk_seconds)
        if name == "table1-desk":
            return cls(dens, {"train": scale_counts(TABLE1_COUNTS["train"], 200),
                              "val": scale_counts(TABLE1_COUNTS["val"], 40),
                              "test": [40] * 5}, chunk_seconds)
        if name == "parent-2src":
            # one-level task with two sources: mixed and single-parent scenes
            return cls([(1, 1), (2, 0), (0, 2)], {"train": [100, 50, 50], "val": [10, 5, 5],
                                                   "test": [20, 10, 10]}, chunk_seconds)
        raise ValueError(f"unknown density preset {name!r}")


def density_tag(density) -> str:
    return f"{density[0]},{density[1]}"


def _scene_files(scene_id: str, n_sources: int) -> dict[str, str]:
    files = {"mix": f"{scene_id}/mix.wav", "near": f"{scene_id}/near.wav", "far": f"{scene_id}/far.wav"}
    for k in range(n_sources):
        files[f"src{k}"] = f"{scene_id}/src{k}.wav"
    return files


def _finish_record(scene_id, room, sources, density, rng, condition=None, seed_path=None):
    return {
        "id": scene_id,
        "density": list(density),
        "seed": list(seed_path) if seed_path is not None else None,
        "room": room.to_dict(),
        "sources": [s.to_dict() for s in sources],
        "dry_seeds": [int(rng.integers(2**62)) for _ in sources],
        "render_seed": int(rng.integers(2**62)),
        "condition": condition or {"density": density_tag(density)},
        "files": _scene_files(scene_id, len(sources)),
    }


def make_record(scene_id: str, seed_path, hierarchy: HierarchySpec, density, tau: float,
                beta=(1.5, 1.5)) -> dict:
    rng = np.random.default_rng(list(seed_path))
    room = sample_room(rng)
    sources = place_sources(room, hierarchy, density, tau, rng, beta)
    return _finish_record(scene_id, room, sources, density, rng, seed_path=seed_path)


def render_record(record: dict, sample_rate: int, chunk_seconds: float) -> Render:
    room = Room.from_dict(record["room"])
    sources = [PlacedSource(np.array(s["position"]), s["distance"], s["label"], s["slot"])
               for s in record["sources"]]
    dry = [synth_speech_like(chunk_seconds, sample_rate, np.random.default_rng(seed))
           for seed in record["dry_seeds"]]
    return render(room, sources, dry, sample_rate, record["render_seed"])


def record_targets(record: dict, rendered: Render, stft_cfg: sig.StftConfig, slots) -> sig.IbmTargets:
    specs = [sig.stft(w, stft_cfg) for w in rendered.wet]
    labels = [s["label"] for s in record["sources"]]
    return sig.ibm_targets(specs, labels, slots)


def write_scene(root: Path, record: dict, rendered: Render, sample_rate: int,
                targets: sig.IbmTargets | None = None) -> None:
    files = record["files"]
    sig.write_wav(root / files["mix"], rendered.mixture, sample_rate)
    sig.write_wav(root / files["near"], rendered.near, sample_rate)
    sig.write_wav(root / files["far"], rendered.far, sample_rate)
    for k, w in enumerate(rendered.wet):
        sig.write_wav(root / files[f"src{k}"], w, sample_rate)
    if targets is not None:
        path = root / record["id"] / "targets.npz"
        np.savez_compressed(path, parent=targets.parent.astype(np.int8),
                            near=targets.near.astype(np.int8), far=targets.far.astype(np.int8))
        record["targets"] = f"{record['id']}/targets.npz"
    record["gain"] = rendered.gain


@dataclass
class Manifest:
    split: str
    sample_rate: int
    tau: float
    children: int
    chunk_seconds: float
    scenes: list[dict]
    seed: int = 0
    kind: str = "dataset"
    root: Path | None = None

    def density_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.scenes:
            tag = density_tag(r["density"])
            out[tag] = out.get(tag, 0) + 1
        return out

    def to_dict(self) -> dict:
        return {"version": MANIFEST_VERSION, "kind": self.kind, "split": self.split,
                "sample_rate": self.sample_rate, "tau": self.tau, "children": self.children,
                "chunk_seconds": self.chunk_seconds, "seed": self.seed,
                "density_counts": self.density_counts(), "scenes": self.scenes}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1))
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            d = json.loads(path.read_text())
        except OSError as err:
            raise OSError(f"cannot read manifest {path}: {err}") from err
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {d.get('version')}")
        return cls(split=d["split"], sample_rate=d["sample_rate"], tau=d["tau"], children=d["children"],
                   chunk_seconds=d["chunk_seconds"], scenes=d["scenes"], seed=d.get("seed", 0),
                   kind=d.get("kind", "dataset"), root=path.parent)


SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def _render_and_write(root, record, sample_rate, chunk, stft_cfg, slots):
    rendered = render_record(record, sample_rate, chunk)
    targets = record_targets(record, rendered, stft_cfg, slots)
    write_scene(root, record, rendered, sample_rate, targets)
    return record


def _write_all(root: Path, records: list[dict], sample_rate, chunk, stft_cfg, slots, workers: int):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClippingWarning)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(lambda r: _render_and_write(root, r, sample_rate, chunk, stft_cfg, slots),
                              records))
        else:
            for r in records:
                _render_and_write(root, r, sample_rate, chunk, stft_cfg, slots)


def build_dataset(cfg: DatasetConfig, out_dir, hierarchy: HierarchySpec = HierarchySpec(),
                  tau: float = 0.8, seed: int = 0, stft_cfg: sig.StftConfig = sig.StftConfig(),
                  splits=("train", "val", "test"), workers: int = 1) -> dict[str, Manifest]:
    """Render every split to ``out_dir/<split>/`` and write its manifest.json.

    Scene ``i`` of a split draws from the stream ``(seed, split code, i)``, so
    any scene can be regenerated on its own.
    """
    out_dir = Path(out_dir)
    manifests = {}
    for split in splits:
        if split not in cfg.counts:
            continue
        records = []
        idx = 0
        for density, count in zip(cfg.densities, cfg.counts[split]):
            for _ in range(int(count)):
                sid = f"{split}-{idx:05d}"
                records.append(make_record(sid, (seed, SPLIT_CODES.get(split, 9), idx), hierarchy,
                                           density, tau, cfg.beta))
                idx += 1
        root = out_dir / split
        _write_all(root, records, stft_cfg.sample_rate, cfg.chunk_seconds, stft_cfg, hierarchy.slots, workers)
        man = Manifest(split, stft_cfg.sample_rate, tau, hierarchy.children, cfg.chunk_seconds, records, seed,
                       root=root)
        man.save(root / "manifest.json")
        manifests[split] = man
    return manifests


# --- probe sets -------------------------------------------------------------

def _place_fixed(rng, distances, max_rooms: int = 200, tries: int = 2000):
    """A room and mic in which every requested distance fits; role-labelled."""
    for _ in range(max_rooms):
        room = sample_room(rng)
        if max(distances) >= room.max_wall_distance():
            continue
        placed = []
        for k, d in enumerate(distances):
            pos = _position_at(room, d, rng, tries)
            if pos is None:
                break
            placed.append(PlacedSource(pos, float(d), k, 0))
        if len(placed) == len(distances):
            return room, placed
    raise InfeasiblePlacementError(f"no room found fitting distances {distances} after {max_rooms} rooms")


PROBE_CODES = {"equidistant": 7, "mic-distance": 8}


def _probe(kind, pairs, conditions, rooms, seed, tau, sample_rate, chunk_seconds, out_dir, workers):
    records = []
    idx = 0
    code = PROBE_CODES[kind]
    for (d1, d2), cond in zip(pairs, conditions):
        for r in range(rooms):
            rng = np.random.default_rng([seed, code, idx])
            room, placed = _place_fixed(rng, (d1, d2))
            rec = _finish_record(f"{kind}-{idx:05d}", room, placed, (1, 1), rng, condition=cond,
                                 seed_path=(seed, code, idx))
            rec["label_rule"] = "role"
            records.append(rec)
            idx += 1
    man = Manifest(kind, sample_rate, tau, 2, chunk_seconds, records, seed, kind="probe")
    if out_dir is not None:
        root = Path(out_dir) / kind
        _write_all(root, records, sample_rate, chunk_seconds, sig.StftConfig(sample_rate), (2, 2), workers)
        man.root = root
        man.save(root / "manifest.json")
    return man


def probe_equidistant(relative_distances, rooms: int = 4, seed: int = 0, tau: float = 0.8,
                      sample_rate: int = 16000, chunk_seconds: float = 6.0, out_dir=None,
                      workers: int = 1) -> Manifest:
    """One near and one far source placed symmetrically about tau.

    Source roles fix the labels (s1 near, s2 far), including delta = 0 where
    both sit exactly on the threshold.
    """
    pairs = []
    for delta in relative_distances:
        if not 0.0 <= delta <= 1.4 + 1e-12:
            raise ValueError(f"relative distance {delta} outside [0, 1.4]")
        d1, d2 = tau - delta / 2.0, tau + delta / 2.0
        if d1 < D_MIN - 1e-12:
            raise ValueError(f"relative distance {delta} puts the near source at {d1:.3f} m < {D_MIN} m")
        pairs.append((d1, d2))
    conds = [{"relative_distance": float(d)} for d in relative_distances]
    return _probe("equidistant", pairs, conds, rooms, seed, tau, sample_rate, chunk_seconds, out_dir, workers)


def probe_mic_distance(near_distances, rooms: int = 4, seed: int = 0, tau: float = 0.8,
                       far_distance: float = 2.9, sample_rate: int = 16000, chunk_seconds: float = 6.0,
                       out_dir=None, workers: int = 1) -> Manifest:
    """Far source pinned at 2.9 m, near source at each requested distance."""
    for d in near_distances:
        if not 0.2 - 1e-12 <= d <= 0.8 + 1e-12:
            raise ValueError(f"near distance {d} outside [0.2, 0.8]")
    pairs = [(float(d), far_distance) for d in near_distances]
    conds = [{"mic_distance": float(d)} for d in near_distances]
    return _probe("mic-distance", pairs, conds, rooms, seed, tau, sample_rate, chunk_seconds, out_dir, workers)

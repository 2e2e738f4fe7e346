"""STFT analysis/synthesis, ideal binary masks and separation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

ENERGY_FLOOR = 1e-12


class SilentReferenceError(ValueError):
    """SI-SDR is undefined for a silent reference; use noise_reduction."""


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    window_ms: float = 32.0

    def __post_init__(self):
        if self.win_length % 2:
            raise ValueError(f"window length must be even, got {self.win_length}")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop(self) -> int:
        return self.win_length // 2

    @property
    def n_bins(self) -> int:
        return self.win_length // 2 + 1

    def window(self) -> np.ndarray:
        # periodic Hann: its square root satisfies COLA at 50% overlap for analysis and synthesis
        n = np.arange(self.win_length)
        return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.win_length))

    def n_frames(self, n_samples: int) -> int:
        return int(np.ceil(n_samples / self.hop)) + 1


def stft(x, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex spectrogram of shape (frames, win/2 + 1).

    The signal is padded by one hop on the left so every sample is covered by
    exactly two frames; ``istft`` then reconstructs all of it, not just the
    interior.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"stft expects a mono waveform, got shape {x.shape}")
    if x.size < cfg.win_length:
        raise ValueError(f"input of {x.size} samples is shorter than one window ({cfg.win_length})")
    hop, win = cfg.hop, cfg.win_length
    n_frames = cfg.n_frames(x.size)
    padded = np.zeros((n_frames - 1) * hop + win)
    padded[hop:hop + x.size] = x
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(padded[idx] * cfg.window(), axis=-1)


def istft(X, cfg: StftConfig = StftConfig(), length: int | None = None) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != cfg.n_bins:
        raise ValueError(f"spectrogram shape {X.shape} does not match {cfg.n_bins} bins")
    hop, win = cfg.hop, cfg.win_length
    frames = np.fft.irfft(X, n=win, axis=-1) * cfg.window()
    n_frames = X.shape[0]
    out = np.zeros((n_frames - 1) * hop + win)
    for t in range(n_frames):
        out[t * hop:t * hop + win] += frames[t]
    if length is None:
        length = (n_frames - 1) * hop
    return out[hop:hop + length]


def dominant_index(magnitudes) -> np.ndarray:
    """Per-bin index of the largest magnitude; ties go to the lower index."""
    return np.argmax(np.stack(magnitudes, axis=-1), axis=-1)


def one_hot(idx, k: int) -> np.ndarray:
    return (np.asarray(idx)[..., None] == np.arange(k)).astype(np.float64)


@dataclass
class IbmTargets:
    """Class-index targets per TF bin.

    ``parent``: 0 (near) or 1 (far).  ``near`` / ``far``: slot index within
    the parent, or -1 for every bin when that parent has no active source.
    """

    parent: np.ndarray
    near: np.ndarray
    far: np.ndarray
    slots: tuple[int, int]

    @property
    def active(self) -> tuple[bool, bool]:
        return bool(self.near[0, 0] >= 0), bool(self.far[0, 0] >= 0)

    def parent_mask(self) -> np.ndarray:
        return one_hot(self.parent, 2)

    def child_mask(self, which: str) -> np.ndarray:
        idx = self.near if which == "near" else self.far
        k = self.slots[0] if which == "near" else self.slots[1]
        return one_hot(idx, k)


def parent_labels(distances, tau: float) -> list[int]:
    """0 for near (d < tau), 1 for far."""
    return [0 if d < tau else 1 for d in distances]


def ibm_targets(source_specs, labels, slots: tuple[int, int] = (2, 2)) -> IbmTargets:
    """Ideal binary masks for the parent and both child levels.

    ``labels`` gives each source's parent (0 near, 1 far, or computed with
    :func:`parent_labels`).  Children fill their parent's slots in order.
    """
    if len(source_specs) == 0:
        raise ValueError("empty scene: no sources to build targets from")
    if len(labels) != len(source_specs):
        raise ValueError("one parent label per source is required")
    mags = [np.abs(s) for s in source_specs]
    shape = mags[0].shape
    groups = {0: [i for i, l in enumerate(labels) if l == 0],
              1: [i for i, l in enumerate(labels) if l == 1]}
    for g, n in zip((0, 1), slots):
        if len(groups[g]) > n:
            raise ValueError(f"parent {g} has {len(groups[g])} sources but only {n} slots")
    # parent groups are compared on the magnitude of their summed spectra
    group_mag = []
    for g in (0, 1):
        if groups[g]:
            group_mag.append(np.abs(np.sum([source_specs[i] for i in groups[g]], axis=0)))
        else:
            group_mag.append(np.zeros(shape))
    parent = dominant_index(group_mag)
    children = []
    for g in (0, 1):
        if groups[g]:
            children.append(dominant_index([mags[i] for i in groups[g]]))
        else:
            children.append(np.full(shape, -1, dtype=np.int64))
    return IbmTargets(parent=parent, near=children[0], far=children[1], slots=tuple(slots))


def apply_mask_and_resynthesize(X, mask, cfg: StftConfig = StftConfig(),
                                length: int | None = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != X.shape:
        raise ValueError(f"mask shape {mask.shape} does not match spectrogram {X.shape}")
    return istft(X * mask, cfg, length)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB; a perfect estimate saturates at +120 dB."""
    s = np.asarray(reference, dtype=np.float64)
    s_hat = np.asarray(estimate, dtype=np.float64)
    ref_energy = float(np.dot(s, s))
    if ref_energy <= 0.0:
        raise SilentReferenceError("reference signal is silent")
    alpha = float(np.dot(s_hat, s)) / ref_energy
    target = alpha * s
    residual = target - s_hat
    t_energy = float(np.dot(target, target))
    r_energy = max(float(np.dot(residual, residual)), ENERGY_FLOOR * t_energy)
    if t_energy == 0.0:
        return -np.inf
    return 10.0 * np.log10(t_energy / r_energy)


def si_sdri(estimate, reference, mixture) -> float:
    return si_sdr(estimate, reference) - si_sdr(mixture, reference)


def noise_reduction(mixture, silent_estimate) -> float:
    """Mixture-to-estimate energy ratio in dB for a group that should be silent."""
    x = np.asarray(mixture, dtype=np.float64)
    e = np.asarray(silent_estimate, dtype=np.float64)
    return 10.0 * np.log10(float(np.dot(x, x)) / max(float(np.dot(e, e)), ENERGY_FLOOR))


def write_wav(path, x, sample_rate: int, dtype: str = "float32") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.asarray(x, dtype=np.float64)
    if dtype == "float32":
        data = x.astype(np.float32)
    elif dtype == "int16":
        data = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unsupported WAV sample type {dtype!r}")
    try:
        wavfile.write(path, sample_rate, data)
    except OSError as err:
        raise OSError(f"cannot write {path}: {err}") from err


def read_wav(path, sample_rate: int | None = None) -> np.ndarray:
    """Mono WAV as float64 in [-1, 1]; a sample-rate mismatch is an error."""
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as err:
        raise OSError(f"cannot read {path}: {err}") from err
    if sample_rate is not None and sr != sample_rate:
        raise ValueError(f"{path}: sample rate {sr} Hz, expected {sample_rate} Hz (no resampling)")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32767.0
    if data.dtype == np.float32 or data.dtype == np.float64:
        return data.astype(np.float64)
    raise ValueError(f"{path}: unsupported sample type {data.dtype}")

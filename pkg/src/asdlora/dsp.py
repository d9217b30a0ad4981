"""Log-mel front-end, per-bin standardization and SpecAug masking."""

from __future__ import annotations

import struct
import wave
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
SPEC_MAGIC = b"LNSPEC01"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty mono signal")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")


@dataclass
class Spectrogram:
    """T x F matrix of log-mel values (time on rows)."""

    frames: np.ndarray
    hop_seconds: float = 0.010
    window_seconds: float = 0.025

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray) -> "Spectrogram":
        return Spectrogram(frames, self.hop_seconds, self.window_seconds)


@dataclass
class FrontEndConfig:
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None
    eps: float = LOG_FLOOR


@dataclass
class SpecAugPolicy:
    freq_mask_width_max: int = 16
    time_mask_width_max: int = 20
    n_freq_masks: int = 2
    n_time_masks: int = 2
    mask_value: float = 0.0

    def validate(self, n_frames: int, n_bins: int) -> None:
        if min(self.freq_mask_width_max, self.time_mask_width_max,
               self.n_freq_masks, self.n_time_masks) < 0:
            raise ValueError("SpecAug widths and counts must be non-negative")
        if self.freq_mask_width_max > n_bins:
            raise ValueError(
                f"frequency mask width {self.freq_mask_width_max} exceeds {n_bins} bins")
        if self.time_mask_width_max > n_frames:
            raise ValueError(
                f"time mask width {self.time_mask_width_max} exceeds {n_frames} frames")


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray = field(repr=False)

    @classmethod
    def fit(cls, spectrograms) -> "FeatureStats":
        """Per-bin mean/std over every frame of the given spectrograms."""
        stacked = np.concatenate([s.frames for s in spectrograms], axis=0)
        return cls(stacked.mean(axis=0), stacked.std(axis=0))


def clip_seed(seed: int, *parts) -> list[int]:
    """Seed words for a per-clip RNG, independent of processing order."""
    return [int(seed)] + [zlib.crc32(str(p).encode()) for p in parts]


def frame_count(n_samples: int, win: int, hop: int) -> int:
    if win < 1 or hop < 1:
        raise ValueError("window and hop must be >= 1 sample")
    if n_samples < win:
        raise ValueError("clip shorter than one window")
    return 1 + (n_samples - win) // hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1).

    Filter edges are placed on the continuous frequency axis, so a filter
    narrower than one DFT bin still gets the weight of its nearest bins.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"invalid mel range [{fmin}, {fmax}] for rate {sample_rate}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # Narrow low-frequency filters may fall between bins; give them their nearest bin.
    empty = fb.sum(axis=1) == 0
    for i in np.flatnonzero(empty):
        fb[i, np.argmin(np.abs(bins - edges[i + 1]))] = 1.0
    return fb


def mel_centers(sample_rate: int, n_mels: int, fmin: float = 0.0,
                fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def power_frames(samples: np.ndarray, win: int, hop: int, n_fft: int) -> np.ndarray:
    """Hamming-windowed |DFT|^2 per frame, shape (T, n_fft // 2 + 1)."""
    n = frame_count(samples.size, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    frames = samples[idx] * np.hamming(win)
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


_FB_CACHE: dict = {}


def logmel(w: Waveform, config: FrontEndConfig | None = None) -> Spectrogram:
    config = config or FrontEndConfig()
    win = int(round(config.win_ms * w.sample_rate_hz / 1000))
    hop = int(round(config.hop_ms * w.sample_rate_hz / 1000))
    if config.n_fft < win:
        raise ValueError(f"n_fft {config.n_fft} shorter than window {win}")
    key = (w.sample_rate_hz, config.n_fft, config.n_mels, config.fmin, config.fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(w.sample_rate_hz, config.n_fft, config.n_mels,
                                        config.fmin, config.fmax)
    power = power_frames(w.samples, win, hop, config.n_fft)
    mel = power @ _FB_CACHE[key].T
    with np.errstate(divide="ignore"):
        frames = np.log(mel + config.eps)
    return Spectrogram(frames, hop / w.sample_rate_hz, win / w.sample_rate_hz)


def enhance(w: Waveform) -> Waveform:
    """Enhancement stage slot; currently the identity."""
    return w


def standardize(s: Spectrogram, stats: FeatureStats) -> Spectrogram:
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if mean.shape != (s.n_bins,) or std.shape != (s.n_bins,):
        raise ValueError(
            f"stats have {mean.shape}/{std.shape} entries for {s.n_bins} bins")
    scale = np.where(std > 0, std, 1.0)
    return s.with_frames((s.frames - mean) / scale)


def specaug(s: Spectrogram, policy: SpecAugPolicy, rng_seed) -> Spectrogram:
    """Frequency and time masking; widths drawn from 0..max inclusive."""
    n_frames, n_bins = s.frames.shape
    policy.validate(n_frames, n_bins)
    rng = np.random.default_rng(rng_seed)
    out = s.frames.copy()
    for _ in range(policy.n_freq_masks):
        f = int(rng.integers(0, policy.freq_mask_width_max + 1))
        f0 = int(rng.integers(0, n_bins - f + 1))
        out[:, f0:f0 + f] = policy.mask_value
    for _ in range(policy.n_time_masks):
        t = int(rng.integers(0, policy.time_mask_width_max + 1))
        t0 = int(rng.integers(0, n_frames - t + 1))
        out[t0:t0 + t, :] = policy.mask_value
    return s.with_frames(out)


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        if fh.getframerate() != expected_rate:
            raise ValueError(
                f"{path}: sample rate {fh.getframerate()} Hz, expected {expected_rate} Hz "
                "(resampling is not supported)")
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, expected_rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


def save_spectrogram(path, s: Spectrogram) -> None:
    t, f = s.frames.shape
    with open(path, "wb") as fh:
        fh.write(SPEC_MAGIC + struct.pack("<II", t, f))
        fh.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())


def load_spectrogram(path, hop_seconds: float = 0.010,
                     window_seconds: float = 0.025) -> Spectrogram:
    data = Path(path).read_bytes()
    if data[:8] != SPEC_MAGIC:
        raise ValueError(f"{path}: not a spectrogram cache file")
    t, f = struct.unpack("<II", data[8:16])
    frames = np.frombuffer(data[16:], dtype="<f4")
    if frames.size != t * f:
        raise ValueError(f"{path}: payload holds {frames.size} values, header says {t}x{f}")
    return Spectrogram(frames.reshape(t, f).astype(np.float64), hop_seconds, window_seconds)

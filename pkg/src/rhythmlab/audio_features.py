"""Prosodic feature extraction: SPL, high-frequency-emphasized SPL and voicing.

Audio is framed into non-overlapping 512-sample windows at 16 kHz, so the
feature stream runs at 31.25 Hz.  Each frame carries three level channels
mapped to [0, 1] plus their one-step differences.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter, resample_poly

SAMPLE_RATE = 16000
FRAME_LENGTH = 512
FRAME_RATE = SAMPLE_RATE / FRAME_LENGTH
REFERENCE_RMS = 0.1
SPL_FLOOR = 1e-10

F0_MIN = 75.0
F0_MAX = 500.0
VOICING_THRESHOLD = 0.45
VOICING_ENERGY_GATE_DB = 40.0

FEATURE_MAGIC = b"RFE1"
CHANNEL_NAMES = ("spl", "splh", "voiced")


class AudioError(ValueError):
    """Raised for undecodable or out-of-contract audio input."""


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("audio signal must be one-dimensional (mono)")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("audio signal contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FilterSpec:
    """First-order shelf ``(1 + j w/wa) / (1 + j w/wb)`` discretized by the bilinear transform."""

    f_a: float = 200.0
    f_b: float = 5000.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not 0 < self.f_a < self.f_b:
            raise ValueError("need 0 < f_a < f_b")

    @property
    def omega_a(self) -> float:
        return 2 * np.pi * self.f_a

    @property
    def omega_b(self) -> float:
        return 2 * np.pi * self.f_b

    @property
    def A(self) -> float:
        return 2.0 / self.omega_a * self.sample_rate

    @property
    def B(self) -> float:
        return 2.0 / self.omega_b * self.sample_rate

    def coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(b, a)`` in the convention of :func:`scipy.signal.lfilter`."""
        A, B = self.A, self.B
        return np.array([1 + A, 1 - A]), np.array([1 + B, 1 - B])

    def response(self, freqs) -> np.ndarray:
        """Complex response of the discrete filter at ``freqs`` (Hz)."""
        b, a = self.coefficients()
        z_inv = np.exp(-2j * np.pi * np.asarray(freqs, dtype=float) / self.sample_rate)
        return (b[0] + b[1] * z_inv) / (a[0] + a[1] * z_inv)


@dataclass
class FeatureConfig:
    spl_min_db: float = -80.0
    spl_max_db: float = 0.0
    reference_rms: float = REFERENCE_RMS
    include_f0: bool = False
    filter: FilterSpec = field(default_factory=FilterSpec)


@dataclass
class FeatureSequence:
    """Per-frame features.

    ``frames`` holds (spl_norm, splh_norm, voiced); ``deltas`` their one-step
    differences with a zero first row.  ``f0`` is optional (0 = unvoiced).
    """

    frames: np.ndarray
    deltas: np.ndarray
    f0: np.ndarray | None = None
    frame_rate: float = FRAME_RATE

    def __len__(self):
        return len(self.frames)

    @classmethod
    def from_frames(cls, frames, f0=None) -> "FeatureSequence":
        frames = np.asarray(frames)
        return cls(frames=frames, deltas=compute_deltas(frames), f0=f0)

    def stacked(self, dtype=np.float32) -> np.ndarray:
        """The T x 6 network input (levels then deltas)."""
        return np.concatenate([self.frames, self.deltas], axis=1).astype(dtype)

    def slice(self, start: int, stop: int) -> "FeatureSequence":
        f0 = None if self.f0 is None else self.f0[start:stop]
        return FeatureSequence.from_frames(self.frames[start:stop], f0=f0)


def compute_deltas(frames: np.ndarray) -> np.ndarray:
    deltas = np.zeros_like(frames)
    deltas[1:] = frames[1:] - frames[:-1]
    return deltas


def _samples(signal) -> np.ndarray:
    if isinstance(signal, AudioSignal):
        return signal.samples
    return np.asarray(signal, dtype=np.float64)


def _pcm_to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # scipy left-justifies 24-bit PCM into int32
        return data.astype(np.float64) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return np.clip(data.astype(np.float64), -1.0, 1.0)
    raise AudioError(f"unsupported sample encoding {data.dtype}")


def resample(samples: np.ndarray, rate_in: int, rate_out: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase windowed-sinc resampling; output length ``round(n * rate_out / rate_in)``."""
    if rate_in == rate_out:
        return np.asarray(samples, dtype=np.float64)
    g = gcd(int(rate_in), int(rate_out))
    up, down = rate_out // g, rate_in // g
    out = resample_poly(samples, up, down)
    n_out = int(round(len(samples) * rate_out / rate_in))
    if len(out) < n_out:
        out = np.pad(out, (0, n_out - len(out)))
    return out[:n_out]


def decode_audio(path, resample_to_16k: bool = False) -> AudioSignal:
    """Read a PCM or float WAV file as a mono 16 kHz signal in [-1, 1]."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise AudioError(f"{path}: file not found") from None
    except (ValueError, EOFError, struct.error) as exc:
        raise AudioError(f"{path}: cannot decode WAV ({exc})") from None
    samples = _pcm_to_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if rate != SAMPLE_RATE:
        if not resample_to_16k:
            raise AudioError(
                f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz (enable resampling)"
            )
        samples = resample(samples, rate, SAMPLE_RATE)
    return AudioSignal(samples, SAMPLE_RATE)


def write_wav(path, signal: AudioSignal):
    """Write a 16-bit PCM WAV (used by the synthetic corpus generator)."""
    pcm = np.clip(np.round(_samples(signal) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(Path(path), int(getattr(signal, "sample_rate", SAMPLE_RATE)), pcm)


def normalize_amplitude(signal: AudioSignal, target_rms: float = REFERENCE_RMS) -> AudioSignal:
    x = _samples(signal)
    rms = np.sqrt(np.mean(x * x)) if len(x) else 0.0
    if rms == 0.0:
        return AudioSignal(x.copy(), SAMPLE_RATE)
    return AudioSignal(x * (target_rms / rms), SAMPLE_RATE)


def apply_preemphasis(signal: AudioSignal, spec: FilterSpec | None = None) -> AudioSignal:
    spec = spec or FilterSpec()
    b, a = spec.coefficients()
    return AudioSignal(lfilter(b, a, _samples(signal)), spec.sample_rate)


def _frames(x: np.ndarray) -> np.ndarray:
    n = len(x) // FRAME_LENGTH
    if n == 0:
        raise AudioError(f"signal has {len(x)} samples, need at least {FRAME_LENGTH}")
    return x[: n * FRAME_LENGTH].reshape(n, FRAME_LENGTH)


def frame_spl(signal) -> np.ndarray:
    """Frame level in dB: ``10 log10(mean(x^2) + 1e-10)`` per 512-sample window."""
    frames = _frames(_samples(signal))
    return 10.0 * np.log10(np.mean(frames * frames, axis=1) + SPL_FLOOR)


def _normalized_autocorrelation(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation between each frame and its lagged copy.

    Column ``k`` holds ``sum x[n] x[n+k] / sqrt(sum x[n]^2 * sum x[n+k]^2)`` over
    the overlapping part, for lags ``0..max_lag``.
    """
    n = frames.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(frames, nfft, axis=1)
    r = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, : max_lag + 1]
    sq = frames * frames
    csum = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(sq, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    head = csum[:, n - lags]  # energy of x[0 : n-k]
    tail = csum[:, [n]] - csum[:, lags]  # energy of x[k : n]
    denom = np.sqrt(head * tail)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom > 0, r / np.where(denom > 0, denom, 1.0), 0.0)
    return out


def detect_voicing(
    signal,
    threshold: float = VOICING_THRESHOLD,
    f0_min: float = F0_MIN,
    f0_max: float = F0_MAX,
    energy_gate_db: float = VOICING_ENERGY_GATE_DB,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame voicing flag and f0 (Hz, 0 when unvoiced).

    A frame is voiced when its autocorrelation has a peak above ``threshold``
    at a lag in the f0 search range and its level is within ``energy_gate_db``
    of the loudest frame.  Among qualifying peaks within 5 % of the best one
    the shortest lag wins, which suppresses octave-down errors.
    """
    x = _samples(signal)
    frames = _frames(x)
    lag_lo = int(np.floor(SAMPLE_RATE / f0_max))
    lag_hi = int(np.ceil(SAMPLE_RATE / f0_min))
    ncc = _normalized_autocorrelation(frames, lag_hi + 1)

    core = ncc[:, lag_lo : lag_hi + 1]
    left = ncc[:, lag_lo - 1 : lag_hi]
    right = ncc[:, lag_lo + 1 : lag_hi + 2]
    peaks = np.where((core >= left) & (core >= right), core, -np.inf)
    best = peaks.max(axis=1)
    near_best = peaks >= 0.95 * best[:, None]
    best_lag = lag_lo + np.argmax(near_best, axis=1)

    spl = 10.0 * np.log10(np.mean(frames * frames, axis=1) + SPL_FLOOR)
    loud = spl > spl.max() - energy_gate_db
    voiced = (best > threshold) & loud & (spl > 10.0 * np.log10(SPL_FLOOR))
    f0 = np.where(voiced, SAMPLE_RATE / best_lag, 0.0)
    return voiced.astype(np.float64), f0


def extract_features(signal: AudioSignal, config: FeatureConfig | None = None) -> FeatureSequence:
    config = config or FeatureConfig()
    if len(_samples(signal)) == 0:
        raise AudioError("empty signal")
    x = normalize_amplitude(signal, config.reference_rms)
    spl = frame_spl(x)
    splh = frame_spl(apply_preemphasis(x, config.filter))
    voiced, f0 = detect_voicing(x)

    span = config.spl_max_db - config.spl_min_db
    levels = np.stack([spl, splh], axis=1)
    levels = np.clip((levels - config.spl_min_db) / span, 0.0, 1.0)
    frames = np.concatenate([levels, voiced[:, None]], axis=1)
    return FeatureSequence.from_frames(frames, f0=f0 if config.include_f0 else None)


def write_features(path, features: FeatureSequence):
    """Write the RFE1 binary layout: magic, u32 frames, u32 dims, f32 row-major."""
    data = features.stacked(np.float64)
    if features.f0 is not None:
        data = np.concatenate([data, features.f0[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", data.shape[0], data.shape[1]))
        fh.write(data.astype("<f4").tobytes())


def read_features(path) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise AudioError(f"{path}: not an RFE1 feature file")
    if len(raw) < 12:
        raise AudioError(f"{path}: truncated header")
    n_frames, n_dims = struct.unpack("<II", raw[4:12])
    if n_dims not in (6, 7):
        raise AudioError(f"{path}: unexpected dimension count {n_dims}")
    expected = 12 + 4 * n_frames * n_dims
    if len(raw) != expected:
        raise AudioError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(n_frames, n_dims)
    data = data.astype(np.float32)
    f0 = data[:, 6].copy() if n_dims == 7 else None
    return FeatureSequence(frames=data[:, :3].copy(), deltas=data[:, 3:6].copy(), f0=f0)


def export_features_csv(path, features: FeatureSequence):
    header = list(CHANNEL_NAMES) + [f"d_{name}" for name in CHANNEL_NAMES]
    data = features.stacked(np.float64)
    if features.f0 is not None:
        header.append("f0")
        data = np.concatenate([data, features.f0[:, None]], axis=1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "time"] + header)
        for i, row in enumerate(data):
            writer.writerow([i, f"{i / FRAME_RATE:.4f}"] + [f"{v:.7g}" for v in row])

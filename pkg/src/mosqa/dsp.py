"""Audio loading and log-magnitude spectrogram features.

Features are computed frame by frame: Hann-windowed frames of 40 ms, a hop of
30 ms by default, zero-padded FFT and natural-log magnitude with a small floor.
Per-bin mean/variance statistics are pooled over a training set and applied
to every utterance before it reaches the model.
"""
from __future__ import annotations

import csv
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NORM_EPS = 1e-8

FEATURE_MAGIC = b"MQFT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")

STATS_MAGIC = b"MQST"
STATS_VERSION = 1
_STATS_HEADER = struct.Struct("<4sIIQ")


class AudioFormatError(ValueError):
    """Raised for WAV files this front end does not accept.

    ``code`` is one of ``"not_wave"``, ``"encoding"``, ``"channels"``,
    ``"sample_rate"`` or ``"truncated"``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


class FeatureFileError(ValueError):
    pass


@dataclass
class AudioClip:
    id: str
    sample_rate_hz: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"clip {self.id!r}: samples must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"clip {self.id!r}: non-finite samples")
        if np.max(np.abs(self.samples)) > 1.0:
            raise ValueError(f"clip {self.id!r}: samples outside [-1, 1]")
        if self.sample_rate_hz != 16000:
            raise ValueError(f"clip {self.id!r}: sample rate must be 16000 Hz")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class FrameConfig:
    frame_len_ms: float = 40.0
    hop_ms: float = 30.0
    window: str = "hann"
    fft_len: int = 1024
    log_floor: float = 1e-10
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if self.fft_len < self.frame_length:
            raise ValueError(f"fft_len {self.fft_len} shorter than frame ({self.frame_length} samples)")
        if not 0 < self.hop_ms <= self.frame_len_ms:
            raise ValueError("hop_ms must lie in (0, frame_len_ms]")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def frame_length(self) -> int:
        return int(round(self.frame_len_ms * self.sample_rate_hz / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000))

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @classmethod
    def strict_fft512(cls) -> "FrameConfig":
        """Profile keeping the 512-point FFT: 32 ms frames (512 samples), 24 ms hop."""
        return cls(frame_len_ms=32.0, hop_ms=24.0, fft_len=512)


@dataclass
class Spectrogram:
    id: str
    data: np.ndarray  # (T, F)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]


@dataclass
class FeatureStats:
    mean: np.ndarray
    variance: np.ndarray
    frame_count: int

    @property
    def n_bins(self) -> int:
        return self.mean.shape[0]


def load_audio(path, clip_id: str | None = None) -> AudioClip:
    """Read a PCM16 mono 16 kHz WAV file, scaling samples by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            comptype = wf.getcomptype()
            payload = wf.readframes(n_frames)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise AudioFormatError("encoding", f"{path}: {msg}") from exc
        raise AudioFormatError("not_wave", f"{path}: {msg}") from exc
    except EOFError as exc:
        raise AudioFormatError("truncated", f"{path}: unexpected end of file") from exc
    if comptype != "NONE" or width != 2:
        raise AudioFormatError("encoding", f"{path}: expected PCM16, got {8 * width}-bit {comptype}")
    if n_channels != 1:
        raise AudioFormatError("channels", f"{path}: expected mono, got {n_channels} channels")
    if rate != 16000:
        raise AudioFormatError("sample_rate", f"{path}: expected 16000 Hz, got {rate}")
    if len(payload) != 2 * n_frames:
        raise AudioFormatError("truncated", f"{path}: header declares {n_frames} frames, "
                                            f"payload holds {len(payload) // 2}")
    samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise AudioFormatError("truncated", f"{path}: no audio frames")
    return AudioClip(clip_id if clip_id is not None else path.stem, rate, samples)


def save_wav(clip: AudioClip, path) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate_hz)
        wf.writeframes(pcm.tobytes())


def frame_signal(clip: AudioClip, cfg: FrameConfig) -> np.ndarray:
    """Slice ``clip`` into overlapping frames; a trailing partial frame is dropped."""
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(f"clip rate {clip.sample_rate_hz} != config rate {cfg.sample_rate_hz}")
    n, flen, hop = clip.samples.size, cfg.frame_length, cfg.hop_length
    if n < flen:
        raise ValueError(f"clip {clip.id!r} has {n} samples, shorter than one frame ({flen})")
    n_frames = 1 + (n - flen) // hop
    idx = np.arange(flen)[None, :] + hop * np.arange(n_frames)[:, None]
    return clip.samples[idx]


def analysis_window(cfg: FrameConfig) -> np.ndarray:
    if cfg.window == "rect":
        return np.ones(cfg.frame_length)
    # symmetric Hann: both end points are exactly zero
    return np.hanning(cfg.frame_length)


def stft_log_magnitude(frames: np.ndarray, cfg: FrameConfig, clip_id: str = "") -> Spectrogram:
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] != cfg.frame_length:
        raise ValueError(f"frame length {frames.shape[1]} does not match config ({cfg.frame_length})")
    spectrum = np.fft.rfft(frames * analysis_window(cfg), n=cfg.fft_len, axis=1)
    return Spectrogram(clip_id, np.log(np.maximum(np.abs(spectrum), cfg.log_floor)))


def extract_features(clip: AudioClip, cfg: FrameConfig) -> Spectrogram:
    return stft_log_magnitude(frame_signal(clip, cfg), cfg, clip.id)


def _as_matrix(spec) -> np.ndarray:
    return spec.data if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)


def _merge(acc, n_b, mean_b, m2_b):
    # Chan et al. pairwise update of (count, mean, sum of squared deviations)
    n_a, mean_a, m2_a = acc
    n = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = m2_a + m2_b + delta**2 * (n_a * n_b / n)
    return n, mean, m2


def compute_feature_stats(spectrograms: Iterable) -> FeatureStats:
    """Pooled per-bin mean and population variance over every frame of every utterance."""
    acc = None
    for spec in spectrograms:
        x = _as_matrix(spec)
        if x.shape[0] == 0:
            continue
        mean_b = x.mean(axis=0)
        m2_b = ((x - mean_b) ** 2).sum(axis=0)
        if acc is None:
            acc = (x.shape[0], mean_b, m2_b)
        else:
            if x.shape[1] != acc[1].shape[0]:
                raise ValueError(f"bin count {x.shape[1]} differs from {acc[1].shape[0]}")
            acc = _merge(acc, x.shape[0], mean_b, m2_b)
    if acc is None:
        raise ValueError("no frames to compute statistics from")
    n, mean, m2 = acc
    if n < 2:
        raise ValueError("at least two frames are needed for feature statistics")
    return FeatureStats(mean, np.maximum(m2 / n, 0.0), int(n))


def normalize(spec: Spectrogram, stats: FeatureStats) -> Spectrogram:
    if spec.n_bins != stats.n_bins:
        raise ValueError(f"spectrogram has {spec.n_bins} bins, statistics have {stats.n_bins}")
    out = (spec.data - stats.mean) / np.sqrt(stats.variance + NORM_EPS)
    return Spectrogram(spec.id, out)


def normalize_utterance(spec: Spectrogram) -> Spectrogram:
    """Per-utterance mean/variance normalization (alternative to global statistics)."""
    x = spec.data
    if x.shape[0] < 2:
        return Spectrogram(spec.id, x - x.mean(axis=0))
    return normalize(spec, FeatureStats(x.mean(axis=0), x.var(axis=0), x.shape[0]))


# --- file formats ---------------------------------------------------------

def write_features(spec: Spectrogram, path) -> None:
    """Flat binary: header {magic 'MQFT', u32 version, u32 T, u32 F} + row-major float32 LE."""
    data = np.ascontiguousarray(spec.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def read_features(path, spec_id: str | None = None) -> Spectrogram:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, version, t, f = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    body = raw[_FEATURE_HEADER.size:]
    if len(body) != 4 * t * f:
        raise FeatureFileError(f"{path}: expected {t}x{f} floats, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").reshape(t, f).astype(np.float64)
    return Spectrogram(spec_id if spec_id is not None else path.stem, data)


def export_csv(spec: Spectrogram, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"bin{k}" for k in range(spec.n_bins)])
        for row in spec.data:
            writer.writerow([repr(float(v)) for v in row])


def stats_to_bytes(stats: FeatureStats) -> bytes:
    head = _STATS_HEADER.pack(STATS_MAGIC, STATS_VERSION, stats.n_bins, stats.frame_count)
    return head + np.asarray(stats.mean, "<f8").tobytes() + np.asarray(stats.variance, "<f8").tobytes()


def stats_from_bytes(raw: bytes) -> FeatureStats:
    if len(raw) < _STATS_HEADER.size:
        raise FeatureFileError("truncated statistics block")
    magic, version, f, count = _STATS_HEADER.unpack_from(raw)
    if magic != STATS_MAGIC or version != STATS_VERSION:
        raise FeatureFileError("bad statistics header")
    body = raw[_STATS_HEADER.size:]
    if len(body) != 16 * f:
        raise FeatureFileError("statistics block length mismatch")
    vals = np.frombuffer(body, dtype="<f8")
    return FeatureStats(vals[:f].copy(), vals[f:].copy(), int(count))


def write_stats(stats: FeatureStats, path) -> None:
    Path(path).write_bytes(stats_to_bytes(stats))


def read_stats(path) -> FeatureStats:
    return stats_from_bytes(Path(path).read_bytes())


def concatenate_clips(clips: Sequence[AudioClip], clip_id: str) -> AudioClip:
    return AudioClip(clip_id, clips[0].sample_rate_hz, np.concatenate([c.samples for c in clips]))

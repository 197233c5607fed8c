"""Waveform loading, cropping and magnitude spectrograms.

The front end is deliberately plain: a Hamming-windowed 512-point FFT over
25 ms frames with a 10 ms hop, magnitude only, then one scalar mean/std
normalization per spectrogram.
"""
from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyAudio, TooShort, UnsupportedFormat

DEFAULT_SAMPLE_RATE = 16000
FFT_SIZE = 512
WIN_S = 0.025
HOP_S = 0.010
NORM_EPS = 1e-6

_CACHE_MAGIC = b"HVSPEC1"
_CACHE_HEADER = struct.Struct("<7sIIffB")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude spectrogram laid out as ``[n_frames, n_bins]``."""

    values: np.ndarray
    hop_s: float = HOP_S
    win_s: float = WIN_S
    normalized: bool = False

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    @property
    def fft_size(self) -> int:
        return 2 * (self.n_bins - 1)


def load_wav(path) -> Waveform:
    """Read a 16-bit PCM RIFF file, averaging channels down to mono."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        with wave.open(os.fspath(path), "rb") as f:
            n_channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    if width != 2:
        raise UnsupportedFormat(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise EmptyAudio(f"{path}: no samples")
    samples = pcm.reshape(-1, n_channels).astype(np.float64).mean(axis=1) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate_hz))
        f.writeframes(pcm.tobytes())


def resample_linear(w: Waveform, rate_hz: int) -> Waveform:
    if w.sample_rate_hz == rate_hz:
        return w
    n_out = max(1, int(round(len(w) * rate_hz / w.sample_rate_hz)))
    t_out = np.arange(n_out) / rate_hz
    t_in = np.arange(len(w)) / w.sample_rate_hz
    return Waveform(np.interp(t_out, t_in, w.samples), rate_hz)


def load_audio(path, rate_hz: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """`load_wav` followed by resampling to the pipeline rate."""
    return resample_linear(load_wav(path), rate_hz)


def crop_or_pad(w: Waveform, duration_s: float, rng: np.random.Generator) -> Waveform:
    """Cut a random contiguous segment, or wrap-pad a short input, to ``duration_s``."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    n = int(round(duration_s * w.sample_rate_hz))
    x = np.asarray(w.samples)
    if len(x) > n:
        start = int(rng.integers(0, len(x) - n + 1))
        out = x[start:start + n]
    elif len(x) < n:
        out = x[np.arange(n) % len(x)]
    else:
        out = x
    return Waveform(out.copy(), w.sample_rate_hz)


def frame_count(n_samples: int, win_len: int, hop_len: int) -> int:
    return 1 + (n_samples - win_len) // hop_len


def stft_magnitude(w: Waveform, fft_size: int = FFT_SIZE, win_s: float = WIN_S,
                   hop_s: float = HOP_S) -> Spectrogram:
    win_len = int(round(win_s * w.sample_rate_hz))
    hop_len = int(round(hop_s * w.sample_rate_hz))
    if win_len > fft_size:
        raise ValueError(f"window of {win_len} samples exceeds fft size {fft_size}")
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < win_len:
        raise TooShort(f"{len(x)} samples is shorter than one {win_len}-sample window")
    n_frames = frame_count(len(x), win_len, hop_len)
    frames = np.lib.stride_tricks.sliding_window_view(x, win_len)[::hop_len][:n_frames]
    spec = np.abs(np.fft.rfft(frames * np.hamming(win_len), n=fft_size, axis=1))
    return Spectrogram(spec, hop_s=hop_s, win_s=win_s)


def normalize(s: Spectrogram, eps: float = NORM_EPS, per_bin: bool = False) -> Spectrogram:
    """Subtract the mean and divide by the population std (plus ``eps``).

    Statistics are one scalar over all entries; ``per_bin=True`` uses one
    mean/std per frequency bin instead.
    """
    if s.normalized:
        raise ValueError("spectrogram is already normalized")
    v = np.asarray(s.values, dtype=np.float64)
    axis = 0 if per_bin else None
    out = (v - v.mean(axis=axis)) / (v.std(axis=axis) + eps)
    return replace(s, values=out, normalized=True)


def crop_frames(s: Spectrogram, n_frames: int, rng: np.random.Generator) -> Spectrogram:
    """Frame-domain counterpart of `crop_or_pad`, used with cached spectrograms."""
    v = s.values
    if v.shape[0] > n_frames:
        start = int(rng.integers(0, v.shape[0] - n_frames + 1))
        v = v[start:start + n_frames]
    elif v.shape[0] < n_frames:
        v = v[np.arange(n_frames) % v.shape[0]]
    return replace(s, values=np.array(v))


def write_spec_cache(path, s: Spectrogram) -> None:
    values = np.ascontiguousarray(s.values, dtype="<f4")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_CACHE_HEADER.pack(_CACHE_MAGIC, s.n_frames, s.n_bins, s.hop_s, s.win_s,
                                   int(s.normalized)))
        f.write(values.tobytes())
    os.replace(tmp, path)


def read_spec_cache(path) -> Spectrogram:
    with open(path, "rb") as f:
        head = f.read(_CACHE_HEADER.size)
        if len(head) != _CACHE_HEADER.size:
            raise UnsupportedFormat(f"{path}: truncated spectrogram header")
        magic, n_frames, n_bins, hop_s, win_s, normalized = _CACHE_HEADER.unpack(head)
        if magic != _CACHE_MAGIC:
            raise UnsupportedFormat(f"{path}: bad magic {magic!r}")
        payload = f.read()
    values = np.frombuffer(payload, dtype="<f4")
    if values.size != n_frames * n_bins:
        raise UnsupportedFormat(f"{path}: payload size does not match header")
    return Spectrogram(values.reshape(n_frames, n_bins).astype(np.float64),
                       hop_s=round(hop_s, 6), win_s=round(win_s, 6),
                       normalized=bool(normalized))

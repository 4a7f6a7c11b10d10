"""Waveform loading and log-mel spectrogram computation.

The default configuration (32 kHz, window 1024, hop 640, 64 mel bands)
turns 30 s of audio into a 1500x64 matrix and 10 s into 500x64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import AudioLoadError, ConfigMismatch, UnsupportedFormat

MEL_MAGIC = b"APML"


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float32/float64, mono
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 32000
    window_size: int = 1024
    hop_size: int = 640
    n_mels: int = 64
    fmin: float = 50.0
    fmax: float = 14000.0
    log_offset: float = 1e-10

    def __post_init__(self):
        if self.hop_size > self.window_size:
            raise ValueError("hop_size must be <= window_size")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError("need 0 <= fmin < fmax <= sample_rate/2")


@dataclass(frozen=True)
class LogMelSpectrogram:
    values: np.ndarray  # (T_frames, n_mels)
    config: StftConfig = field(repr=False)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def load_waveform(path, target_sample_rate: int) -> Waveform:
    """Decode a WAV file to mono float samples at the requested rate."""
    path = Path(path)
    if not path.exists():
        raise AudioLoadError(path, "file not found")
    if path.suffix.lower() not in (".wav", ".wave"):
        raise UnsupportedFormat(path, f"unsupported extension {path.suffix!r}")
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:  # scipy raises ValueError on bad containers
        raise AudioLoadError(path, str(exc)) from exc

    data = np.asarray(data)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    elif samples.ndim != 1:
        raise AudioLoadError(path, f"unexpected array rank {samples.ndim}")

    if rate != target_sample_rate:
        g = np.gcd(int(rate), int(target_sample_rate))
        samples = resample_poly(samples, target_sample_rate // g, rate // g)
    return Waveform(samples=samples.astype(np.float64), sample_rate=target_sample_rate)


def fix_duration(wave: Waveform, target_seconds: float) -> Waveform:
    """Zero-pad short audio at the tail; truncate long audio from the end."""
    if target_seconds <= 0:
        raise ValueError("target_seconds must be positive")
    target_len = round(target_seconds * wave.sample_rate)
    n = len(wave.samples)
    if n == target_len:
        return wave
    if n > target_len:
        samples = wave.samples[:target_len]
    else:
        samples = np.concatenate([wave.samples, np.zeros(target_len - n, dtype=wave.samples.dtype)])
    return Waveform(samples=samples, sample_rate=wave.sample_rate)


def mel_filterbank(config: StftConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft_bins)."""
    n_bins = config.window_size // 2 + 1

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fft_freqs = np.linspace(0.0, config.sample_rate / 2.0, n_bins)

    fb = np.zeros((config.n_mels, n_bins))
    for i in range(config.n_mels):
        lo, ctr, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def log_mel(wave: Waveform, config: StftConfig) -> LogMelSpectrogram:
    """Log-mel energies with T_frames = floor(len / hop), no centering."""
    if wave.sample_rate != config.sample_rate:
        raise ConfigMismatch(
            f"waveform rate {wave.sample_rate} != config rate {config.sample_rate}"
        )
    n_frames = len(wave.samples) // config.hop_size
    if n_frames < 1:
        raise ConfigMismatch("waveform shorter than one hop")

    needed = (n_frames - 1) * config.hop_size + config.window_size
    samples = wave.samples
    if needed > len(samples):
        samples = np.concatenate([samples, np.zeros(needed - len(samples))])

    window = get_window("hann", config.window_size, fftbins=True)
    idx = np.arange(config.window_size)[None, :] + config.hop_size * np.arange(n_frames)[:, None]
    frames = samples[idx] * window
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    mel = power @ mel_filterbank(config).T
    values = np.log(mel + config.log_offset)
    return LogMelSpectrogram(values=values.astype(np.float32), config=config)


def dump_mel(spec: LogMelSpectrogram, path) -> None:
    """Write a little-endian float32 row-major matrix with a 16-byte header."""
    header = MEL_MAGIC + struct.pack("<III", 1, spec.n_frames, spec.n_mels)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(spec.values.astype("<f4").tobytes(order="C"))


def read_mel(path, config: StftConfig | None = None) -> LogMelSpectrogram:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != MEL_MAGIC:
            raise ConfigMismatch(f"{path}: not a mel dump file")
        _version, n_frames, n_mels = struct.unpack("<III", header[4:])
        values = np.frombuffer(fh.read(), dtype="<f4").reshape(n_frames, n_mels)
    return LogMelSpectrogram(values=values, config=config or StftConfig())

"""Audio ingestion and the log-mel spectral front-end.

Input is 16 kHz PCM WAV only. The STFT runs at window 1024 / hop 512, and
frames are average-pooled in groups of 6 so the output hop is exactly
6 * 512 / 16000 = 0.192 s, aligned with the target frame grid.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000


class AudioFormatError(ValueError):
    """The file is not a readable PCM WAV."""


class UnsupportedRateError(ValueError):
    """Sample rate is not 16 kHz (no resampler in scope)."""


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    pool: int = 6  # STFT frames averaged per output frame

    @property
    def frame_hop_seconds(self) -> float:
        return self.pool * self.hop / self.sample_rate

    @property
    def samples_per_frame(self) -> int:
        return self.pool * self.hop


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray  # mono float64
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # (n_frames, n_bins) log-mel magnitudes
    frame_hop: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def load_wav(path: str | Path) -> AudioClip:
    """Read a PCM WAV file as a mono 16 kHz clip (stereo is channel-averaged)."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    elif width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    else:
        raise AudioFormatError(f"{path}: unsupported sample width {width}")
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    if not np.all(np.isfinite(data)):
        raise AudioFormatError(f"{path}: non-finite samples")
    return AudioClip(samples=data, sample_rate=rate)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono float samples in [-1, 1] as 16-bit PCM."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def mel_scale(hz: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel: np.ndarray | float) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular mel filters, peak 1, shape (n_mels, n_fft // 2 + 1)."""
    n_bins = config.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * config.sample_rate / config.n_fft
    mel_points = np.linspace(
        mel_scale(config.fmin), mel_scale(config.fmax), config.n_mels + 2
    )
    hz_points = mel_to_hz(mel_points)
    fb = np.zeros((config.n_mels, n_bins))
    for m in range(config.n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_center_frequencies(config: FeatureConfig) -> np.ndarray:
    mel_points = np.linspace(
        mel_scale(config.fmin), mel_scale(config.fmax), config.n_mels + 2
    )
    return mel_to_hz(mel_points[1:-1])


def stft_log_mel(clip: AudioClip, config: FeatureConfig | None = None) -> Spectrogram:
    """Magnitude STFT -> mel filterbank -> log(1 + x) -> 6:1 temporal pooling.

    Output frame count is ceil(n_samples / (pool * hop)), matching the target
    grid's ceil(duration / 0.192); missing trailing STFT frames are treated as
    silence. The signal is center-padded by half a window so the first pooled
    frame's context starts at t = 0.
    """
    if config is None:
        config = FeatureConfig()
    if clip.sample_rate != config.sample_rate:
        raise UnsupportedRateError(
            f"clip rate {clip.sample_rate}, expected {config.sample_rate}"
        )
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size == 0:
        raise AudioFormatError("empty clip")
    n_out = -(-x.size // config.samples_per_frame)  # ceil
    half = config.n_fft // 2
    padded = np.pad(x, (half, half))
    n_raw = 1 + x.size // config.hop
    frames_needed = config.pool * n_out

    windows = np.lib.stride_tricks.sliding_window_view(padded, config.n_fft)
    frames = windows[:: config.hop][:n_raw]
    spectra = np.abs(np.fft.rfft(frames * hann_window(config.n_fft), axis=1))
    mel = np.log1p(spectra @ mel_filterbank(config).T)
    if mel.shape[0] < frames_needed:
        mel = np.pad(mel, ((0, frames_needed - mel.shape[0]), (0, 0)))
    else:
        mel = mel[:frames_needed]
    pooled = mel.reshape(n_out, config.pool, config.n_mels).mean(axis=1)
    return Spectrogram(values=pooled, frame_hop=config.frame_hop_seconds)


def write_matrix(path: str | Path, values: np.ndarray) -> None:
    """Flat binary dump: two little-endian int32 dims, then row-major float32."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        rows, cols = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != rows * cols:
        raise AudioFormatError(f"{path}: size mismatch in matrix dump")
    return data.reshape(rows, cols).astype(np.float64)

"""Log-spectrogram extraction and model-input assembly.

A recording is chunked into fixed s-second segments (zero right-padding on
the remainder), each segment becomes an F x W decibel matrix via a centered
Hann STFT, and a breath/cough pair of matrices is stacked depth-wise into
the F x W x 2 network input.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .audio_io import AudioClip
from .errors import EmptyClip, InvalidConfig, LengthMismatch, ShapeMismatch

SPECTROGRAM_MAGIC = b"CSPC"


@dataclass
class SpectrogramConfig:
    fft_n: int = 1024
    hop: int = 512
    sr: int = 24000
    segment_seconds: int = 8
    amin: float = 1e-5
    top_db: float = 80.0

    def __post_init__(self):
        if self.fft_n <= 0 or (self.fft_n & (self.fft_n - 1)) != 0:
            raise InvalidConfig("fft_n must be a positive power of two")
        if not (0 < self.hop <= self.fft_n):
            raise InvalidConfig("hop must satisfy 0 < hop <= fft_n")
        if self.sr <= 0 or self.segment_seconds < 1:
            raise InvalidConfig("sr and segment_seconds must be positive")
        if self.fft_n > self.sr * self.segment_seconds:
            raise InvalidConfig("fft_n exceeds segment length")
        if self.amin <= 0 or self.top_db <= 0:
            raise InvalidConfig("amin and top_db must be positive")

    @property
    def segment_samples(self) -> int:
        return self.sr * self.segment_seconds

    @property
    def freq_bins(self) -> int:
        return self.fft_n // 2 + 1

    @property
    def frames(self) -> int:
        return 1 + self.segment_samples // self.hop


@dataclass
class LogSpectrogram:
    """F x W matrix of decibel values in [-top_db, 0]."""

    values: np.ndarray

    @property
    def freq_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass
class ModelInput:
    """F x W x 2 tensor; depth 0 is the breath channel, depth 1 the cough."""

    tensor: np.ndarray
    breath_channel: int = field(default=0, init=False)
    cough_channel: int = field(default=1, init=False)

    def to_nchw(self) -> np.ndarray:
        """Channel-first layout (2, F, W) expected by the network."""
        return np.moveaxis(self.tensor, 2, 0)


@dataclass
class LabeledPairInputs:
    """All chunked model inputs for one labeled breath/cough recording pair."""

    participant_id: str
    label: int
    inputs: list


def chunk(clip: AudioClip, segment_seconds: int) -> list:
    """Split a clip into ceil(n / (sr*s)) segments of exactly sr*s samples.

    The final segment is right-padded with zeros.
    """
    if len(clip.samples) == 0:
        raise EmptyClip("cannot chunk a clip with no samples")
    if segment_seconds < 1:
        raise ValueError("segment_seconds must be >= 1")
    seg_len = clip.sample_rate * segment_seconds
    n = len(clip.samples)
    count = -(-n // seg_len)
    padded = np.zeros(count * seg_len, dtype=np.float64)
    padded[:n] = clip.samples
    return [padded[i * seg_len:(i + 1) * seg_len] for i in range(count)]


def _hann(n: int) -> np.ndarray:
    # periodic form, consistent with FFT analysis windows
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def stft_frames(segment: np.ndarray, config: SpectrogramConfig) -> np.ndarray:
    """Windowed analysis frames (W, fft_n) of a centered, reflect-padded STFT."""
    pad = config.fft_n // 2
    x = np.pad(np.asarray(segment, dtype=np.float64), pad, mode="reflect")
    n_frames = config.frames
    starts = np.arange(n_frames) * config.hop
    idx = starts[:, None] + np.arange(config.fft_n)[None, :]
    return x[idx] * _hann(config.fft_n)[None, :]


def log_spectrogram(segment: np.ndarray, config: SpectrogramConfig) -> LogSpectrogram:
    """Magnitude STFT in decibels referenced to the segment maximum.

    Values are floored at 20*log10(amin) relative to the reference and
    clamped below at -top_db, so every cell lies in [-top_db, 0].
    """
    segment = np.asarray(segment, dtype=np.float64)
    if len(segment) != config.segment_samples:
        raise LengthMismatch(
            f"segment has {len(segment)} samples, expected {config.segment_samples}")
    frames = stft_frames(segment, config)
    mag = np.abs(np.fft.rfft(frames, axis=1)).T  # (F, W)
    ref = mag.max()
    ratio = mag / ref if ref > 0 else np.zeros_like(mag)
    db = 20.0 * np.log10(np.maximum(ratio, config.amin))
    return LogSpectrogram(np.maximum(db, -config.top_db))


def assemble_input(breath: LogSpectrogram, cough: LogSpectrogram) -> ModelInput:
    """Stack breath and cough spectrograms depth-wise into an F x W x 2 input."""
    if breath.values.shape != cough.values.shape:
        raise ShapeMismatch(
            f"breath {breath.values.shape} vs cough {cough.values.shape}")
    tensor = np.stack([breath.values, cough.values], axis=2).astype(np.float32)
    return ModelInput(tensor)


def pair_segments(breath_clip: AudioClip, cough_clip: AudioClip,
                  config: SpectrogramConfig) -> list:
    """Chunk both clips and pair their spectrograms positionally.

    When chunk counts differ, the shorter list cycles from its start so the
    output covers every chunk of the longer recording.
    """
    if breath_clip.sample_rate != config.sr or cough_clip.sample_rate != config.sr:
        raise ValueError("clips must be resampled to config.sr before pairing")
    breath_specs = [log_spectrogram(s, config)
                    for s in chunk(breath_clip, config.segment_seconds)]
    cough_specs = [log_spectrogram(s, config)
                   for s in chunk(cough_clip, config.segment_seconds)]
    count = max(len(breath_specs), len(cough_specs))
    return [assemble_input(breath_specs[i % len(breath_specs)],
                           cough_specs[i % len(cough_specs)])
            for i in range(count)]


def write_spectrogram(path, spec: LogSpectrogram) -> None:
    """Flat binary export: 16-byte header (magic, F, W, reserved) + f32 cells."""
    header = SPECTROGRAM_MAGIC + struct.pack(
        "<III", spec.freq_bins, spec.frames, 0)
    with open(str(path), "wb") as f:
        f.write(header)
        f.write(spec.values.astype("<f4").tobytes())


def read_spectrogram(path) -> LogSpectrogram:
    with open(str(path), "rb") as f:
        header = f.read(16)
        if header[:4] != SPECTROGRAM_MAGIC:
            raise ShapeMismatch("bad spectrogram magic")
        freq_bins, frames, _ = struct.unpack("<III", header[4:])
        values = np.frombuffer(f.read(freq_bins * frames * 4), dtype="<f4")
    return LogSpectrogram(values.reshape(freq_bins, frames).astype(np.float64))

"""WAV decoding, encoding, and sample-rate conversion.

Hand-rolled RIFF/WAVE parser: PCM 8/16/24/32-bit integer and 32-bit float,
mono or stereo, little-endian. Unknown chunks are skipped. Stereo is
collapsed to mono by channel mean. The resampler is a polyphase
windowed-sinc interpolator (Hann window, 32 taps per phase).
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedHeader, TruncatedData, UnsupportedEncoding

_FORMAT_PCM = 1
_FORMAT_FLOAT = 3
_FORMAT_EXTENSIBLE = 0xFFFE

RESAMPLE_TAPS = 32


@dataclass
class AudioClip:
    """Mono audio: samples in [-1, 1] plus the rate they were sampled at."""

    samples: np.ndarray
    sample_rate: int
    source_path: str = field(default="")

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _scale_to_float(raw: np.ndarray, bits: int, fmt: int) -> np.ndarray:
    if fmt == _FORMAT_FLOAT:
        return np.clip(raw.astype(np.float64), -1.0, 1.0)
    if bits == 8:
        # 8-bit WAV is unsigned with midpoint 128
        return (raw.astype(np.float64) - 128.0) / 128.0
    return raw.astype(np.float64) / float(2 ** (bits - 1))


def _decode_int24(payload: bytes) -> np.ndarray:
    b = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.uint32)
    value = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
    value = value.astype(np.int32)
    value[value >= 1 << 23] -= 1 << 24
    return value


def read_wav(path) -> AudioClip:
    """Decode a RIFF/WAVE file into a normalized mono AudioClip.

    Stereo files are averaged channel-wise; integer PCM is scaled by the
    encoding's full-scale value so all samples land in [-1, 1].
    """
    path = str(path)
    with open(path, "rb") as f:
        data = f.read()

    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeader(f"{path}: not a RIFF/WAVE file")

    fmt_code = None
    channels = None
    sample_rate = None
    bits = None
    payload = None

    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        if chunk_id == b"fmt ":
            if chunk_size < 16 or body_start + 16 > len(data):
                raise MalformedHeader(f"{path}: fmt chunk too short")
            fmt_code, channels, sample_rate, _, _, bits = struct.unpack_from(
                "<HHIIHH", data, body_start)
            if fmt_code == _FORMAT_EXTENSIBLE:
                # resolve the sub-format GUID's leading format code
                if chunk_size >= 40 and body_start + 26 <= len(data):
                    (fmt_code,) = struct.unpack_from("<H", data, body_start + 24)
                else:
                    raise MalformedHeader(f"{path}: truncated extensible fmt chunk")
        elif chunk_id == b"data":
            if body_start + chunk_size > len(data):
                raise TruncatedData(
                    f"{path}: data chunk declares {chunk_size} bytes, "
                    f"{len(data) - body_start} present")
            payload = data[body_start:body_start + chunk_size]
        # chunks are word-aligned: odd sizes carry one pad byte
        pos = body_start + chunk_size + (chunk_size & 1)

    if fmt_code is None:
        raise MalformedHeader(f"{path}: missing fmt chunk")
    if payload is None:
        raise MalformedHeader(f"{path}: missing data chunk")
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{path}: {channels} channels unsupported")
    if sample_rate <= 0:
        raise MalformedHeader(f"{path}: invalid sample rate {sample_rate}")

    if fmt_code == _FORMAT_PCM and bits == 8:
        raw = np.frombuffer(payload, dtype=np.uint8)
    elif fmt_code == _FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[:len(payload) // 2 * 2], dtype="<i2")
    elif fmt_code == _FORMAT_PCM and bits == 24:
        raw = _decode_int24(payload[:len(payload) // 3 * 3])
    elif fmt_code == _FORMAT_PCM and bits == 32:
        raw = np.frombuffer(payload[:len(payload) // 4 * 4], dtype="<i4")
    elif fmt_code == _FORMAT_FLOAT and bits == 32:
        raw = np.frombuffer(payload[:len(payload) // 4 * 4], dtype="<f4")
    else:
        raise UnsupportedEncoding(f"{path}: format code {fmt_code} at {bits} bits")

    samples = _scale_to_float(raw, bits, fmt_code)
    if channels == 2:
        samples = samples[:len(samples) // 2 * 2].reshape(-1, 2).mean(axis=1)
    if len(samples) == 0:
        raise TruncatedData(f"{path}: data chunk holds no samples")
    return AudioClip(samples=samples, sample_rate=int(sample_rate), source_path=path)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples as canonical 16-bit PCM."""
    x = np.asarray(samples, dtype=np.float64)
    q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, _FORMAT_PCM, 1,
                                sample_rate, sample_rate * 2, 2, 16)
    datahdr = b"data" + struct.pack("<I", len(payload))
    with open(str(path), "wb") as f:
        f.write(header + fmt + datahdr + payload)


def _phase_kernels(up: int, down: int) -> np.ndarray:
    """Windowed-sinc interpolation kernels, one row per output phase.

    Each row is normalized to sum 1 so DC signals pass through unchanged.
    """
    half = RESAMPLE_TAPS // 2
    cutoff = min(1.0, up / down)
    kernels = np.empty((up, RESAMPLE_TAPS), dtype=np.float64)
    for phase in range(up):
        frac = phase / up
        offsets = np.arange(RESAMPLE_TAPS, dtype=np.float64) - (half - 1) - frac
        window = 0.5 * (1.0 + np.cos(np.pi * np.clip(offsets / half, -1.0, 1.0)))
        h = cutoff * np.sinc(cutoff * offsets) * window
        kernels[phase] = h / h.sum()
    return kernels


def resample(clip: AudioClip, target_sr: int) -> AudioClip:
    """Band-limited rate conversion via polyphase windowed-sinc filtering.

    Output length is round(n * target_sr / sample_rate). Returns the input
    untouched when the rate already matches.
    """
    if target_sr <= 0:
        raise ValueError("target_sr must be positive")
    if target_sr == clip.sample_rate:
        return clip

    g = math.gcd(clip.sample_rate, target_sr)
    up = target_sr // g
    down = clip.sample_rate // g
    n_in = len(clip.samples)
    n_out = int(round(n_in * target_sr / clip.sample_rate))
    if n_out == 0:
        return AudioClip(np.zeros(0), target_sr, clip.source_path)

    half = RESAMPLE_TAPS // 2
    kernels = _phase_kernels(up, down)
    padded = np.pad(clip.samples, (half - 1, half + down + 1))

    j = np.arange(n_out, dtype=np.int64)
    num = j * down
    base = num // up          # integer part of the input-time grid
    phase = num - base * up   # fractional part, in units of 1/up

    out = np.empty(n_out, dtype=np.float64)
    tap_idx = np.arange(RESAMPLE_TAPS, dtype=np.int64)
    for p in range(up):
        sel = np.nonzero(phase == p)[0]
        if len(sel) == 0:
            continue
        rows = padded[base[sel, None] + tap_idx[None, :]]
        out[sel] = rows @ kernels[p]
    return AudioClip(out, target_sr, clip.source_path)

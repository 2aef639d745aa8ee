"""Deterministic synthetic breath/cough corpus with a planted class signature.

Negatives are low-passed pink noise (breath) and decaying noise-burst trains
(cough). Positives additionally carry band-limited noise in a configured
frequency band at a configured SNR relative to the file's own in-band
power. The signature is detectable in closed form (band-energy ratio),
which yields an independent oracle classifier for end-to-end tests, and it
is learnable by a small CNN on log spectrograms.

Every participant derives its own random stream from
SeedSequence([corpus_seed, participant_index]), so generation order (or
parallel generation) cannot change the output bytes.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .audio_io import read_wav, write_wav
from .errors import IoFailure
from .folds import MANIFEST_HEADER, STRATA, RecordingPair

DEFAULT_STRATUM_COUNTS = {
    "healthy-no-symptoms": 245,
    "healthy-with-cough": 30,
    "asthma-with-cough": 19,
    "COVID-no-cough": 39,
    "COVID-cough": 23,
}

BREATH_RMS = 0.06
COUGH_BURST_AMP = 0.22
COUGH_FLOOR = 0.004
_POWER_FLOOR = 1e-20


@dataclass
class SynthConfig:
    stratum_counts: dict = field(default_factory=lambda: dict(DEFAULT_STRATUM_COUNTS))
    sr: int = 8000
    duration_range: tuple = (1.5, 7.0)
    signature_band: tuple = (1400.0, 2600.0)
    signature_snr: float = 6.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.duration_range
        if not (1.0 <= lo <= hi <= 48.0):
            raise ValueError("duration_range must lie within [1, 48] seconds")
        if not (0 <= self.signature_band[0] <= self.signature_band[1] < self.sr / 2):
            raise ValueError("signature band must satisfy f_lo <= f_hi < sr/2")
        unknown = set(self.stratum_counts) - set(STRATA)
        if unknown:
            raise ValueError(f"unknown strata {sorted(unknown)}")


def _band_mask(n: int, sr: int, band) -> np.ndarray:
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    return (freqs >= band[0]) & (freqs < band[1])


def _band_power(x: np.ndarray, sr: int, band) -> float:
    """Mean per-sample signal power inside the band (Parseval-normalized)."""
    spec = np.fft.rfft(x)
    mask = _band_mask(len(x), sr, band)
    power = np.abs(spec[mask]) ** 2
    # rfft halves the negative frequencies; double everything except DC/Nyquist
    freqs = np.fft.rfftfreq(len(x), 1.0 / sr)[mask]
    weight = np.where((freqs == 0) | np.isclose(freqs, sr / 2), 1.0, 2.0)
    return float((power * weight).sum() / len(x) ** 2)


def _breath(rng, n: int, sr: int) -> np.ndarray:
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    shape = np.zeros_like(f)
    shape[1:] = 1.0 / np.sqrt(f[1:])                      # pink slope
    shape /= np.sqrt(1.0 + (f / 700.0) ** 4)              # low-pass roll-off
    x = np.fft.irfft(spec * shape, n)
    t = np.arange(n) / sr
    rate = rng.uniform(0.15, 0.4)
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    x *= envelope
    rms = np.sqrt(np.mean(x ** 2))
    return x * (BREATH_RMS / rms) if rms > 0 else x


def _cough(rng, n: int, sr: int) -> np.ndarray:
    x = COUGH_FLOOR * rng.normal(size=n)
    duration = n / sr
    n_bursts = max(1, int(round(duration * rng.uniform(0.4, 0.9))))
    for _ in range(n_bursts):
        length = int(rng.uniform(0.15, 0.35) * sr)
        start = int(rng.uniform(0, max(1, n - length)))
        tau = rng.uniform(0.04, 0.09) * sr
        seg = min(length, n - start)
        decay = np.exp(-np.arange(seg) / tau)
        x[start:start + seg] += COUGH_BURST_AMP * rng.normal(size=seg) * decay
    return x


def _plant_signature(rng, x: np.ndarray, sr: int, band, snr_db: float) -> np.ndarray:
    mask = _band_mask(len(x), sr, band)
    if not mask.any() or band[0] >= band[1]:
        return x
    target = _band_power(x, sr, band) * 10.0 ** (snr_db / 10.0)
    spec = np.fft.rfft(rng.normal(size=len(x)))
    spec[~mask] = 0.0
    sig = np.fft.irfft(spec, len(x))
    power = _band_power(sig, sr, band)
    if power <= 0:
        return x
    return x + sig * np.sqrt(target / power)


def _participant_plan(config: SynthConfig) -> list:
    """(participant_id, stratum, label) rows in a fixed deterministic order."""
    plan = []
    idx = 1
    for stratum in STRATA:
        for _ in range(int(config.stratum_counts.get(stratum, 0))):
            label = "positive" if stratum.startswith("COVID") else "negative"
            plan.append((f"P{idx:04d}", stratum, label))
            idx += 1
    return plan


def generate(config: SynthConfig, out_dir) -> str:
    """Write the corpus WAVs plus manifest.csv; returns the manifest path.

    Regeneration with the same config is byte-identical, WAV payloads
    included.
    """
    out_dir = str(out_dir)
    audio_dir = os.path.join(out_dir, "audio")
    try:
        os.makedirs(audio_dir, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {audio_dir}: {exc}") from exc

    plan = _participant_plan(config)
    rows = []
    lo, hi = config.duration_range
    for index, (pid, stratum, label) in enumerate(plan):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
        clips = {}
        for kind, make in (("breath", _breath), ("cough", _cough)):
            n = int(round(rng.uniform(lo, hi) * config.sr))
            x = make(rng, n, config.sr)
            if label == "positive":
                x = _plant_signature(rng, x, config.sr,
                                     config.signature_band, config.signature_snr)
            clips[kind] = x
        breath_rel = f"audio/{pid}_breath.wav"
        cough_rel = f"audio/{pid}_cough.wav"
        try:
            write_wav(os.path.join(out_dir, breath_rel), clips["breath"], config.sr)
            write_wav(os.path.join(out_dir, cough_rel), clips["cough"], config.sr)
        except OSError as exc:
            raise IoFailure(f"cannot write audio for {pid}: {exc}") from exc
        rows.append([pid, breath_rel, cough_rel, label, stratum])

    manifest_path = os.path.join(out_dir, "manifest.csv")
    try:
        with open(manifest_path, "w", newline="") as f:
            f.write(",".join(MANIFEST_HEADER) + "\n")
            for row in rows:
                f.write(",".join(row) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest: {exc}") from exc
    return manifest_path


def oracle_score(pair: RecordingPair, config: SynthConfig) -> float:
    """Mean log band power across the two files; monotone in the signature.

    Test-only classifier: higher scores indicate the planted positive band.
    """
    total = 0.0
    for path in (pair.breath_path, pair.cough_path):
        clip = read_wav(path)
        total += np.log10(_band_power(clip.samples, clip.sample_rate,
                                      config.signature_band) + _POWER_FLOOR)
    return total / 2.0

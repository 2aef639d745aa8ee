import numpy as np
import pytest

from cider.audio_io import AudioClip
from cider.dsp import (LogSpectrogram, SpectrogramConfig, assemble_input, chunk,
                       log_spectrogram, pair_segments, read_spectrogram,
                       stft_frames, write_spectrogram)
from cider.errors import EmptyClip, InvalidConfig, LengthMismatch, ShapeMismatch

DEFAULTS = SpectrogramConfig()
SMALL = SpectrogramConfig(fft_n=256, hop=128, sr=8000, segment_seconds=2)


def _clip(seconds, sr=24000, value=0.1):
    return AudioClip(np.full(int(seconds * sr), value), sr)


# --- chunking ---

def test_chunk_10s_clip_pads_remainder():
    segs = chunk(_clip(10), 8)
    assert len(segs) == 2
    assert all(len(s) == 192000 for s in segs)
    assert np.all(segs[1][48000:] == 0.0)
    assert np.all(segs[1][:48000] == 0.1)


def test_chunk_exact_fit_no_padding():
    segs = chunk(_clip(8), 8)
    assert len(segs) == 1
    assert np.all(segs[0] == 0.1)


def test_chunk_single_sample():
    segs = chunk(AudioClip(np.array([0.7]), 24000), 8)
    assert len(segs) == 1
    assert segs[0][0] == 0.7
    assert np.count_nonzero(segs[0]) == 1
    assert len(segs[0]) == 192000


def test_chunk_concat_round_trip():
    rng = np.random.default_rng(3)
    n = 50000
    clip = AudioClip(rng.uniform(-1, 1, n), 24000)
    segs = chunk(clip, 1)
    recon = np.concatenate(segs)[:n]
    np.testing.assert_array_equal(recon, clip.samples)


def test_chunk_empty_clip_rejected():
    with pytest.raises(EmptyClip):
        chunk(AudioClip(np.zeros(0), 24000), 8)


# --- log spectrogram ---

def test_shape_contract_at_defaults():
    seg = np.zeros(DEFAULTS.segment_samples)
    seg[0] = 1.0
    spec = log_spectrogram(seg, DEFAULTS)
    assert spec.values.shape == (513, 376)
    assert spec.freq_bins == DEFAULTS.fft_n // 2 + 1 == 513
    assert spec.frames == 1 + DEFAULTS.segment_samples // DEFAULTS.hop == 376


def test_silence_maps_to_floor():
    spec = log_spectrogram(np.zeros(SMALL.segment_samples), SMALL)
    assert np.all(spec.values == -SMALL.top_db)


def test_sine_peak_bin():
    t = np.arange(DEFAULTS.segment_samples) / DEFAULTS.sr
    seg = 0.5 * np.sin(2 * np.pi * 3000.0 * t)
    spec = log_spectrogram(seg, DEFAULTS)
    expected_bin = round(3000 * DEFAULTS.fft_n / DEFAULTS.sr)
    assert expected_bin == 128
    interior = spec.values[:, 2:-2]
    assert np.all(np.argmax(interior, axis=0) == expected_bin)
    # cross-check one interior frame against a direct DFT
    frames = stft_frames(seg, DEFAULTS)
    f = frames[len(frames) // 2]
    dft = np.abs(np.array([np.sum(f * np.exp(-2j * np.pi * k * np.arange(len(f)) / len(f)))
                           for k in range(120, 140)]))
    assert 120 + np.argmax(dft) == expected_bin


def test_amplitude_scale_invariance():
    rng = np.random.default_rng(5)
    seg = rng.normal(0, 0.1, SMALL.segment_samples)
    a = log_spectrogram(seg, SMALL).values
    b = log_spectrogram(seg * 2.0, SMALL).values   # power-of-two scale: exact
    np.testing.assert_array_equal(a, b)
    c = log_spectrogram(seg * 3.7, SMALL).values
    np.testing.assert_allclose(a, c, atol=1e-9)


def test_values_bounded():
    rng = np.random.default_rng(6)
    seg = rng.normal(0, 0.3, SMALL.segment_samples)
    v = log_spectrogram(seg, SMALL).values
    assert v.max() <= 0.0
    assert v.min() >= -SMALL.top_db
    assert v.max() == 0.0  # the reference cell sits exactly at 0 dB


def test_parseval_on_one_frame():
    rng = np.random.default_rng(7)
    seg = rng.normal(0, 0.2, SMALL.segment_samples)
    f = stft_frames(seg, SMALL)[3]
    full = np.fft.fft(f)
    lhs = np.sum(np.abs(full) ** 2)
    rhs = len(f) * np.sum(f ** 2)
    assert abs(lhs - rhs) / rhs < 1e-6


def test_deterministic():
    rng = np.random.default_rng(8)
    seg = rng.normal(0, 0.2, SMALL.segment_samples)
    a = log_spectrogram(seg.copy(), SMALL).values
    b = log_spectrogram(seg.copy(), SMALL).values
    np.testing.assert_array_equal(a, b)


def test_length_mismatch_rejected():
    with pytest.raises(LengthMismatch):
        log_spectrogram(np.zeros(100), SMALL)


def test_invalid_configs_rejected():
    with pytest.raises(InvalidConfig):
        SpectrogramConfig(fft_n=1000)  # not a power of two
    with pytest.raises(InvalidConfig):
        SpectrogramConfig(hop=2048)    # hop > fft_n
    with pytest.raises(InvalidConfig):
        SpectrogramConfig(fft_n=1024, sr=100, segment_seconds=1)


# --- assembly ---

def test_assemble_constant_slices():
    b = LogSpectrogram(np.full((5, 4), -80.0))
    c = LogSpectrogram(np.zeros((5, 4)))
    mi = assemble_input(b, c)
    assert mi.tensor.shape == (5, 4, 2)
    assert np.all(mi.tensor[:, :, 0] == -80.0)
    assert np.all(mi.tensor[:, :, 1] == 0.0)


def test_assemble_symmetry_and_swap():
    rng = np.random.default_rng(9)
    x = LogSpectrogram(rng.uniform(-80, 0, (6, 3)))
    y = LogSpectrogram(rng.uniform(-80, 0, (6, 3)))
    same = assemble_input(x, x)
    np.testing.assert_array_equal(same.tensor[:, :, 0], same.tensor[:, :, 1])
    ab = assemble_input(x, y)
    ba = assemble_input(y, x)
    np.testing.assert_array_equal(ab.tensor[:, :, 0], ba.tensor[:, :, 1])
    np.testing.assert_array_equal(ab.tensor[:, :, 1], ba.tensor[:, :, 0])


def test_assemble_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        assemble_input(LogSpectrogram(np.zeros((4, 4))),
                       LogSpectrogram(np.zeros((4, 5))))


# --- pairing ---

def _tone_clip(seconds, sr, f0):
    t = np.arange(int(seconds * sr)) / sr
    return AudioClip(0.4 * np.sin(2 * np.pi * f0 * t), sr)


def test_pair_cycles_shorter_list():
    cfg = SMALL
    breath = _tone_clip(4, cfg.sr, 500)   # 2 chunks at s=2
    cough = _tone_clip(2, cfg.sr, 1500)   # 1 chunk
    inputs = pair_segments(breath, cough, cfg)
    assert len(inputs) == 2
    np.testing.assert_array_equal(inputs[0].tensor[:, :, 1], inputs[1].tensor[:, :, 1])
    assert not np.array_equal(inputs[0].tensor[:, :, 0], inputs[1].tensor[:, :, 0])


def test_pair_equal_durations_positional():
    cfg = SMALL
    breath = _tone_clip(4, cfg.sr, 500)
    cough = _tone_clip(4, cfg.sr, 1500)
    inputs = pair_segments(breath, cough, cfg)
    assert len(inputs) == 2
    expected_b = [log_spectrogram(s, cfg).values for s in chunk(breath, 2)]
    np.testing.assert_allclose(inputs[1].tensor[:, :, 0], expected_b[1], rtol=1e-6)


def test_pair_breath_repeats_three_times():
    cfg = SMALL
    breath = _tone_clip(2, cfg.sr, 500)
    cough = _tone_clip(6, cfg.sr, 1500)
    inputs = pair_segments(breath, cough, cfg)
    assert len(inputs) == 3
    for i in (1, 2):
        np.testing.assert_array_equal(inputs[0].tensor[:, :, 0],
                                      inputs[i].tensor[:, :, 0])


def test_pair_requires_matching_rate():
    with pytest.raises(ValueError):
        pair_segments(_tone_clip(2, 16000, 500), _tone_clip(2, 8000, 500), SMALL)


# --- export format ---

def test_spectrogram_file_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    spec = LogSpectrogram(
        np.round(rng.uniform(-80, 0, (33, 17)).astype(np.float32), 3).astype(np.float64))
    p = tmp_path / "s.cspc"
    write_spectrogram(p, spec)
    raw = p.read_bytes()
    assert raw[:4] == b"CSPC"
    assert len(raw) == 16 + 33 * 17 * 4
    loaded = read_spectrogram(p)
    np.testing.assert_allclose(loaded.values, spec.values, atol=1e-6)

import numpy as np
import pytest

from cider.audio_io import write_wav
from cider.baseline import (DEFAULT_C_GRID, FEATURES_PER_PAIR, FeatureConfig,
                            extract_features, load_baseline_model, pca_fit,
                            pca_transform, read_feature_cache,
                            save_baseline_model, svm_decision, svm_objective,
                            svm_subgradient, svm_train, tune_complexity,
                            write_feature_cache)
from cider.errors import ShapeMismatch, SingleClass
from cider.folds import RecordingPair

FEAT_CFG = FeatureConfig(sr=8000)


def _pair(tmp_path, breath, cough, sr=8000, tag="x"):
    b = tmp_path / f"{tag}_breath.wav"
    c = tmp_path / f"{tag}_cough.wav"
    write_wav(b, breath, sr)
    write_wav(c, cough, sr)
    return RecordingPair(str(b), str(c))


# --- feature extraction ---

def test_feature_vector_dimension(tmp_path):
    rng = np.random.default_rng(0)
    pair = _pair(tmp_path, rng.uniform(-0.5, 0.5, 16000), rng.uniform(-0.5, 0.5, 8000))
    fv = extract_features(pair, FEAT_CFG)
    assert fv.values.shape == (FEATURES_PER_PAIR,) == (360,)
    assert np.all(np.isfinite(fv.values))


def test_silence_features(tmp_path):
    pair = _pair(tmp_path, np.zeros(8000), np.zeros(8000))
    fv = extract_features(pair, FEAT_CFG)
    floor = np.log(FEAT_CFG.energy_floor)
    # per file, functional block 0 belongs to log energy: mean/std/min/max...
    for offset in (0, 180):
        energy_f = fv.values[offset:offset + 10]
        assert energy_f[0] == pytest.approx(floor)              # mean at the floor
        assert energy_f[1] == pytest.approx(0.0, abs=1e-9)      # std
        zcr_f = fv.values[offset + 10:offset + 20]
        assert zcr_f[0] == 0.0                                  # silent ZCR mean


def test_sine_spectral_centroid(tmp_path):
    sr = 8000
    t = np.arange(4 * sr) / sr
    tone = 0.5 * np.sin(2 * np.pi * 3000.0 * t)
    pair = _pair(tmp_path, tone, tone, sr=sr)
    fv = extract_features(pair, FeatureConfig(sr=sr))
    centroid_mean = fv.values[20]  # descriptor 2, functional 0 of the breath file
    assert abs(centroid_mean - 3000.0) / 3000.0 < 0.02


def test_features_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    pair = _pair(tmp_path, rng.uniform(-0.5, 0.5, 12000), rng.uniform(-0.5, 0.5, 9000))
    a = extract_features(pair, FEAT_CFG).values
    b = extract_features(pair, FEAT_CFG).values
    np.testing.assert_array_equal(a, b)


# --- PCA ---

def test_pca_line_data_concentrates_variance():
    rng = np.random.default_rng(2)
    t = rng.normal(size=200)
    x = np.outer(t, [1.0, -2.0, 0.5]) + 1e-8 * rng.normal(size=(200, 3))
    model = pca_fit(x, k=3)
    ev = model.explained_variance
    assert ev[0] / ev.sum() > 0.999


def test_pca_full_reconstruction():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 6))
    model = pca_fit(x, k=6)
    z = (x - model.mean) / model.scale
    recon = pca_transform(model, x) @ model.components
    np.testing.assert_allclose(recon, z, atol=1e-8)


def test_pca_matches_correlation_eigenvalues():
    # oracle: eigen-decomposition of the sample correlation matrix
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 360)) @ np.diag(rng.uniform(0.5, 3, 360))
    model = pca_fit(x, k=40)
    corr = np.corrcoef(x, rowvar=False)
    eigs = np.sort(np.linalg.eigvalsh(corr))[::-1]
    np.testing.assert_allclose(model.explained_variance, eigs[:40], rtol=1e-8)


def test_pca_orthonormal_components():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(80, 30))
    model = pca_fit(x, k=20)
    gram = model.components @ model.components.T
    assert np.abs(gram - np.eye(20)).max() < 1e-6


def test_pca_rank_deficient_truncates_with_warning():
    rng = np.random.default_rng(6)
    x = np.tile(rng.normal(size=(1, 5)), (10, 1)) + np.outer(rng.normal(size=10),
                                                             np.ones(5) * 1e-3)
    with pytest.warns(UserWarning):
        model = pca_fit(x, k=5)
    assert model.components.shape[0] < 5


def test_pca_transform_contracts():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(30, 8))
    model = pca_fit(x, k=4)
    np.testing.assert_allclose(pca_transform(model, model.mean), np.zeros(4),
                               atol=1e-10)
    batch = pca_transform(model, x[:3])
    assert batch.shape == (3, 4)
    with pytest.raises(ShapeMismatch):
        pca_transform(model, np.zeros(9))


def test_pca_whitened_data_preserves_norm():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(300, 5))
    model = pca_fit(x, k=5)
    z = (x - model.mean) / model.scale
    projected = z @ model.components.T
    np.testing.assert_allclose(np.linalg.norm(projected, axis=1),
                               np.linalg.norm(z, axis=1), rtol=1e-10)


# --- SVM ---

def _grid_oracle(x, y, c, class_weight, half=4.0, rounds=7, points=21):
    """Coarse-to-fine grid minimization of the primal objective."""
    d = x.shape[1]
    center = np.zeros(d + 1)
    width = half
    best = (np.inf, None)
    for _ in range(rounds):
        axes = [np.linspace(center[i] - width, center[i] + width, points)
                for i in range(d + 1)]
        grids = np.meshgrid(*axes, indexing="ij")
        flat = np.stack([g.reshape(-1) for g in grids], axis=1)
        w = flat[:, :d]
        b = flat[:, d]
        margins = 1.0 - y[None, :] * (w @ x.T + b[:, None])
        hinge = np.clip(margins, 0.0, None)
        obj = 0.5 * np.sum(w ** 2, axis=1) + c * hinge @ class_weight
        i = int(np.argmin(obj))
        if obj[i] < best[0]:
            best = (float(obj[i]), flat[i])
        center = flat[i]
        width /= points / 4.0
    return best


def test_svm_symmetric_pair():
    x = np.array([[-1.0], [1.0]])
    y = np.array([-1.0, 1.0])
    model = svm_train(x, y, c=100.0, seed=0)
    scores = svm_decision(model, x)
    assert scores[0] < 0 < scores[1]
    assert abs(model.bias) < 0.1 * abs(model.weights[0])


def test_svm_separable_blobs_train_accuracy():
    rng = np.random.default_rng(9)
    n = 50
    pos = rng.normal(size=(n, 4)) * 0.3 + np.array([2, 0, 0, 0])
    neg = rng.normal(size=(n, 4)) * 0.3 - np.array([2, 0, 0, 0])
    x = np.vstack([pos, neg])
    y = np.array([1.0] * n + [-1.0] * n)
    model = svm_train(x, y, c=1.0, seed=0)
    preds = np.sign(svm_decision(model, x))
    assert np.all(preds == y)


def test_svm_objective_close_to_grid_oracle():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(6, 2))
    y = np.array([1.0, 1.0, 1.0, -1.0, -1.0, -1.0])
    x[y > 0] += 1.0
    cw = np.ones(6)
    for c in (0.1, 1.0):
        model = svm_train(x, y, c=c, seed=0)
        ours = svm_objective(model.weights, model.bias, x, y, c, cw)
        oracle, _ = _grid_oracle(x, y, c, cw)
        assert ours <= oracle * 1.01 + 1e-9


def test_svm_permutation_invariant():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(20, 3))
    y = np.where(x[:, 0] > 0, 1.0, -1.0)
    model_a = svm_train(x, y, c=0.5, seed=4)
    perm = rng.permutation(20)
    model_b = svm_train(x[perm], y[perm], c=0.5, seed=4)
    np.testing.assert_array_equal(model_a.weights, model_b.weights)
    assert model_a.bias == model_b.bias


def test_svm_single_class_rejected():
    with pytest.raises(SingleClass):
        svm_train(np.zeros((3, 2)), np.ones(3), c=1.0)


def test_hinge_subgradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(12, 3))
    y = np.where(rng.uniform(size=12) > 0.5, 1.0, -1.0)
    y[0], y[1] = 1.0, -1.0
    cw = np.where(y > 0, 1.3, 0.8)
    c = 0.7
    w = rng.normal(size=3) * 0.2
    b = 0.1
    # keep every example away from the hinge kink
    margins = 1.0 - y * (x @ w + b)
    assert np.abs(margins).min() > 1e-3
    gw, gb = svm_subgradient(w, b, x, y, c, cw)
    eps = 1e-6
    for j in range(3):
        wp, wm = w.copy(), w.copy()
        wp[j] += eps
        wm[j] -= eps
        fd = (svm_objective(wp, b, x, y, c, cw)
              - svm_objective(wm, b, x, y, c, cw)) / (2 * eps)
        assert fd == pytest.approx(gw[j], rel=1e-4)
    fd_b = (svm_objective(w, b + eps, x, y, c, cw)
            - svm_objective(w, b - eps, x, y, c, cw)) / (2 * eps)
    assert fd_b == pytest.approx(gb, rel=1e-4, abs=1e-8)


# --- tuning ---

def _blob_sets(rng, n, sep):
    x = rng.normal(size=(n, 3))
    y = np.where(rng.uniform(size=n) > 0.5, 1.0, -1.0)
    x[:, 0] += sep * y
    return x, y


def test_tune_smallest_c_on_ties():
    rng = np.random.default_rng(13)
    train_sets, dev_sets = [], []
    for _ in range(3):
        train_sets.append(_blob_sets(rng, 40, 4.0))
        dev_sets.append(_blob_sets(rng, 20, 4.0))
    best_c, dev_auc = tune_complexity(train_sets, dev_sets,
                                      grid=(1e-3, 1e-2), seed=0)
    assert dev_auc == 1.0
    assert best_c == 1e-3  # both perfect: strongest regularization wins


def test_tune_single_point_grid():
    rng = np.random.default_rng(14)
    train_sets = [_blob_sets(rng, 30, 3.0) for _ in range(3)]
    dev_sets = [_blob_sets(rng, 15, 3.0) for _ in range(3)]
    best_c, _ = tune_complexity(train_sets, dev_sets, grid=(0.25,), seed=0)
    assert best_c == 0.25


def test_default_grid():
    assert DEFAULT_C_GRID == (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


# --- model serialization ---

def test_baseline_model_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    x = rng.normal(size=(40, 12))
    y = np.where(x[:, 0] > 0, 1.0, -1.0)
    pca = pca_fit(x, k=5)
    svm = svm_train(pca_transform(pca, x), y, c=0.5, seed=0)
    path = tmp_path / "baseline.ckpt"
    save_baseline_model(path, pca, svm)
    assert path.read_bytes()[:4] == b"CKPT"
    pca2, svm2 = load_baseline_model(path)
    # container payload is f32: expect float32-level agreement
    np.testing.assert_allclose(pca2.components, pca.components, atol=1e-6)
    assert svm2.C == pytest.approx(svm.C, rel=1e-6)
    scores_before = svm_decision(svm, pca_transform(pca, x[:7]))
    scores_after = svm_decision(svm2, pca_transform(pca2, x[:7]))
    np.testing.assert_allclose(scores_after, scores_before, rtol=1e-5, atol=1e-6)


# --- feature cache ---

def test_feature_cache_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    ids = ["p1/0", "p2/0", "p2/1"]
    matrix = rng.normal(size=(3, 360))
    path = tmp_path / "features.feat"
    write_feature_cache(path, ids, matrix)
    raw = path.read_bytes()
    assert raw[:4] == b"FEAT"
    loaded_ids, loaded = read_feature_cache(path)
    assert loaded_ids == ids
    np.testing.assert_array_equal(loaded, matrix)

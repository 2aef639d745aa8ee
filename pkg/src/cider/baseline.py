"""Reference pipeline: functional acoustic features, PCA, linear SVM.

Per recording pair: 18 frame-level descriptors (log energy, zero-crossing
rate, spectral centroid/roll-off/flux, 13 MFCCs) x 10 functionals (mean,
std, min, max, range, skewness, kurtosis, quartiles) per file, breath
concatenated before cough = 360 dimensions. Features are standardized and
projected onto the top-100 principal components; a linear SVM trained in
the primal by averaged stochastic sub-gradient descent supplies the
decision scores. The complexity parameter C is tuned on the rotating
development folds over a logarithmic grid.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .audio_io import read_wav, resample
from .autodiff import load_checkpoint, save_checkpoint
from .errors import ShapeMismatch, SingleClass
from .folds import RecordingPair

FEATURE_MAGIC = b"FEAT"

DEFAULT_C_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)

N_DESCRIPTORS = 18
N_FUNCTIONALS = 10
FEATURES_PER_FILE = N_DESCRIPTORS * N_FUNCTIONALS
FEATURES_PER_PAIR = 2 * FEATURES_PER_FILE

SVM_ITERATIONS = 100_000


@dataclass
class FeatureConfig:
    sr: int = 24000
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 26
    n_mfcc: int = 13
    rolloff: float = 0.85
    energy_floor: float = 1e-10


@dataclass
class FeatureVector:
    values: np.ndarray
    recording_id: str = ""


@dataclass
class PcaModel:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray          # (k, D), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing


@dataclass
class SvmModel:
    weights: np.ndarray
    bias: float
    C: float


# --- frame-level descriptors ---

def _frames(x: np.ndarray, frame_len: int, hop_len: int) -> np.ndarray:
    if len(x) < frame_len:
        x = np.pad(x, (0, frame_len - len(x)))
    n = 1 + (len(x) - frame_len) // hop_len
    idx = np.arange(n)[:, None] * hop_len + np.arange(frame_len)[None, :]
    return x[idx]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _mel_filterbank(n_mels: int, n_fft: int, sr: int) -> np.ndarray:
    """Triangular filters on the mel scale covering 0..sr/2."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sr / 2.0), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sr)
    bank = np.zeros((n_mels, len(bins)))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bins - lo) / max(mid - lo, 1e-12)
        down = (hi - bins) / max(hi - mid, 1e-12)
        bank[i] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def _dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    # orthonormal DCT-II
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    mat = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * math.sqrt(2.0 / n_in)
    mat[0] /= math.sqrt(2.0)
    return mat


def _file_descriptors(samples: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Per-frame descriptor matrix (n_frames, 18)."""
    frame_len = int(round(config.sr * config.frame_ms / 1000.0))
    hop_len = int(round(config.sr * config.hop_ms / 1000.0))
    frames = _frames(samples, frame_len, hop_len)
    n_fft = 1 << (frame_len - 1).bit_length()

    energy = np.log(np.sum(frames ** 2, axis=1) + config.energy_floor)
    signs = np.sign(frames)
    zcr = np.sum(np.abs(np.diff(signs, axis=1)) > 1, axis=1) / (frame_len - 1)

    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len))
    mag = np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / config.sr)
    mag_sum = mag.sum(axis=1)
    safe = np.where(mag_sum > 0, mag_sum, 1.0)
    centroid = (mag @ freqs) / safe
    centroid[mag_sum == 0] = 0.0

    power = mag ** 2
    cum = np.cumsum(power, axis=1)
    total = cum[:, -1]
    threshold = config.rolloff * total
    roll_idx = np.argmax(cum >= threshold[:, None], axis=1)
    rolloff = freqs[roll_idx]
    rolloff[total == 0] = 0.0

    flux = np.zeros(len(frames))
    if len(frames) > 1:
        flux[1:] = np.sqrt(np.sum(np.diff(mag, axis=0) ** 2, axis=1))

    bank = _mel_filterbank(config.n_mels, n_fft, config.sr)
    mel_energy = np.log(power @ bank.T + config.energy_floor)
    mfcc = mel_energy @ _dct_matrix(config.n_mfcc, config.n_mels).T

    return np.column_stack([energy, zcr, centroid, rolloff, flux, mfcc])


def _functionals(columns: np.ndarray) -> np.ndarray:
    """10 summary statistics per descriptor column."""
    mean = columns.mean(axis=0)
    std = columns.std(axis=0)
    mn = columns.min(axis=0)
    mx = columns.max(axis=0)
    centered = columns - mean
    m2 = (centered ** 2).mean(axis=0)
    m3 = (centered ** 3).mean(axis=0)
    m4 = (centered ** 4).mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        skew = np.where(m2 > 0, m3 / np.power(m2, 1.5, where=m2 > 0), 0.0)
        kurt = np.where(m2 > 0, m4 / np.power(m2, 2.0, where=m2 > 0) - 3.0, 0.0)
    q1, q2, q3 = np.percentile(columns, [25, 50, 75], axis=0)
    return np.column_stack([mean, std, mn, mx, mx - mn, skew, kurt, q1, q2, q3])


def extract_features(pair: RecordingPair, config: FeatureConfig,
                     recording_id: str = "") -> FeatureVector:
    """360-dimensional functional feature vector, breath file then cough file."""
    parts = []
    for path in (pair.breath_path, pair.cough_path):
        clip = resample(read_wav(path), config.sr)
        descriptors = _file_descriptors(clip.samples, config)
        parts.append(_functionals(descriptors).reshape(-1))
    values = np.concatenate(parts)
    assert values.shape == (FEATURES_PER_PAIR,)
    return FeatureVector(values=values, recording_id=recording_id)


# --- PCA ---

def pca_fit(matrix: np.ndarray, k: int = 100) -> PcaModel:
    """Standardize columns, then keep the top-k right singular directions.

    explained_variance holds squared singular values / (N-1), i.e. the
    eigenvalues of the sample correlation matrix, in descending order.
    k is truncated to the available rank with a warning rather than failing.
    """
    x = np.asarray(matrix, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    mean = x.mean(axis=0)
    scale = x.std(axis=0, ddof=1)
    scale = np.where(scale > 0, scale, 1.0)
    z = (x - mean) / scale

    _, s, vt = np.linalg.svd(z, full_matrices=False)
    available = int(np.sum(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0
    rank = min(available, n - 1, d)
    if k > rank:
        import warnings
        warnings.warn(f"requested {k} components, rank is {rank}; truncating",
                      stacklevel=2)
        k = rank
    components = vt[:k]
    # deterministic sign: largest-magnitude coordinate of each row positive
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return PcaModel(mean=mean, scale=scale, components=components,
                    explained_variance=(s[:k] ** 2) / (n - 1))


def pca_transform(model: PcaModel, vectors: np.ndarray) -> np.ndarray:
    """Project standardized rows onto the retained components."""
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if x.shape[1] != model.mean.shape[0]:
        raise ShapeMismatch(f"expected {model.mean.shape[0]} dims, got {x.shape[1]}")
    z = (x - model.mean) / model.scale
    out = z @ model.components.T
    return out[0] if np.asarray(vectors).ndim == 1 else out


# --- linear SVM, primal ---

def svm_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray,
                  c: float, class_weight: np.ndarray) -> float:
    margins = 1.0 - y * (x @ w + b)
    hinge = np.clip(margins, 0.0, None)
    return 0.5 * float(w @ w) + c * float(np.sum(class_weight * hinge))


def svm_subgradient(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray,
                    c: float, class_weight: np.ndarray) -> tuple:
    """Full-batch sub-gradient of the primal objective."""
    active = (1.0 - y * (x @ w + b)) > 0
    coeff = c * class_weight * y * active
    gw = w - x.T @ coeff
    gb = -float(np.sum(coeff))
    return gw, gb


def _class_weights_pm1(y: np.ndarray) -> np.ndarray:
    n = len(y)
    n_pos = int(np.sum(y > 0))
    n_neg = n - n_pos
    weights = np.where(y > 0, n / (2.0 * n_pos), n / (2.0 * n_neg))
    return weights


def _canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Content-keyed ordering so training ignores input row permutation."""
    keys = [y] + [x[:, j] for j in range(x.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def svm_train(features: np.ndarray, labels: np.ndarray, c: float,
              seed: int = 0, iterations: int = SVM_ITERATIONS) -> SvmModel:
    """Averaged stochastic sub-gradient descent on the hinge primal.

    Minimizes 0.5*||w||^2 + C * sum_i cw_i * hinge(1 - y_i (w.x_i + b)) with
    per-class weights proportional to inverse class frequency. Deterministic:
    examples are first sorted by content, then visited in seeded shuffled
    epochs for a fixed step budget; the tail-averaged iterate is returned.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if set(np.unique(y)) != {-1.0, 1.0}:
        if set(np.unique(y)) <= {-1.0, 1.0}:
            raise SingleClass("SVM training needs both classes")
        raise ValueError("labels must be +-1")
    order = _canonical_order(x, y)
    x, y = x[order], y[order]
    n, d = x.shape
    cw = _class_weights_pm1(y)

    rng = np.random.default_rng(seed)
    w = np.zeros(d)
    b = 0.0
    w_acc = np.zeros(d)
    b_acc = 0.0
    acc_count = 0
    avg_from = iterations // 2

    t = 0
    while t < iterations:
        perm = rng.permutation(n)
        for i in perm:
            t += 1
            eta = 1.0 / t
            margin = 1.0 - y[i] * (x[i] @ w + b)
            # strong convexity in w gives the 1/t schedule; b follows unregularized
            if margin > 0:
                coeff = c * n * cw[i] * y[i]
                w *= (1.0 - eta)
                w += eta * coeff * x[i]
                b += eta * coeff
            else:
                w *= (1.0 - eta)
            if t > avg_from:
                w_acc += w
                b_acc += b
                acc_count += 1
            if t >= iterations:
                break
    if acc_count == 0:
        return SvmModel(weights=w, bias=b, C=c)
    return SvmModel(weights=w_acc / acc_count, bias=b_acc / acc_count, C=c)


def svm_decision(model: SvmModel, features: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return x @ model.weights + model.bias


def tune_complexity(train_sets: list, dev_sets: list,
                    grid=DEFAULT_C_GRID, seed: int = 0) -> tuple:
    """Pick the C maximizing mean dev AUC over the rotations (smallest on ties).

    train_sets/dev_sets hold one (features, labels_pm1) pair per rotation;
    PCA is fit on each rotation's training features only.
    """
    from .evaluator import auc_roc

    # the projection depends on the rotation only, not on C
    projected = []
    for (xtr, ytr), (xdev, ydev) in zip(train_sets, dev_sets):
        pca = pca_fit(xtr, k=min(100, len(xtr) - 1, xtr.shape[1]))
        projected.append((pca_transform(pca, xtr), ytr,
                          pca_transform(pca, xdev), ydev))

    best_c = None
    best_auc = -1.0
    for c in sorted(grid):
        aucs = []
        for ztr, ytr, zdev, ydev in projected:
            model = svm_train(ztr, ytr, c, seed=seed)
            scores = svm_decision(model, zdev)
            aucs.append(auc_roc(scores, (np.asarray(ydev) > 0).astype(int)))
        mean_auc = float(np.mean(aucs))
        if mean_auc > best_auc:
            best_auc = mean_auc
            best_c = c
    return best_c, best_auc


def save_baseline_model(path, pca: PcaModel, svm: SvmModel) -> None:
    """Persist the PCA + SVM pair in the shared checkpoint container."""
    save_checkpoint(path, {
        "pca.mean": pca.mean,
        "pca.scale": pca.scale,
        "pca.components": pca.components,
        "pca.explained_variance": pca.explained_variance,
        "svm.weights": svm.weights,
        "svm.bias": np.array([svm.bias]),
        "svm.c": np.array([svm.C]),
    })


def load_baseline_model(path) -> tuple:
    arrays = load_checkpoint(path)
    pca = PcaModel(mean=arrays["pca.mean"].astype(np.float64),
                   scale=arrays["pca.scale"].astype(np.float64),
                   components=arrays["pca.components"].astype(np.float64),
                   explained_variance=arrays["pca.explained_variance"].astype(np.float64))
    svm = SvmModel(weights=arrays["svm.weights"].astype(np.float64),
                   bias=float(arrays["svm.bias"][0]),
                   C=float(arrays["svm.c"][0]))
    return pca, svm


# --- feature cache file ---

def write_feature_cache(path, ids: list, matrix: np.ndarray) -> None:
    """FEAT container: header, row-major float64 matrix, then the id table."""
    x = np.asarray(matrix, dtype="<f8")
    n, d = x.shape
    if len(ids) != n:
        raise ShapeMismatch("one id per row required")
    with open(str(path), "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", n, d))
        f.write(x.tobytes())
        for rid in ids:
            encoded = rid.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)


def read_feature_cache(path) -> tuple:
    with open(str(path), "rb") as f:
        data = f.read()
    if data[:4] != FEATURE_MAGIC:
        raise ValueError("not a feature cache file")
    n, d = struct.unpack_from("<II", data, 4)
    pos = 12
    matrix = np.frombuffer(data, dtype="<f8", count=n * d, offset=pos).reshape(n, d)
    pos += 8 * n * d
    ids = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ids.append(data[pos:pos + length].decode("utf-8"))
        pos += length
    return ids, matrix.copy()

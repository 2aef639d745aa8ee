"""Experiment orchestration: the rotation/run protocol over fold splits.

For a task: select the cohort, chunk every recording pair once (shared
cache across fits), then for each of three runs train one model per
rotation (dev fold in {0, 1, 2}, test fixed at fold 3), selecting the
epoch by dev AUC. A run's test metric is the mean over its three rotation
models; the task report aggregates the three run values.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import baseline, evaluator, trainer
from .audio_io import read_wav, resample
from .dsp import LabeledPairInputs, SpectrogramConfig, pair_segments
from .folds import FoldAssignment, rotations, select_task
from .model import CiderConfig, save_model
from .trainer import TrainConfig, replace


def load_examples(participants: list, labels: dict,
                  config: SpectrogramConfig) -> dict:
    """Decode, resample, chunk, and pair every recording of every participant.

    Returns participant id -> list of LabeledPairInputs (one per recording
    pair). The cache is shared by every fit of a task, so spectrograms are
    computed exactly once.
    """
    cache: dict[str, list] = {}
    for p in participants:
        examples = []
        for pair in p.recordings:
            breath = resample(read_wav(pair.breath_path), config.sr)
            cough = resample(read_wav(pair.cough_path), config.sr)
            inputs = pair_segments(breath, cough, config)
            examples.append(LabeledPairInputs(p.id, int(labels[p.id]), inputs))
        cache[p.id] = examples
    return cache


def _fold_examples(cache: dict, assignment: FoldAssignment, folds) -> list:
    wanted = set(folds) if not isinstance(folds, int) else {folds}
    out = []
    for pid in sorted(cache):
        if assignment.fold_of.get(pid) in wanted:
            out.extend(cache[pid])
    return out


def derive_seed(base_seed: int, run: int, rotation: int) -> int:
    """Distinct deterministic seed per (run, rotation) fit."""
    return base_seed * 1000 + run * 10 + rotation


@dataclass
class FitRecord:
    run: int
    rotation: int
    seed: int
    best_epoch: int
    dev_auc_by_epoch: list
    evaluation: evaluator.RunEvaluation
    checkpoint_path: str | None = None


@dataclass
class TaskProtocolResult:
    report: evaluator.MetricsReport
    fits: list = field(default_factory=list)
    test_records: list = field(default_factory=list)   # from the first fit


def run_task_protocol(participants: list, assignment: FoldAssignment, task: int,
                      model_config: CiderConfig, train_config: TrainConfig,
                      spec_config: SpectrogramConfig, n_runs: int = 3,
                      out_dir=None) -> TaskProtocolResult:
    """Full protocol for one task; optionally persists checkpoints and logs."""
    cohort, labels = select_task(participants, task)
    cache = load_examples(cohort, labels, spec_config)
    splits = rotations(assignment)
    test_examples = _fold_examples(cache, assignment, assignment.test_fold)
    n_train_dev = sum(len(v) for v in cache.values()) - len(test_examples)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    fits = []
    run_values = []
    for run in range(1, n_runs + 1):
        rot_aucs, rot_uars, rot_detail = [], [], []
        for split in splits:
            seed = derive_seed(train_config.seed, run, split.dev_fold)
            train_ex = _fold_examples(cache, assignment, split.train_folds)
            dev_ex = _fold_examples(cache, assignment, split.dev_fold)
            log_path = None
            ckpt_path = None
            if out_dir is not None:
                stem = f"task{task}_run{run}_rot{split.dev_fold}"
                log_path = os.path.join(out_dir, stem + ".log.csv")
                ckpt_path = os.path.join(out_dir, stem + ".ckpt")
            result = trainer.fit(train_ex, dev_ex, model_config,
                                 replace(train_config, seed=seed), log_path)
            ev = evaluator.evaluate_examples(result.final_params, test_examples)
            if ckpt_path is not None:
                save_model(ckpt_path, result.final_params, extra={
                    "task": task, "run": run, "rotation": split.dev_fold,
                    "train_folds": list(split.train_folds),
                    "dev_fold": split.dev_fold,
                    "best_epoch": result.best_epoch,
                    "spectrogram": {
                        "fft_n": spec_config.fft_n, "hop": spec_config.hop,
                        "sr": spec_config.sr,
                        "segment_seconds": spec_config.segment_seconds,
                        "amin": spec_config.amin, "top_db": spec_config.top_db,
                    },
                })
            fits.append(FitRecord(run=run, rotation=split.dev_fold, seed=seed,
                                  best_epoch=result.best_epoch,
                                  dev_auc_by_epoch=result.dev_auc_by_epoch,
                                  evaluation=ev, checkpoint_path=ckpt_path))
            rot_aucs.append(ev.auc)
            rot_uars.append(ev.uar)
            rot_detail.append({"rotation": split.dev_fold, "seed": seed,
                               "best_epoch": result.best_epoch,
                               "auc": ev.auc, "uar": ev.uar})
        run_values.append({"run": run,
                           "auc": float(np.mean(rot_aucs)),
                           "uar": float(np.mean(rot_uars)),
                           "rotations": rot_detail})

    report = evaluator.build_report(task, "cider", run_values,
                                    fits[0].evaluation, n_train_dev)
    return TaskProtocolResult(report=report, fits=fits,
                              test_records=fits[0].evaluation.records)


@dataclass
class BaselineTaskResult:
    report: evaluator.MetricsReport
    best_c: float
    dev_auc: float


def _baseline_features(participants: list, labels: dict,
                       feature_config: "baseline.FeatureConfig",
                       cache_path=None) -> tuple:
    """Feature matrix for a cohort, one row per recording pair.

    Rows are keyed "participant_id/pair_index"; an existing cache file with
    matching keys is reused instead of re-extracting.
    """
    ids = []
    for p in sorted(participants, key=lambda p: p.id):
        for idx in range(len(p.recordings)):
            ids.append(f"{p.id}/{idx}")
    if cache_path is not None and os.path.exists(cache_path):
        cached_ids, matrix = baseline.read_feature_cache(cache_path)
        if cached_ids == ids:
            return ids, matrix
    rows = []
    for p in sorted(participants, key=lambda p: p.id):
        for idx, pair in enumerate(p.recordings):
            rows.append(baseline.extract_features(
                pair, feature_config, f"{p.id}/{idx}").values)
    matrix = np.vstack(rows)
    if cache_path is not None:
        baseline.write_feature_cache(cache_path, ids, matrix)
    return ids, matrix


def run_baseline_protocol(participants: list, assignment: FoldAssignment, task: int,
                          feature_config: "baseline.FeatureConfig",
                          grid=baseline.DEFAULT_C_GRID, seed: int = 0,
                          cache_path=None, out_dir=None) -> BaselineTaskResult:
    """SVM+PCA reference: tune C on the rotating dev folds, then evaluate
    one model per rotation on the fixed test fold.

    The baseline is deterministic, so its three report values come from the
    three rotations rather than repeated runs. With out_dir set, each
    rotation's PCA+SVM pair is saved in the checkpoint container format.
    """
    cohort, labels = select_task(participants, task)
    ids, matrix = _baseline_features(cohort, labels, feature_config, cache_path)
    y_pm1 = np.array([1.0 if labels[rid.split("/")[0]] == 1 else -1.0 for rid in ids])
    fold_of_row = np.array([assignment.fold_of[rid.split("/")[0]] for rid in ids])

    splits = rotations(assignment)
    train_sets, dev_sets = [], []
    for split in splits:
        tr = np.isin(fold_of_row, split.train_folds)
        dv = fold_of_row == split.dev_fold
        train_sets.append((matrix[tr], y_pm1[tr]))
        dev_sets.append((matrix[dv], y_pm1[dv]))
    best_c, dev_auc = baseline.tune_complexity(train_sets, dev_sets, grid, seed)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    test_mask = fold_of_row == assignment.test_fold
    x_test = matrix[test_mask]
    y_test = (y_pm1[test_mask] > 0).astype(int)
    run_values = []
    first_eval = None
    for split, (xtr, ytr) in zip(splits, train_sets):
        pca = baseline.pca_fit(xtr, k=min(100, len(xtr) - 1, xtr.shape[1]))
        model = baseline.svm_train(baseline.pca_transform(pca, xtr), ytr,
                                   best_c, seed=seed)
        if out_dir is not None:
            baseline.save_baseline_model(
                os.path.join(out_dir, f"task{task}_baseline_rot{split.dev_fold}.ckpt"),
                pca, model)
        scores = baseline.svm_decision(model, baseline.pca_transform(pca, x_test))
        votes = (scores >= 0).astype(int)
        ev = evaluator.RunEvaluation(
            auc=evaluator.auc_roc(scores, y_test),
            uar=evaluator.uar(votes, y_test),
            n_pos=int(y_test.sum()), n_neg=int(len(y_test) - y_test.sum()))
        if first_eval is None:
            first_eval = ev
        run_values.append({"run": split.dev_fold + 1, "auc": ev.auc, "uar": ev.uar,
                           "rotations": [{"rotation": split.dev_fold,
                                          "auc": ev.auc, "uar": ev.uar}]})
    report = evaluator.build_report(task, "svm-pca", run_values, first_eval,
                                    n_train_dev_pairs=int(len(ids) - test_mask.sum()))
    return BaselineTaskResult(report=report, best_c=best_c, dev_auc=dev_auc)

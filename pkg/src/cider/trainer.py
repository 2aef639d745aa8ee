"""Adam training loop with uniform chunk sampling and dev-epoch selection.

Each epoch shuffles participants, samples one chunk per recording pair,
minimizes a class-weighted BCE (auto weights w_pos = N/(2 N_pos),
w_neg = N/(2 N_neg) computed on the training split), and evaluates the
development fold with the majority-vote protocol. The returned parameters
are rolled back to the epoch with the best dev AUC (earliest on ties).

The loop only ever sees train/dev examples; test-fold evaluation lives
with the caller.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluator
from . import model as cider_model
from .autodiff import Tensor, backward, sigmoid, weighted_bce
from .errors import EmptyList, NoNegatives, NoPositives, TooFewRuns

__all__ = ["TrainConfig", "RunResult", "AdamState", "adam_step", "sample_chunk",
           "fit", "aggregate_runs", "replace"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 50
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    class_weights: object = "auto"   # "auto" or (w_pos, w_neg)


@dataclass
class RunResult:
    best_epoch: int                  # 1-based index into dev_auc_by_epoch
    dev_auc_by_epoch: list
    final_params: object
    seed: int


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, t: int,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place; t counts from 1."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params[name] -= (config.learning_rate * m_hat
                         / (np.sqrt(v_hat) + config.adam_eps)).astype(params[name].dtype)


def sample_chunk(inputs: list, rng: np.random.Generator):
    """Uniform draw of one chunked model input."""
    if not inputs:
        raise EmptyList("no chunks to sample from")
    return inputs[int(rng.integers(len(inputs)))]


def auto_class_weights(labels) -> tuple:
    """w_pos = N/(2 N_pos), w_neg = N/(2 N_neg): balanced batches keep loss scale 1."""
    labels = np.asarray(labels)
    n = len(labels)
    n_pos = int((labels == 1).sum())
    n_neg = n - n_pos
    if n_pos == 0:
        raise NoPositives("training split has no positive pairs")
    if n_neg == 0:
        raise NoNegatives("training split has no negative pairs")
    return n / (2.0 * n_pos), n / (2.0 * n_neg)


def _dev_auc(params, dev_examples) -> float:
    chunk_logits = evaluator.score_examples(params, dev_examples)
    scores = [evaluator.majority_vote(lg)[1] for lg in chunk_logits]
    labels = [ex.label for ex in dev_examples]
    return evaluator.auc_roc(scores, labels)


def fit(train_examples: list, dev_examples: list,
        model_config: "cider_model.CiderConfig", train_config: TrainConfig,
        log_path=None) -> RunResult:
    """Train with checkpoint rollback to the best dev-AUC epoch."""
    if not train_examples:
        raise EmptyList("empty training split")
    if train_config.max_epochs < 1:
        raise ValueError("max_epochs must be >= 1")
    if train_config.class_weights == "auto":
        w_pos, w_neg = auto_class_weights([ex.label for ex in train_examples])
    else:
        w_pos, w_neg = train_config.class_weights

    rng = np.random.default_rng(train_config.seed)
    params = cider_model.build(model_config, train_config.seed)
    state = AdamState()
    step = 0

    # participant-level shuffle: a participant's pairs stay adjacent
    by_participant: dict[str, list] = {}
    for ex in train_examples:
        by_participant.setdefault(ex.participant_id, []).append(ex)
    participant_ids = sorted(by_participant)

    dev_auc_by_epoch = []
    best_auc = -1.0
    best_epoch = 0
    best_params = None
    log_lines = ["epoch,train_loss,dev_auc"]

    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(len(participant_ids))
        epoch_examples = [ex for i in order for ex in by_participant[participant_ids[i]]]
        losses = []
        for start in range(0, len(epoch_examples), train_config.batch_size):
            batch = epoch_examples[start:start + train_config.batch_size]
            chosen = [sample_chunk(ex.inputs, rng) for ex in batch]
            x = np.stack([mi.to_nchw() for mi in chosen]).astype(np.float32)
            y = np.array([ex.label for ex in batch], dtype=np.float32)

            params.zero_grad()
            logits = cider_model.forward(params, Tensor(x), "train")
            loss = weighted_bce(sigmoid(logits), y, w_pos, w_neg)
            backward(loss)
            grads = {name: t.grad for name, t in params.tensors.items()
                     if t.grad is not None}
            data = {name: params.tensors[name].data for name in grads}
            step += 1
            adam_step(data, grads, state, step, train_config)
            losses.append(float(loss.data))

        dev_auc = _dev_auc(params, dev_examples)
        dev_auc_by_epoch.append(dev_auc)
        log_lines.append(f"{epoch},{np.mean(losses):.6f},{dev_auc:.6f}")
        if dev_auc > best_auc:
            best_auc = dev_auc
            best_epoch = epoch
            best_params = params.copy()

    if log_path is not None:
        with open(str(log_path), "w") as f:
            f.write("\n".join(log_lines) + "\n")

    return RunResult(best_epoch=best_epoch, dev_auc_by_epoch=dev_auc_by_epoch,
                     final_params=best_params, seed=train_config.seed)


def aggregate_runs(values: list) -> tuple:
    """Mean and sample standard deviation (n-1) over per-run metric values."""
    if len(values) < 2:
        raise TooFewRuns("need at least 2 runs to aggregate")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))

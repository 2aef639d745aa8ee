"""Majority-vote inference and the evaluation metric/statistics stack.

Recording-level scores are the sigmoid of the mean chunk logit; vote labels
are the modal per-chunk classification, with ties resolved by that same
mean-logit score. AUC-ROC is the exact Mann-Whitney statistic (ties count
half), UAR the mean per-class recall. Confidence intervals follow the
closed-form AUC standard error of Hanley & McNeil and the normal
approximation for UAR. Model comparisons use a pooled two-sample t-test
whose p-value is evaluated through the regularized incomplete beta
(continued-fraction expansion, tolerance 1e-8).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as cider_model
from .errors import EmptyChunks, InvalidCounts, SingleClass

# two-sided z quantiles for the supported confidence levels
_Z_BY_LEVEL = {0.90: 1.6449, 0.95: 1.96, 0.99: 2.5758}


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0,
                    1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                    np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))


@dataclass
class PredictionRecord:
    participant_id: str
    chunk_logits: list
    vote_label: int
    score: float
    true_label: int
    pair_index: int = 0


def majority_vote(chunk_logits, threshold: float = 0.5) -> tuple:
    """Modal per-chunk classification; ties fall back to sigmoid(mean logit).

    Returns (label, score) where score is always sigmoid(mean logit) so a
    continuous value is available for ROC analysis.
    """
    logits = np.asarray(chunk_logits, dtype=np.float64)
    if logits.size == 0:
        raise EmptyChunks("majority vote needs at least one chunk")
    probs = _sigmoid(logits)
    votes_pos = int(np.sum(probs >= threshold))
    votes_neg = logits.size - votes_pos
    score = float(_sigmoid(logits.mean()))
    if votes_pos > votes_neg:
        label = 1
    elif votes_pos < votes_neg:
        label = 0
    else:
        label = 1 if score >= threshold else 0
    return label, score


def auc_roc(scores, labels) -> float:
    """Exact pairwise AUC via average ranks: P(s+ > s-) + 0.5 P(s+ == s-)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes present")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = ranks[np.asarray(labels) == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def uar(pred_labels, true_labels) -> float:
    """Unweighted average recall: mean of per-class recalls."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    recalls = []
    for cls in (0, 1):
        mask = true == cls
        if not mask.any():
            raise SingleClass(f"class {cls} absent from true labels")
        recalls.append(float(np.mean(pred[mask] == cls)))
    return 0.5 * sum(recalls)


def _z_quantile(level: float) -> float:
    try:
        return _Z_BY_LEVEL[round(level, 2)]
    except KeyError:
        raise ValueError(f"unsupported confidence level {level}; "
                         f"use one of {sorted(_Z_BY_LEVEL)}") from None


def auc_ci_hanley_mcneil(auc: float, n_pos: int, n_neg: int,
                         level: float = 0.95) -> tuple:
    """Closed-form AUC confidence interval from class counts."""
    if n_pos < 1 or n_neg < 1:
        raise InvalidCounts("need at least one sample per class")
    a = float(auc)
    q1 = a / (2.0 - a)
    q2 = 2.0 * a * a / (1.0 + a)
    se = math.sqrt((a * (1.0 - a) + (n_pos - 1) * (q1 - a * a)
                    + (n_neg - 1) * (q2 - a * a)) / (n_pos * n_neg))
    z = _z_quantile(level)
    return (max(0.0, a - z * se), min(1.0, a + z * se))


def uar_ci_normal(uar_value: float, n: int, level: float = 0.95) -> tuple:
    """Normal-approximation interval: uar +- z * sqrt(uar(1-uar)/n)."""
    if n < 1:
        raise InvalidCounts("n must be >= 1")
    u = float(uar_value)
    half = _z_quantile(level) * math.sqrt(max(u * (1.0 - u), 0.0) / n)
    return (max(0.0, u - half), min(1.0, u + half))


# --- Student t survival function via the regularized incomplete beta ---

_BETA_TOL = 1e-8


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz continued fraction for the incomplete beta
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_TOL:
            return h
    return h


def _betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student t with df degrees of freedom."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return _betainc(df / 2.0, 0.5, x)


def two_sample_ttest(a, b, alpha: float = 0.05) -> tuple:
    """Pooled-variance two-sided t-test for a difference in sample means.

    Degenerate inputs: equal constant samples report (0, 1); distinct
    constant samples report (inf with the sign of the difference, 0).
    Returns (t, p, significant).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise InvalidCounts("each sample needs at least 2 values")
    mean_diff = a.mean() - b.mean()
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if pooled == 0.0:
        if mean_diff == 0.0:
            return 0.0, 1.0, False
        t = math.copysign(math.inf, mean_diff)
        return t, 0.0, True
    t = mean_diff / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    p = t_sf_two_sided(t, na + nb - 2)
    return float(t), float(p), bool(p < alpha)


# --- recording-level evaluation ---

@dataclass
class RunEvaluation:
    """Test-fold evaluation of one trained parameter set."""

    auc: float
    uar: float
    n_pos: int
    n_neg: int
    records: list = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return self.n_pos + self.n_neg


def score_examples(params, examples, batch_size: int = 64) -> list:
    """Eval-mode chunk logits for every example, batched across recordings.

    Returns one list of chunk logits per example, in input order.
    """
    flat = [(i, mi) for i, ex in enumerate(examples) for mi in ex.inputs]
    logits = np.empty(len(flat), dtype=np.float64)
    for start in range(0, len(flat), batch_size):
        batch = flat[start:start + batch_size]
        x = np.stack([mi.to_nchw() for _, mi in batch]).astype(np.float32)
        out = cider_model.forward(params, ad.Tensor(x), "eval")
        logits[start:start + len(batch)] = out.data
    per_example = [[] for _ in examples]
    for (i, _), logit in zip(flat, logits):
        per_example[i].append(float(logit))
    return per_example


def evaluate_examples(params, examples, batch_size: int = 64) -> RunEvaluation:
    """Majority-vote test evaluation over pre-chunked recording pairs."""
    chunk_logits = score_examples(params, examples, batch_size)
    records = []
    pair_counter = {}
    for ex, logits in zip(examples, chunk_logits):
        label, score = majority_vote(logits)
        idx = pair_counter.get(ex.participant_id, 0)
        pair_counter[ex.participant_id] = idx + 1
        records.append(PredictionRecord(
            participant_id=ex.participant_id, chunk_logits=logits,
            vote_label=label, score=score, true_label=int(ex.label),
            pair_index=idx))
    scores = [r.score for r in records]
    votes = [r.vote_label for r in records]
    truths = [r.true_label for r in records]
    return RunEvaluation(
        auc=auc_roc(scores, truths),
        uar=uar(votes, truths),
        n_pos=int(sum(truths)),
        n_neg=int(len(truths) - sum(truths)),
        records=records)


# --- aggregated per-task report ---

@dataclass
class MetricsReport:
    task: int
    model: str
    auc: float
    auc_std: float
    auc_ci: tuple
    uar: float
    uar_std: float
    uar_ci: tuple
    n_test_pairs: int
    n_test_files: int
    n_train_dev_pairs: int
    n_train_dev_files: int
    n_pos: int
    n_neg: int
    runs: list = field(default_factory=list)   # per-run dicts with rotation detail
    t_test: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "task": self.task,
            "model": self.model,
            "auc": self.auc,
            "auc_std": self.auc_std,
            "auc_ci": list(self.auc_ci),
            "uar": self.uar,
            "uar_std": self.uar_std,
            "uar_ci": list(self.uar_ci),
            "n_test_pairs": self.n_test_pairs,
            "n_test_files": self.n_test_files,
            "n_train_dev_pairs": self.n_train_dev_pairs,
            "n_train_dev_files": self.n_train_dev_files,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "runs": self.runs,
        }
        if self.t_test is not None:
            d["t_test"] = self.t_test
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(task=d["task"], model=d["model"], auc=d["auc"],
                   auc_std=d["auc_std"], auc_ci=tuple(d["auc_ci"]), uar=d["uar"],
                   uar_std=d["uar_std"], uar_ci=tuple(d["uar_ci"]),
                   n_test_pairs=d["n_test_pairs"], n_test_files=d["n_test_files"],
                   n_train_dev_pairs=d["n_train_dev_pairs"],
                   n_train_dev_files=d["n_train_dev_files"],
                   n_pos=d["n_pos"], n_neg=d["n_neg"], runs=d.get("runs", []),
                   t_test=d.get("t_test"))


def build_report(task: int, model_name: str, run_values: list,
                 first_eval: RunEvaluation, n_train_dev_pairs: int) -> MetricsReport:
    """Aggregate per-run (auc, uar, detail) triples into a task report.

    Mean/std use the sample standard deviation over runs; the CIs are
    computed at the mean point estimate with the fixed test-fold counts.
    """
    aucs = np.array([rv["auc"] for rv in run_values], dtype=np.float64)
    uars = np.array([rv["uar"] for rv in run_values], dtype=np.float64)
    ddof = 1 if len(aucs) > 1 else 0
    mean_auc = float(aucs.mean())
    mean_uar = float(uars.mean())
    n_pairs = first_eval.n_pairs
    return MetricsReport(
        task=task, model=model_name,
        auc=mean_auc, auc_std=float(aucs.std(ddof=ddof)),
        auc_ci=auc_ci_hanley_mcneil(mean_auc, first_eval.n_pos, first_eval.n_neg),
        uar=mean_uar, uar_std=float(uars.std(ddof=ddof)),
        uar_ci=uar_ci_normal(mean_uar, n_pairs),
        n_test_pairs=n_pairs, n_test_files=2 * n_pairs,
        n_train_dev_pairs=n_train_dev_pairs,
        n_train_dev_files=2 * n_train_dev_pairs,
        n_pos=first_eval.n_pos, n_neg=first_eval.n_neg,
        runs=run_values)


def write_scores_csv(path, records: list) -> None:
    """Per-recording scores for external plotting."""
    with open(str(path), "w") as f:
        f.write("participant_id,pair_index,score,vote_label,true_label,n_chunks\n")
        for r in records:
            f.write(f"{r.participant_id},{r.pair_index},{r.score:.10f},"
                    f"{r.vote_label},{r.true_label},{len(r.chunk_logits)}\n")

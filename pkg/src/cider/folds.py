"""Participant manifest, stratified fold assignment, and task cohorts.

Participants carry one of five strata. Fold assignment deals each stratum's
participants (seeded shuffle, round-robin) into four folds: folds 0-2
rotate between training and development, fold 3 is the permanently held-out
test fold. Recording pairs always travel with their participant, so no
split can leak a participant across folds.
"""

import csv
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (DuplicateRow, EmptyDataset, LabelStratumConflict,
                     MissingFile, UnknownStratum, UnknownTask)

STRATA = (
    "healthy-no-symptoms",
    "healthy-with-cough",
    "asthma-with-cough",
    "COVID-no-cough",
    "COVID-cough",
)
POSITIVE_STRATA = ("COVID-no-cough", "COVID-cough")
LABELS = ("positive", "negative")

N_FOLDS = 4
TEST_FOLD = 3

MANIFEST_HEADER = ["participant_id", "breath_path", "cough_path", "label", "stratum"]


@dataclass
class RecordingPair:
    breath_path: str
    cough_path: str


@dataclass
class Participant:
    id: str
    covid_label: str            # "positive" | "negative"
    stratum: str
    recordings: list = field(default_factory=list)

    @property
    def is_positive(self) -> bool:
        return self.covid_label == "positive"


def _validate_row(row: dict, line_no: int):
    if row["stratum"] not in STRATA:
        raise UnknownStratum(f"line {line_no}: stratum {row['stratum']!r}")
    if row["label"] not in LABELS:
        raise LabelStratumConflict(
            f"line {line_no}: label must be positive|negative, got {row['label']!r}")
    positive_stratum = row["stratum"] in POSITIVE_STRATA
    if positive_stratum != (row["label"] == "positive"):
        raise LabelStratumConflict(
            f"line {line_no}: label {row['label']!r} inconsistent with "
            f"stratum {row['stratum']!r}")


def load_manifest(path) -> list:
    """Parse the manifest CSV and group rows into Participants.

    Columns: participant_id, breath_path, cough_path, label, stratum.
    Relative audio paths are resolved against the manifest's directory.
    Both referenced files must exist at load time.
    """
    path = str(path)
    base = os.path.dirname(os.path.abspath(path))
    participants: dict[str, Participant] = {}
    seen_rows = set()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_HEADER:
            raise LabelStratumConflict(
                f"manifest header must be {','.join(MANIFEST_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            key = tuple(row[c] for c in MANIFEST_HEADER)
            if key in seen_rows:
                raise DuplicateRow(f"line {line_no}: duplicate of an earlier row")
            seen_rows.add(key)
            _validate_row(row, line_no)
            paths = []
            for col in ("breath_path", "cough_path"):
                p = row[col]
                if not os.path.isabs(p):
                    p = os.path.join(base, p)
                if not os.path.isfile(p):
                    raise MissingFile(f"line {line_no}: {row[col]} not found")
                paths.append(p)
            pid = row["participant_id"]
            existing = participants.get(pid)
            if existing is None:
                participants[pid] = Participant(
                    id=pid, covid_label=row["label"], stratum=row["stratum"],
                    recordings=[RecordingPair(*paths)])
            else:
                if (existing.covid_label != row["label"]
                        or existing.stratum != row["stratum"]):
                    raise LabelStratumConflict(
                        f"line {line_no}: participant {pid} has conflicting "
                        f"label/stratum across rows")
                existing.recordings.append(RecordingPair(*paths))
    return list(participants.values())


@dataclass
class FoldAssignment:
    fold_of: dict               # participant id -> fold index 0..3
    seed: int
    test_fold: int = TEST_FOLD
    stratum_tallies: dict = field(default_factory=dict)  # stratum -> [n0..n3]

    def fold_ids(self, fold: int) -> list:
        return [pid for pid, k in self.fold_of.items() if k == fold]

    def to_json(self) -> str:
        doc = {"seed": self.seed, "test_fold": self.test_fold,
               "fold_of": self.fold_of, "stratum_tallies": self.stratum_tallies}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldAssignment":
        doc = json.loads(text)
        return cls(fold_of=doc["fold_of"], seed=int(doc["seed"]),
                   test_fold=int(doc["test_fold"]),
                   stratum_tallies=doc.get("stratum_tallies", {}))


def make_folds(participants: list, seed: int) -> FoldAssignment:
    """Seeded shuffle within each stratum, then round-robin deal into 4 folds.

    Round-robin guarantees per-stratum fold sizes differ by at most one.
    """
    if not participants:
        raise EmptyDataset("no participants to assign")
    fold_of = {}
    tallies = {}
    rng = np.random.default_rng(seed)
    by_stratum: dict[str, list] = {s: [] for s in STRATA}
    for p in participants:
        by_stratum[p.stratum].append(p.id)
    for stratum in STRATA:
        ids = sorted(by_stratum[stratum])  # content order, independent of input order
        if not ids:
            continue
        if len(ids) < N_FOLDS:
            warnings.warn(f"stratum {stratum!r} has only {len(ids)} participants; "
                          f"some folds will not contain it", stacklevel=2)
        order = rng.permutation(len(ids))
        counts = [0] * N_FOLDS
        for slot, idx in enumerate(order):
            fold = slot % N_FOLDS
            fold_of[ids[idx]] = fold
            counts[fold] += 1
        tallies[stratum] = counts
    return FoldAssignment(fold_of=fold_of, seed=seed, stratum_tallies=tallies)


@dataclass
class Split:
    dev_fold: int
    train_folds: tuple
    test_fold: int = TEST_FOLD


def rotations(assignment: FoldAssignment) -> list:
    """The three 2/1/1 splits: dev rotates over folds 0-2, test stays fold 3."""
    non_test = [k for k in range(N_FOLDS) if k != assignment.test_fold]
    return [Split(dev_fold=d,
                  train_folds=tuple(k for k in non_test if k != d),
                  test_fold=assignment.test_fold)
            for d in non_test]


_TASK_COHORTS = {
    1: (("COVID-no-cough", "COVID-cough"), ("healthy-no-symptoms",)),
    2: (("COVID-cough",), ("healthy-with-cough",)),
    3: (("COVID-cough",), ("asthma-with-cough",)),
    4: (("COVID-no-cough", "COVID-cough"),
        ("healthy-no-symptoms", "healthy-with-cough", "asthma-with-cough")),
}


def select_task(participants: list, task: int) -> tuple:
    """Filter the cohort for one of the four tasks.

    Returns (cohort, labels) where labels maps participant id to 1 for the
    COVID side of the comparison and 0 for the control side.
    """
    if task not in _TASK_COHORTS:
        raise UnknownTask(f"task must be 1..4, got {task}")
    pos_strata, neg_strata = _TASK_COHORTS[task]
    cohort = [p for p in participants if p.stratum in pos_strata + neg_strata]
    labels = {p.id: 1 if p.stratum in pos_strata else 0 for p in cohort}
    return cohort, labels


def stratum_counts(participants: list) -> dict:
    counts = {s: 0 for s in STRATA}
    for p in participants:
        counts[p.stratum] += 1
    return counts

"""Challenge scores: per-subject accuracy / PCC and the 2:1 weighted set score.

Prediction dumps are CSV lines ``subject_id,task,value_true,value_pred``.
For ``mm`` rows both values are labels; for ``reg`` rows ``value_pred`` is
the segment PCC and ``value_true`` is left empty.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .downstream import pcc
from .eegio import DatasetManifest

WEIGHT_SET1 = Fraction(2, 3)
WEIGHT_SET2 = Fraction(1, 3)


@dataclass(frozen=True)
class PredictionRecord:
    subject_id: str
    task: str
    value_true: float | None
    value_pred: float
    y: np.ndarray | None = field(default=None, compare=False, repr=False)
    y_hat: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.task == "mm":
            if self.value_true not in (0, 1) or self.value_pred not in (0, 1):
                raise ValueError(f"match-mismatch labels must be 0/1: {self}")
        elif self.task == "reg":
            if not -1.0 <= self.value_pred <= 1.0:
                raise ValueError(f"segment PCC outside [-1, 1]: {self}")
        else:
            raise ValueError(f"unknown task {self.task!r}")

    @classmethod
    def from_envelopes(cls, subject_id: str, y, y_hat) -> "PredictionRecord":
        y, y_hat = np.asarray(y, float), np.asarray(y_hat, float)
        return cls(subject_id, "reg", None, pcc(y, y_hat), y, y_hat)


def _mean(values: Sequence[float]) -> Fraction:
    return sum((Fraction(v) for v in values), Fraction(0)) / len(values)


def subject_accuracy(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise ValueError("accuracy of an empty record set is undefined")
    correct = sum(int(r.value_pred) == int(r.value_true) for r in records)
    return correct / len(records)


def per_subject_pcc(records: Sequence[PredictionRecord], pooled: bool = False) -> float:
    """Mean of segment PCCs, or with ``pooled`` the PCC of the concatenated
    raw envelopes (requires records built by ``from_envelopes``)."""
    if not records:
        raise ValueError("PCC of an empty record set is undefined")
    if pooled:
        if any(r.y is None for r in records):
            raise ValueError("pooled PCC needs raw envelopes on every record")
        return pcc(np.concatenate([r.y for r in records]), np.concatenate([r.y_hat for r in records]))
    return float(_mean([r.value_pred for r in records]))


@dataclass
class ScoreReport:
    metric: str
    rows: list[tuple[str, str, int, float]]
    set1: float
    set2: float
    final: float

    @property
    def score_name(self) -> str:
        return "A_score" if self.metric == "accuracy" else "P_score"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "set", "n_segments", self.metric])
        for sid, which, n, value in self.rows:
            w.writerow([sid, which, n, f"{value:.4f}"])
        w.writerow(["set1_mean", "set1", "", f"{self.set1:.4f}"])
        w.writerow(["set2_mean", "set2", "", f"{self.set2:.4f}"])
        w.writerow([self.score_name, "", "", f"{self.final:.4f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len("subject")] + [len(r[0]) for r in self.rows])
        lines = [f"{'subject':<{width}}  set   n_seg  {self.metric}"]
        for sid, which, n, value in self.rows:
            lines.append(f"{sid:<{width}}  {which}  {n:>5}  {value:.4f}")
        s1, s2 = ("S1", "S2") if self.metric == "accuracy" else ("P1", "P2")
        lines.append(f"{s1} = {self.set1:.4f}   {s2} = {self.set2:.4f}")
        lines.append(f"{self.score_name} = {self.final:.4f}")
        return "\n".join(lines) + "\n"


def weighted_score(set1_values: Sequence[float], set2_values: Sequence[float], metric: str = "accuracy") -> ScoreReport:
    """``(2/3) * mean(set1) + (1/3) * mean(set2)``, exact until one final rounding."""
    if not set1_values or not set2_values:
        raise ValueError("both sets need at least one subject")
    m1, m2 = _mean(set1_values), _mean(set2_values)
    final = WEIGHT_SET1 * m1 + WEIGHT_SET2 * m2
    return ScoreReport(metric, [], float(m1), float(m2), float(final))


def report(
    records: Iterable[PredictionRecord],
    manifest: DatasetManifest,
    pooled_pcc: bool = False,
) -> ScoreReport:
    """Group by subject, route subjects to the held-in / held-out set by the
    manifest, and compute the weighted score. Output order is by subject id."""
    records = list(records)
    tasks = {r.task for r in records}
    if len(tasks) != 1:
        raise ValueError(f"records must all belong to one task, got {sorted(tasks)}")
    task = tasks.pop()
    which = manifest.split_of_subject()
    by_subject: dict[str, list[PredictionRecord]] = {}
    for r in records:
        if r.subject_id not in which:
            raise KeyError(f"subject {r.subject_id!r} is not in the manifest")
        by_subject.setdefault(r.subject_id, []).append(r)
    rows = []
    sets: dict[str, list[float]] = {"set1": [], "set2": []}
    for sid in sorted(by_subject):
        recs = by_subject[sid]
        value = subject_accuracy(recs) if task == "mm" else per_subject_pcc(recs, pooled_pcc)
        rows.append((sid, which[sid], len(recs), value))
        sets[which[sid]].append(value)
    rep = weighted_score(sets["set1"], sets["set2"], "accuracy" if task == "mm" else "pcc")
    rep.rows = rows
    return rep


# ---------------------------------------------------------------------------
# prediction dumps


def write_predictions(records: Iterable[PredictionRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in records:
            true = "" if r.value_true is None else _fmt(r.value_true, r.task)
            w.writerow([r.subject_id, r.task, true, _fmt(r.value_pred, r.task)])


def _fmt(v: float, task: str) -> str:
    return str(int(v)) if task == "mm" else repr(float(v))


def read_predictions(path) -> list[PredictionRecord]:
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            sid, task, true, pred = row
            if task == "mm":
                out.append(PredictionRecord(sid, task, int(true), int(pred)))
            else:
                value = float(pred)
                if not math.isfinite(value):
                    raise ValueError(f"{path}:{lineno}: non-finite PCC")
                out.append(PredictionRecord(sid, task, float(true) if true else None, value))
    return out

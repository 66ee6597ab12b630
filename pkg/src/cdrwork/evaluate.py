"""Held-out metrics: confusion counts, rates, confidence interval and lift."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

Z_95 = 1.96


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(predictions, labels) -> Confusion:
    """Counts for boolean (or 0/1) predictions against boolean labels."""
    p = np.asarray(predictions).astype(bool)
    t = np.asarray(labels).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions vs {t.shape[0]} labels")
    if p.size == 0:
        raise ValueError("no predictions to evaluate")
    return Confusion(int(np.sum(p & t)), int(np.sum(p & ~t)),
                     int(np.sum(~p & ~t)), int(np.sum(~p & t)))


def metrics(c: Confusion) -> tuple[float, float | None, float | None]:
    """``(accuracy, sensitivity, specificity)``; undefined rates are ``None``."""
    if c.n == 0:
        raise ValueError("empty confusion matrix")
    accuracy = (c.tp + c.tn) / c.n
    sensitivity = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    specificity = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    return accuracy, sensitivity, specificity


def accuracy_ci_95(accuracy: float, n: int, method: str = "wald") -> tuple[float, float]:
    """Normal-approximation (Wald) interval clipped to [0, 1]; ``method="wilson"`` also works."""
    if n <= 0:
        raise ValueError("n must be positive")
    if method == "wald":
        half = Z_95 * math.sqrt(accuracy * (1 - accuracy) / n)
        return max(0.0, accuracy - half), min(1.0, accuracy + half)
    if method == "wilson":
        z2 = Z_95 ** 2
        centre = (accuracy + z2 / (2 * n)) / (1 + z2 / n)
        half = Z_95 * math.sqrt(accuracy * (1 - accuracy) / n + z2 / (4 * n * n)) / (1 + z2 / n)
        return max(0.0, centre - half), min(1.0, centre + half)
    raise ValueError(f"unknown interval method {method!r}")


def precision_lift(c: Confusion, baseline_prevalence: float) -> float | None:
    """Precision divided by the positive-class base rate.

    One reading of "N times better than random": a random classifier's
    precision equals the prevalence.
    """
    if not baseline_prevalence > 0:
        raise ValueError("baseline_prevalence must be positive")
    if c.tp + c.fp == 0:
        return None
    return (c.tp / (c.tp + c.fp)) / baseline_prevalence


def generalization_gap(train_accuracy: float, test_accuracy: float) -> float:
    for a in (train_accuracy, test_accuracy):
        if not 0.0 <= a <= 1.0:
            raise ValueError("accuracies must lie in [0, 1]")
    return train_accuracy - test_accuracy


@dataclass(frozen=True)
class EvalReport:
    profession: str
    n_test: int
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    accuracy_ci_95: tuple[float, float]
    baseline_prevalence: float
    precision_lift: float | None
    train_accuracy: float | None = None
    generalization_gap: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accuracy_ci_95"] = list(self.accuracy_ci_95)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def evaluate(profession: str, predictions, labels, baseline_prevalence: float,
             train_accuracy: float | None = None, ci_method: str = "wald") -> EvalReport:
    c = confusion(predictions, labels)
    acc, sens, spec = metrics(c)
    gap = generalization_gap(train_accuracy, acc) if train_accuracy is not None else None
    return EvalReport(profession, c.n, c.tp, c.fp, c.tn, c.fn, acc, sens, spec,
                      accuracy_ci_95(acc, c.n, ci_method), baseline_prevalence,
                      precision_lift(c, baseline_prevalence), train_accuracy, gap)


SUMMARY_COLUMNS = ("profession", "n_test", "tp", "fp", "tn", "fn", "accuracy", "sensitivity",
                   "specificity", "ci_low", "ci_high", "baseline_prevalence", "precision_lift",
                   "train_accuracy", "generalization_gap")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_summary(path, reports: Sequence[EvalReport]) -> None:
    """One row per profession, in the order given."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in reports:
            w.writerow([_cell(v) for v in (
                r.profession, r.n_test, r.tp, r.fp, r.tn, r.fn, r.accuracy, r.sensitivity,
                r.specificity, r.accuracy_ci_95[0], r.accuracy_ci_95[1], r.baseline_prevalence,
                r.precision_lift, r.train_accuracy, r.generalization_gap)])

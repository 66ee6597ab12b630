"""Dataset preparation: imputation, z-scoring, splitting and class balancing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

INDICATOR_SUFFIX = "__missing"
TRAIN_FRACTION = 0.75


class SchemaMismatchError(ValueError):
    """Feature names offered to a fitted transform differ from the fitted ones."""


class PrepError(ValueError):
    pass


def indicator_name(feature: str) -> str:
    return feature + INDICATOR_SUFFIX


def parent_feature(column: str) -> str:
    return column[: -len(INDICATOR_SUFFIX)] if column.endswith(INDICATOR_SUFFIX) else column


@dataclass
class Normalizer:
    """Fitted imputation and z-score record.

    ``columns`` lists the output columns in name-sorted order. Each is
    either a raw feature (imputed with ``medians[name]``) or a
    ``<feature>__missing`` indicator.
    """

    input_names: list[str]
    medians: dict[str, float]
    columns: list[str]
    means: list[float]
    stds: list[float]
    dropped: dict[str, str] = field(default_factory=dict)

    def _expanded(self, x: np.ndarray, names: Sequence[str]) -> np.ndarray:
        names = list(names)
        if sorted(names) != sorted(self.input_names):
            missing = sorted(set(self.input_names) - set(names))
            extra = sorted(set(names) - set(self.input_names))
            raise SchemaMismatchError(f"feature names differ from the fitted ones "
                                      f"(missing={missing[:5]}, unexpected={extra[:5]})")
        pos = {n: i for i, n in enumerate(names)}
        x = np.asarray(x, dtype=float)
        out = np.empty((x.shape[0], len(self.columns)))
        for j, col in enumerate(self.columns):
            raw = x[:, pos[parent_feature(col)]]
            if col.endswith(INDICATOR_SUFFIX):
                out[:, j] = np.isnan(raw)
            else:
                out[:, j] = np.where(np.isnan(raw), self.medians[col], raw)
        return out

    def transform(self, x: np.ndarray, names: Sequence[str]) -> np.ndarray:
        e = self._expanded(x, names)
        return (e - np.array(self.means)) / np.array(self.stds)

    def to_dict(self) -> dict:
        return {
            "input_names": list(self.input_names),
            "medians": {k: self.medians[k] for k in sorted(self.medians)},
            "columns": list(self.columns),
            "means": list(self.means),
            "stds": list(self.stds),
            "dropped": {k: self.dropped[k] for k in sorted(self.dropped)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(list(d["input_names"]), dict(d["medians"]), list(d["columns"]),
                   list(d["means"]), list(d["stds"]), dict(d.get("dropped", {})))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    ids: list[str]
    columns: list[str]

    def __post_init__(self):
        if self.x.shape[0] != len(self.y) or len(self.y) != len(self.ids):
            raise PrepError("row count, label count and id count must agree")

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.x[rows], self.y[rows], [self.ids[i] for i in rows], list(self.columns))


def fit_normalizer(x: np.ndarray, names: Sequence[str], fit_rows) -> Normalizer:
    """Fit medians, indicators and z-scores on ``fit_rows`` only.

    A feature with no observed value in the fit rows is dropped; so is any
    output column whose fit-row standard deviation is zero.
    """
    x = np.asarray(x, dtype=float)
    fit = x[np.asarray(fit_rows, dtype=int)]
    medians: dict[str, float] = {}
    dropped: dict[str, str] = {}
    candidates: list[tuple[str, np.ndarray]] = []
    for j, name in enumerate(names):
        col = fit[:, j]
        missing = np.isnan(col)
        if missing.all():
            logger.warning("feature %s has no observed values in the fit rows; dropped", name)
            dropped[name] = "all_missing"
            continue
        med = float(np.median(col[~missing]))
        medians[name] = med
        candidates.append((name, np.where(missing, med, col)))
        if missing.any():
            candidates.append((indicator_name(name), missing.astype(float)))
    columns, means, stds = [], [], []
    for name, col in sorted(candidates, key=lambda c: c[0]):
        mean = float(col.mean())
        std = float(col.std())
        if not std > 1e-12 * max(1.0, abs(mean)):
            dropped[name] = "zero_variance"
            continue
        columns.append(name)
        means.append(mean)
        stds.append(std)
    kept_raw = {parent_feature(c) for c in columns}
    medians = {k: v for k, v in medians.items() if k in kept_raw}
    return Normalizer(list(names), medians, columns, means, stds, dropped)


def impute_and_normalize(x: np.ndarray, names: Sequence[str], fit_rows,
                         y=None, ids=None) -> tuple[Dataset, Normalizer]:
    """Impute with fit-row medians plus indicators, then z-score every column."""
    norm = fit_normalizer(x, names, fit_rows)
    xt = norm.transform(x, names)
    n = xt.shape[0]
    y = np.zeros(n) if y is None else np.asarray(y, dtype=float)
    ids = [str(i) for i in range(n)] if ids is None else list(ids)
    return Dataset(xt, y, ids, list(norm.columns)), norm


def _train_count(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 0.5))


def split_train_test(y, fraction: float = TRAIN_FRACTION,
                     rng: np.random.Generator | int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified seeded split; returns sorted ``(train_rows, test_rows)``.

    The overall train size is ``round(fraction * n)``. Each class with at
    least two rows keeps at least one row on either side.
    """
    y = np.asarray(y)
    n = len(y)
    if n == 0:
        raise PrepError("cannot split an empty dataset")
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y != 1)
    if len(pos) < 2:
        raise PrepError(f"need at least 2 positive rows to stratify, got {len(pos)}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n_train = _train_count(n, fraction)
    k_pos = min(max(_train_count(len(pos), fraction), 1), len(pos) - 1)
    k_neg = n_train - k_pos
    if len(neg) >= 2:
        k_neg = min(max(k_neg, 1), len(neg) - 1)
    k_neg = min(max(k_neg, 0), len(neg))
    pos = rng.permutation(pos)
    neg = rng.permutation(neg)
    train = np.sort(np.concatenate([pos[:k_pos], neg[:k_neg]]))
    test = np.sort(np.concatenate([pos[k_pos:], neg[k_neg:]]))
    return train, test


def upsample_minority(y, rng: np.random.Generator | int = 0) -> np.ndarray:
    """Row indices that balance the classes by resampling the minority.

    Returns ``rows`` such that ``y[rows]`` has equal class counts: every
    original row once, followed by minority rows drawn with replacement.
    """
    y = np.asarray(y)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y != 1)
    if len(pos) == 0 or len(neg) == 0:
        raise PrepError("both classes must be present to upsample")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    extra = rng.choice(minority, size=len(majority) - len(minority), replace=True)
    return np.concatenate([np.arange(len(y)), extra])

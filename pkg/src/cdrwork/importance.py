"""Weight-magnitude input importance and the profession/predictor network.

The importance of an input is the share of the output's input magnitude
that flows back to it. For a weight layer ``W`` (``n_in x n_out``) the
contribution matrix is

    P[i, j] = |W[i, j]| / sum_k |W[k, j]|

and the input shares are the row sums of ``P_1 @ P_2 @ ... @ P_L``.
Biases are ignored. Missingness-indicator columns are folded into their
parent feature.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .features import FeatureTable
from .model import ModelSpec, TrainedModel
from .pipeline import ProfessionRun, run_profession, select_columns
from .prep import parent_feature

logger = logging.getLogger(__name__)

REPORT_GROUPS = {"home_tower_lonlat": ("home_tower_lat", "home_tower_lon")}


@dataclass(frozen=True)
class ImportanceRanking:
    profession: str
    items: tuple[tuple[str, float], ...]  # descending importance, ties by name

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.items]

    def top(self, k: int) -> list[str]:
        return self.names[:k]

    def rank_of(self, name: str) -> int:
        return self.names.index(name) + 1


def _ranking(profession: str, scores: Mapping[str, float]) -> ImportanceRanking:
    total = sum(scores.values())
    items = sorted(((n, v / total) for n, v in scores.items()), key=lambda t: (-t[1], t[0]))
    return ImportanceRanking(profession, tuple(items))


def contribution_matrix(w: np.ndarray) -> np.ndarray:
    a = np.abs(np.asarray(w, dtype=float))
    col = a.sum(axis=0)
    out = np.zeros_like(a)
    nz = col > 0
    out[:, nz] = a[:, nz] / col[nz]
    return out


def column_importance(weights: Sequence[np.ndarray]) -> np.ndarray:
    """Normalized importance of each network input column."""
    n_in = np.asarray(weights[0]).shape[0]
    if any(not np.any(w) for w in weights):
        logger.warning("a weight layer is all zero; returning uniform importances")
        return np.full(n_in, 1.0 / n_in)
    chain = contribution_matrix(weights[0])
    for w in weights[1:]:
        chain = chain @ contribution_matrix(w)
    scores = chain.sum(axis=1)
    total = scores.sum()
    if not total > 0:
        logger.warning("no input magnitude reaches the output; returning uniform importances")
        return np.full(n_in, 1.0 / n_in)
    return scores / total


def gedeon_importance(model: TrainedModel) -> ImportanceRanking:
    """Rank every input feature of ``model``; features it dropped score 0."""
    cols = model.normalizer.columns
    shares = column_importance(model.network.weights)
    scores = {n: 0.0 for n in model.normalizer.input_names}
    for col, s in zip(cols, shares):
        scores[parent_feature(col)] += float(s)
    return _ranking(model.profession, scores)


def merge_groups(ranking: ImportanceRanking,
                 groups: Mapping[str, Sequence[str]] = REPORT_GROUPS) -> ImportanceRanking:
    """Sum the importances of grouped features under the group name."""
    member = {m: g for g, ms in groups.items() for m in ms}
    scores: dict[str, float] = {}
    for n, v in ranking.items:
        key = member.get(n, n)
        scores[key] = scores.get(key, 0.0) + v
    return _ranking(ranking.profession, scores)


def restrict_and_retrain(table: FeatureTable, labels: Mapping[str, str], ranking: ImportanceRanking,
                         spec: ModelSpec, k: int = 20, **kwargs) -> ProfessionRun:
    """Retrain on the ``k`` top-ranked features with the same seed."""
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(ranking.items):
        raise ValueError(f"k={k} exceeds the {len(ranking.items)} ranked features")
    sub = select_columns(table, ranking.top(k))
    return run_profession(sub, labels, ranking.profession, spec, **kwargs)


@dataclass(frozen=True)
class Edge:
    profession: str
    feature: str
    scaled_weight: float


def build_predictor_network(rankings: Sequence[ImportanceRanking], top_k: int = 5) -> list[Edge]:
    """Each profession linked to its ``top_k`` predictors, weights scaled by the top one."""
    edges = []
    for r in rankings:
        top = r.items[:top_k]
        if not top:
            continue
        best = top[0][1]
        for name, imp in top:
            edges.append(Edge(r.profession, name, imp / best if best > 0 else 1.0))
    return edges


def in_degree(edges: Sequence[Edge]) -> dict[str, int]:
    out: dict[str, int] = {}
    for e in edges:
        out[e.feature] = out.get(e.feature, 0) + 1
    return out


def write_importance(path, rankings: Sequence[ImportanceRanking]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["profession", "feature", "importance", "rank"])
        for r in rankings:
            for rank, (name, imp) in enumerate(r.items, start=1):
                w.writerow([r.profession, name, repr(float(imp)), rank])


def write_edges(path, edges: Sequence[Edge]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["profession", "feature", "scaled_weight"])
        for e in edges:
            w.writerow([e.profession, e.feature, repr(float(e.scaled_weight))])

"""One-vs-rest training and evaluation for a single profession."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .evaluate import EvalReport, evaluate
from .features import FeatureTable
from .model import ModelSpec, TrainedModel, classify, forward, predict, train_sgd
from .prep import fit_normalizer, split_train_test, upsample_minority


def derive_seed(seed: int, *parts: str) -> int:
    """Stable 63-bit seed for a named sub-stream of ``seed``."""
    h = hashlib.sha256(":".join([str(seed), *parts]).encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


@dataclass
class ProfessionRun:
    profession: str
    model: TrainedModel
    train_ids: list[str]
    test_ids: list[str]
    test_prob: np.ndarray
    test_labels: np.ndarray
    report: EvalReport


def labelled_rows(table: FeatureTable, labels: Mapping[str, str]) -> np.ndarray:
    return np.array([i for i, sid in enumerate(table.subscriber_ids) if sid in labels], dtype=int)


def select_columns(table: FeatureTable, names: Sequence[str]) -> FeatureTable:
    """Keep ``names`` in the table's own column order."""
    wanted = set(names)
    unknown = wanted - set(table.names)
    if unknown:
        raise KeyError(f"unknown features {sorted(unknown)}")
    cols = [j for j, n in enumerate(table.names) if n in wanted]
    return FeatureTable(list(table.subscriber_ids), tuple(table.names[j] for j in cols), table.matrix[:, cols])


def run_profession(table: FeatureTable, labels: Mapping[str, str], profession: str,
                   spec: ModelSpec, schema_hash: str = "", schema_version: int = 1,
                   threshold: float = 0.5, ci_method: str = "wald") -> ProfessionRun:
    """Split, normalize, upsample, train and evaluate one binary classifier.

    Every random stream derives from ``spec.seed`` and the profession name,
    so the professions can run in any order or in parallel.
    """
    rows = labelled_rows(table, labels)
    ids = [table.subscriber_ids[i] for i in rows]
    x = table.matrix[rows]
    y = np.array([labels[s] == profession for s in ids], dtype=float)

    train, test = split_train_test(y, rng=np.random.default_rng(derive_seed(spec.seed, profession, "split")))
    norm = fit_normalizer(x, table.names, train)
    x_train = norm.transform(x[train], table.names)
    bal = upsample_minority(y[train], rng=np.random.default_rng(derive_seed(spec.seed, profession, "upsample")))

    train_rng = np.random.default_rng(derive_seed(spec.seed, profession, "train"))
    net, trace = train_sgd(x_train[bal], y[train][bal], spec, rng=train_rng)
    model = TrainedModel(profession, spec, net, norm, schema_hash, schema_version, trace)

    train_pred = classify(forward(net, x_train).prob, threshold)
    train_acc = float(np.mean(train_pred == y[train].astype(bool)))
    test_prob = predict(model, x[test], table.names)
    report = evaluate(profession, classify(test_prob, threshold), y[test].astype(bool),
                      baseline_prevalence=float(y.mean()), train_accuracy=train_acc, ci_method=ci_method)
    return ProfessionRun(profession, model, [ids[i] for i in train], [ids[i] for i in test],
                         test_prob, y[test], report)


def with_seed(spec: ModelSpec, seed: int) -> ModelSpec:
    return replace(spec, seed=seed)

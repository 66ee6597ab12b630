"""Home-tower aggregation of out-of-sample predictions."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .ingest import TowerRegistry

DEFAULT_MIN_COUNT = 5


@dataclass(frozen=True)
class TowerAggregate:
    tower_id: str
    latitude: float
    longitude: float
    n_subscribers: int
    predicted_rate: float | None
    suppressed: bool


def aggregate_by_home_tower(predictions: Mapping[str, float], home_towers: Mapping[str, str | None],
                            registry: TowerRegistry, min_count: int = DEFAULT_MIN_COUNT
                            ) -> tuple[list[TowerAggregate], int]:
    """Average predictions per home tower.

    ``predictions`` maps subscriber ids to 0/1 classifications (or
    probabilities). Subscribers without a home tower are counted and
    returned as the second element. Towers with fewer than ``min_count``
    subscribers are suppressed and carry no rate.
    """
    groups: dict[str, list[float]] = {}
    skipped = 0
    for sid in sorted(predictions):
        tid = home_towers.get(sid)
        if not tid:
            skipped += 1
            continue
        if tid not in registry:
            raise KeyError(f"home tower {tid!r} of {sid} is not in the tower registry")
        groups.setdefault(tid, []).append(float(predictions[sid]))
    out = []
    for tid in sorted(groups):
        vals = groups[tid]
        tower = registry[tid]
        suppressed = len(vals) < min_count
        rate = None if suppressed else math.fsum(vals) / len(vals)
        out.append(TowerAggregate(tid, tower.latitude, tower.longitude, len(vals), rate, suppressed))
    return out, skipped


def to_geojson(aggregates: Sequence[TowerAggregate]) -> dict:
    return {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [a.longitude, a.latitude]},
                "properties": {
                    "tower_id": a.tower_id,
                    "n": a.n_subscribers,
                    "rate": a.predicted_rate,
                    "suppressed": a.suppressed,
                },
            }
            for a in aggregates
        ],
    }


def export_geojson(aggregates: Sequence[TowerAggregate]) -> str:
    """Serialized FeatureCollection; coordinates are ``[lon, lat]``."""
    return json.dumps(to_geojson(aggregates), indent=1) + "\n"


def write_geojson(path, aggregates: Sequence[TowerAggregate]) -> None:
    Path(path).write_text(export_geojson(aggregates), encoding="utf-8")


def write_tower_csv(path, aggregates: Sequence[TowerAggregate]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tower_id", "latitude", "longitude", "n_subscribers", "predicted_rate", "suppressed"])
        for a in aggregates:
            w.writerow([a.tower_id, repr(a.latitude), repr(a.longitude), a.n_subscribers,
                        "" if a.predicted_rate is None else repr(a.predicted_rate), int(a.suppressed)])

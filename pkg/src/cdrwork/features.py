"""Per-subscriber behavioural features in three dimensions.

Financial features come from top-ups, per-event charges and the handset;
mobility features from tower attachments; social features from contacts and
general usage counts. Values that cannot be computed (no top-ups, no
nocturnal calls, ...) are ``None`` and are serialized as empty CSV fields.

All aggregates are computed with :func:`math.fsum` so results do not depend
on the order of the input records.
"""

from __future__ import annotations

import hashlib
import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .ingest import CHANNELS, DIRECTIONS, TIERS, SubscriberTimeline, TowerRegistry
from .prep import SchemaMismatchError

SCHEMA_VERSION = 1
DAY = 86400
EARTH_RADIUS_KM = 6371.0088

CONTACT_CHANNELS = ("voice", "sms", "mms", "video")
DURATION_CHANNELS = ("voice", "video", "vas")
CHARGE_CHANNELS = CHANNELS + ("roaming",)
WINDOWS = (("weekly", 7), ("monthly", 30))
WINDOW_STATS = ("mean", "median", "var")


def _financial_names() -> list[str]:
    names = ["topup_count", "recharge_mean", "recharge_median", "recharge_variance",
             "recharge_cv", "recharge_n_types", "spending_speed",
             "frac_lowest_denomination", "frac_highest_denomination"]
    names += [f"recharge_{w}_{s}" for w, _ in WINDOWS for s in WINDOW_STATS]
    names += [f"charge_{d}_{c}" for d in DIRECTIONS for c in CHARGE_CHANNELS]
    names += [f"handset_tier_{t}" for t in TIERS]
    names += ["handset_camera", "handset_width_mm", "handset_manufacturer_freq", "handset_brand_freq"]
    return names


MOBILITY_NAMES = ["home_tower_lat", "home_tower_lon", "home_district_tower_share",
                  "radius_of_gyration_km", "entropy_of_places", "n_places_visited",
                  "top_tower_share"]


def _social_names() -> list[str]:
    names = ["degree", "interaction_per_contact", "entropy_of_contacts", "top_contact_share",
             "nocturnal_voice_pct"]
    names += [f"count_{d}_{c}" for d in DIRECTIONS for c in CHANNELS]
    names += [f"duration_{d}_{c}" for d in DIRECTIONS for c in DURATION_CHANNELS]
    names += [f"internet_volume_{d}" for d in DIRECTIONS]
    names += [f"voice_duration_{w}_{s}" for w, _ in WINDOWS for s in WINDOW_STATS]
    return names


DEFAULT_FEATURES: tuple[tuple[str, str], ...] = tuple(
    [(n, "financial") for n in _financial_names()]
    + [(n, "mobility") for n in MOBILITY_NAMES]
    + [(n, "social") for n in _social_names()]
)


def parse_utc_offset(text: str) -> int:
    """``"+06:00"`` -> 21600 seconds."""
    text = text.strip()
    sign = -1 if text.startswith("-") else 1
    body = text.lstrip("+-")
    hours, _, minutes = body.partition(":")
    return sign * (int(hours) * 3600 + int(minutes or 0) * 60)


def format_utc_offset(seconds: int) -> str:
    sign = "-" if seconds < 0 else "+"
    s = abs(seconds)
    return f"{sign}{s // 3600:02d}:{(s % 3600) // 60:02d}"


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names with dimension tags and time conventions.

    ``window_start``/``window_days`` anchor the weekly and monthly
    windowed statistics; :func:`build_context` fills them from the data
    when left as ``None``.
    """

    features: tuple[tuple[str, str], ...] = DEFAULT_FEATURES
    night_window: tuple[int, int] = (19, 5)
    utc_offset_s: int = 6 * 3600
    window_start: int | None = None
    window_days: int | None = None
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        names = [n for n, _ in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        for n, dim in self.features:
            if dim not in ("financial", "mobility", "social"):
                raise ValueError(f"feature {n!r} has unknown dimension {dim!r}")
            if n not in FEATURE_DIMENSION:
                raise ValueError(f"no operation computes feature {n!r}")
        start, end = self.night_window
        if not (0 <= start < 24 and 0 <= end < 24):
            raise ValueError("night window hours must lie in [0, 24)")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.features)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.version,
            "features": [{"name": n, "dimension": d} for n, d in self.features],
            "night_window": list(self.night_window),
            "utc_offset": format_utc_offset(self.utc_offset_s),
            "window_start": self.window_start,
            "window_days": self.window_days,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            features=tuple((f["name"], f["dimension"]) for f in d["features"]),
            night_window=tuple(d["night_window"]),
            utc_offset_s=parse_utc_offset(d["utc_offset"]),
            window_start=d.get("window_start"),
            window_days=d.get("window_days"),
            version=d["schema_version"],
        )

    @property
    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def is_night(self, ts: int) -> bool:
        hour = ((ts + self.utc_offset_s) % DAY) // 3600
        start, end = self.night_window
        if start <= end:
            return start <= hour < end
        return hour >= start or hour < end


@dataclass(frozen=True)
class FeatureVector:
    subscriber_id: str
    names: tuple[str, ...]
    values: tuple[float | None, ...]
    schema_version: int = SCHEMA_VERSION

    def as_dict(self) -> dict[str, float | None]:
        return dict(zip(self.names, self.values))


@dataclass
class FeatureContext:
    """Run-wide quantities that some per-subscriber features are relative to."""

    schema: FeatureSchema
    registry: TowerRegistry
    denomination_min: float | None = None
    denomination_max: float | None = None
    manufacturer_freq: dict[str, float] = field(default_factory=dict)
    brand_freq: dict[str, float] = field(default_factory=dict)


def build_context(timelines: Sequence[SubscriberTimeline], registry: TowerRegistry,
                  schema: FeatureSchema | None = None) -> FeatureContext:
    """Scan all timelines once for denominations, handset frequencies and the window."""
    schema = schema or FeatureSchema()
    amounts = [t.amount for tl in timelines for t in tl.topups]
    phones = [tl.handset for tl in timelines if tl.handset is not None]
    man = Counter(h.manufacturer for h in phones)
    brand = Counter(h.brand for h in phones)
    n_ph = len(phones)
    if schema.window_start is None or schema.window_days is None:
        stamps = [e.timestamp for tl in timelines for e in tl.cdr_events]
        stamps += [t.timestamp for tl in timelines for t in tl.topups]
        if stamps:
            start = schema.window_start
            if start is None:
                start = min(stamps) // DAY * DAY
            days = schema.window_days
            if days is None:
                days = max(1, -(-(max(stamps) + 1 - start) // DAY))
            schema = FeatureSchema(schema.features, schema.night_window, schema.utc_offset_s,
                                   start, days, schema.version)
    return FeatureContext(
        schema=schema,
        registry=registry,
        denomination_min=min(amounts) if amounts else None,
        denomination_max=max(amounts) if amounts else None,
        manufacturer_freq={k: v / n_ph for k, v in man.items()},
        brand_freq={k: v / n_ph for k, v in brand.items()},
    )


# -- small numeric helpers --------------------------------------------------

def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def _pvariance(xs: Sequence[float]) -> float:
    m = _mean(xs)
    return math.fsum((x - m) ** 2 for x in xs) / len(xs)


def shannon_entropy_bits(counts: Iterable[int]) -> float:
    counts = [c for c in counts if c > 0]
    total = sum(counts)
    if total == 0:
        raise ValueError("entropy of an empty distribution")
    # 0.0 - fsum avoids returning -0.0 for a single category
    return 0.0 - math.fsum((c / total) * math.log2(c / total) for c in counts)


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def windowed_statistics(stamps: Sequence[int], values: Sequence[float], start: int,
                        n_days: int, window_days: int) -> dict[str, float] | None:
    """Mean, median and population variance of per-window totals.

    The observation span ``[start, start + n_days)`` is cut into
    consecutive windows of ``window_days`` (the last one may be shorter);
    windows without events contribute a total of zero. Returns ``None``
    when there are no events in the span at all.
    """
    n_windows = max(1, -(-n_days // window_days))
    width = window_days * DAY
    buckets: dict[int, list[float]] = {}
    for ts, v in zip(stamps, values):
        k = (ts - start) // width
        if 0 <= k < n_windows:
            buckets.setdefault(k, []).append(v)
    if not buckets:
        return None
    totals = [math.fsum(buckets.get(k, ())) for k in range(n_windows)]
    return {"mean": _mean(totals), "median": float(statistics.median(totals)),
            "var": _pvariance(totals)}


def _windowed(prefix: str, stamps, values, schema: FeatureSchema) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for wname, wdays in WINDOWS:
        stats = None
        if schema.window_start is not None and schema.window_days is not None:
            stats = windowed_statistics(stamps, values, schema.window_start, schema.window_days, wdays)
        for s in WINDOW_STATS:
            out[f"{prefix}_{wname}_{s}"] = None if stats is None else stats[s]
    return out


# -- feature operations -----------------------------------------------------

def financial_features(timeline: SubscriberTimeline, ctx: FeatureContext) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    amounts = [t.amount for t in timeline.topups]
    n = len(amounts)
    out["topup_count"] = float(n)
    if n:
        mean = _mean(amounts)
        out["recharge_mean"] = mean
        out["recharge_median"] = float(statistics.median(amounts))
        out["recharge_n_types"] = float(len({t.refill_type for t in timeline.topups}))
        if n >= 2:
            var = _pvariance(amounts)
            out["recharge_variance"] = var
            out["recharge_cv"] = math.sqrt(var) / mean if mean > 0 else None
        else:
            out["recharge_variance"] = None
            out["recharge_cv"] = None
        stamps = [e.timestamp for e in timeline.cdr_events] + [t.timestamp for t in timeline.topups]
        span_days = (max(stamps) - min(stamps)) / DAY
        out["spending_speed"] = math.fsum(amounts) / span_days if span_days >= 1 else None
        out["frac_lowest_denomination"] = sum(a == ctx.denomination_min for a in amounts) / n
        out["frac_highest_denomination"] = sum(a == ctx.denomination_max for a in amounts) / n
    else:
        for k in ("recharge_mean", "recharge_median", "recharge_variance", "recharge_cv",
                  "recharge_n_types", "spending_speed", "frac_lowest_denomination",
                  "frac_highest_denomination"):
            out[k] = None
    out.update(_windowed("recharge", [t.timestamp for t in timeline.topups], amounts, ctx.schema))

    charges: dict[str, list[float]] = {}
    for e in timeline.cdr_events:
        charges.setdefault(f"charge_{e.direction}_{e.channel}", []).append(e.charge)
        if not e.tower_id and e.channel in CONTACT_CHANNELS:
            charges.setdefault(f"charge_{e.direction}_roaming", []).append(e.charge)
    for d in DIRECTIONS:
        for c in CHARGE_CHANNELS:
            key = f"charge_{d}_{c}"
            out[key] = math.fsum(charges.get(key, ()))

    h = timeline.handset
    for t in TIERS:
        out[f"handset_tier_{t}"] = None if h is None else float(h.tier == t)
    out["handset_camera"] = None if h is None else float(h.camera_enabled)
    out["handset_width_mm"] = None if h is None else h.width_mm
    out["handset_manufacturer_freq"] = None if h is None else ctx.manufacturer_freq.get(h.manufacturer, 0.0)
    out["handset_brand_freq"] = None if h is None else ctx.brand_freq.get(h.brand, 0.0)
    return out


def home_tower(timeline: SubscriberTimeline, schema: FeatureSchema) -> str | None:
    """Tower with the most night-time voice events; ties go to the smallest id."""
    counts = Counter(e.tower_id for e in timeline.cdr_events
                     if e.channel == "voice" and e.tower_id and schema.is_night(e.timestamp))
    if not counts:
        return None
    return min(counts, key=lambda t: (-counts[t], t))


def radius_of_gyration(timeline: SubscriberTimeline, registry: TowerRegistry) -> float | None:
    """RMS haversine distance (km) of tower-attached events from their centroid.

    The centroid is the mean latitude/longitude, i.e. the mean in a local
    equirectangular projection. Not meaningful across the antimeridian.
    """
    counts = Counter(e.tower_id for e in timeline.cdr_events if e.tower_id)
    if not counts:
        return None
    n = sum(counts.values())
    coords = {}
    for tid in counts:
        tower = registry.get(tid)
        if tower is None:
            raise KeyError(f"unknown tower_id {tid!r} in events of {timeline.subscriber_id}")
        coords[tid] = (tower.latitude, tower.longitude)
    clat = math.fsum(c * coords[t][0] for t, c in counts.items()) / n
    clon = math.fsum(c * coords[t][1] for t, c in counts.items()) / n
    sq = math.fsum(c * haversine_km(clat, clon, *coords[t]) ** 2 for t, c in counts.items())
    return math.sqrt(sq / n)


def entropy_of_places(timeline: SubscriberTimeline) -> tuple[float | None, int]:
    """Return ``(entropy in bits, number of distinct towers)``."""
    counts = Counter(e.tower_id for e in timeline.cdr_events if e.tower_id)
    if not counts:
        return None, 0
    return shannon_entropy_bits(counts.values()), len(counts)


def mobility_features(timeline: SubscriberTimeline, ctx: FeatureContext) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    home = home_tower(timeline, ctx.schema)
    if home is None:
        out["home_tower_lat"] = out["home_tower_lon"] = out["home_district_tower_share"] = None
    else:
        tower = ctx.registry[home]
        out["home_tower_lat"] = tower.latitude
        out["home_tower_lon"] = tower.longitude
        out["home_district_tower_share"] = ctx.registry.district_share(tower.district_id)
    out["radius_of_gyration_km"] = radius_of_gyration(timeline, ctx.registry)
    ent, n_places = entropy_of_places(timeline)
    out["entropy_of_places"] = ent
    out["n_places_visited"] = float(n_places)
    counts = Counter(e.tower_id for e in timeline.cdr_events if e.tower_id)
    out["top_tower_share"] = max(counts.values()) / sum(counts.values()) if counts else None
    return out


def social_features(timeline: SubscriberTimeline, schema: FeatureSchema) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    contacts = Counter(e.counterparty_id for e in timeline.cdr_events
                       if e.channel in CONTACT_CHANNELS and e.counterparty_id)
    degree = len(contacts)
    total = sum(contacts.values())
    out["degree"] = float(degree)
    out["interaction_per_contact"] = total / degree if degree else None
    out["entropy_of_contacts"] = shannon_entropy_bits(contacts.values()) if degree else None
    out["top_contact_share"] = max(contacts.values()) / total if degree else None

    voice = [e for e in timeline.cdr_events if e.channel == "voice"]
    out["nocturnal_voice_pct"] = (sum(schema.is_night(e.timestamp) for e in voice) / len(voice)
                                  if voice else None)

    counts = Counter((e.direction, e.channel) for e in timeline.cdr_events)
    durations: dict[tuple[str, str], list[int]] = {}
    volumes: dict[str, list[int]] = {}
    for e in timeline.cdr_events:
        durations.setdefault((e.direction, e.channel), []).append(e.duration_s)
        if e.channel == "internet":
            volumes.setdefault(e.direction, []).append(e.volume_bytes)
    for d in DIRECTIONS:
        for c in CHANNELS:
            out[f"count_{d}_{c}"] = float(counts.get((d, c), 0))
    for d in DIRECTIONS:
        for c in DURATION_CHANNELS:
            out[f"duration_{d}_{c}"] = float(sum(durations.get((d, c), ())))
    for d in DIRECTIONS:
        out[f"internet_volume_{d}"] = float(sum(volumes.get(d, ())))
    out.update(_windowed("voice_duration", [e.timestamp for e in voice],
                         [float(e.duration_s) for e in voice], schema))
    return out


FEATURE_DIMENSION: dict[str, str] = {n: d for n, d in DEFAULT_FEATURES}

_DIMENSION_OPS: dict[str, Callable[[SubscriberTimeline, FeatureContext], dict]] = {
    "financial": financial_features,
    "mobility": mobility_features,
    "social": lambda tl, ctx: social_features(tl, ctx.schema),
}


def assemble(timeline: SubscriberTimeline, ctx: FeatureContext) -> FeatureVector:
    """Concatenate the three dimensions in schema order.

    A timeline with no events, no top-ups and no handset yields all-missing.
    """
    schema = ctx.schema
    if not timeline.cdr_events and not timeline.topups and timeline.handset is None:
        return FeatureVector(timeline.subscriber_id, schema.names, (None,) * len(schema.names), schema.version)
    dims = {d for _, d in schema.features}
    partial: dict[str, float | None] = {}
    for dim in ("financial", "mobility", "social"):
        if dim in dims:
            partial.update(_DIMENSION_OPS[dim](timeline, ctx))
    values = []
    for name in schema.names:
        v = partial[name]
        if v is not None and not math.isfinite(v):
            v = None
        values.append(v)
    return FeatureVector(timeline.subscriber_id, schema.names, tuple(values), schema.version)


def extract_all(timelines: Sequence[SubscriberTimeline], registry: TowerRegistry,
                schema: FeatureSchema | None = None) -> tuple[list[FeatureVector], FeatureContext]:
    ctx = build_context(timelines, registry, schema)
    return [assemble(tl, ctx) for tl in timelines], ctx


# -- file formats -----------------------------------------------------------

def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_features(path, vectors: Sequence[FeatureVector], schema: FeatureSchema) -> None:
    """features.csv: ``subscriber_id`` then the schema names; missing is empty."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(("subscriber_id",) + schema.names) + "\n")
        for v in vectors:
            if v.names != schema.names:
                raise ValueError(f"vector for {v.subscriber_id} does not follow the schema")
            fh.write(",".join([v.subscriber_id] + [_fmt(x) for x in v.values]) + "\n")


def write_schema(path, schema: FeatureSchema) -> None:
    d = schema.to_dict()
    d["schema_hash"] = schema.hash
    Path(path).write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")


def read_schema(path) -> FeatureSchema:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    schema = FeatureSchema.from_dict(d)
    if d.get("schema_hash") != schema.hash:
        raise SchemaMismatchError(f"{path}: recorded schema_hash does not match its contents")
    return schema


@dataclass
class FeatureTable:
    subscriber_ids: list[str]
    names: tuple[str, ...]
    matrix: np.ndarray  # float64, NaN marks a missing value


def read_features(path, schema: FeatureSchema | None = None) -> FeatureTable:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing input file: {path}")
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[0] != "subscriber_id":
            raise ValueError(f"{path}: first column must be subscriber_id")
        names = tuple(header[1:])
        if schema is not None and names != schema.names:
            raise SchemaMismatchError(f"{path}: header does not match schema feature names")
        ids, rows = [], []
        for line in fh:
            f = line.rstrip("\n").split(",")
            ids.append(f[0])
            rows.append([float(x) if x else math.nan for x in f[1:]])
    matrix = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return FeatureTable(ids, names, matrix)


def write_home_towers(path, timelines: Sequence[SubscriberTimeline], schema: FeatureSchema) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("subscriber_id,home_tower_id\n")
        for tl in timelines:
            fh.write(f"{tl.subscriber_id},{home_tower(tl, schema) or ''}\n")


def read_home_towers(path) -> dict[str, str | None]:
    out: dict[str, str | None] = {}
    with Path(path).open(encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            sid, tid = line.rstrip("\n").split(",")
            out[sid] = tid or None
    return out

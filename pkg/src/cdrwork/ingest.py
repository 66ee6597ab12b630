"""Parsing and validation of the raw CSV inputs.

Five header-first CSV files are understood, each with a fixed column order:

    cdr.csv      subscriber_id,counterparty_id,timestamp,direction,channel,duration_s,volume_bytes,tower_id,charge
    topup.csv    subscriber_id,timestamp,amount,refill_type
    handset.csv  subscriber_id,manufacturer,brand,camera_enabled,tier,width_mm
    towers.csv   tower_id,latitude,longitude,district_id
    labels.csv   subscriber_id,profession

Malformed data lines are collected as :class:`RejectedLine` rather than
dropped; a file in which more than half of the lines are rejected aborts
with :class:`IngestError`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

logger = logging.getLogger(__name__)

CDR_COLUMNS = ("subscriber_id", "counterparty_id", "timestamp", "direction", "channel",
               "duration_s", "volume_bytes", "tower_id", "charge")
TOPUP_COLUMNS = ("subscriber_id", "timestamp", "amount", "refill_type")
HANDSET_COLUMNS = ("subscriber_id", "manufacturer", "brand", "camera_enabled", "tier", "width_mm")
TOWER_COLUMNS = ("tower_id", "latitude", "longitude", "district_id")
LABEL_COLUMNS = ("subscriber_id", "profession")

DIRECTIONS = ("out", "in")
CHANNELS = ("voice", "sms", "mms", "video", "internet", "vas")
TIERS = ("smart", "feature", "basic")

PROFESSIONS = (
    "unemployed", "student", "retired", "clerk", "landlord", "teacher",
    "skilled_worker", "unskilled_worker", "farmer", "homemaker", "shopkeeper",
    "business_owner", "government_employee", "professional", "driver",
    "healthcare_worker", "security_personnel", "other",
)

MAX_REJECT_FRACTION = 0.5


class IngestError(ValueError):
    """Raised for unreadable inputs: wrong header, bad registry, too many rejects."""


@dataclass(frozen=True, slots=True)
class CdrRecord:
    subscriber_id: str
    counterparty_id: str
    timestamp: int
    direction: str
    channel: str
    duration_s: int
    volume_bytes: int
    tower_id: str
    charge: float


@dataclass(frozen=True, slots=True)
class TopUpRecord:
    subscriber_id: str
    timestamp: int
    amount: float
    refill_type: str


@dataclass(frozen=True, slots=True)
class HandsetRecord:
    subscriber_id: str
    manufacturer: str
    brand: str
    camera_enabled: bool
    tier: str
    width_mm: float


@dataclass(frozen=True, slots=True)
class Tower:
    tower_id: str
    latitude: float
    longitude: float
    district_id: str


@dataclass(frozen=True, slots=True)
class LabelRecord:
    subscriber_id: str
    profession: str


@dataclass(frozen=True, slots=True)
class RejectedLine:
    line_no: int
    reason: str
    text: str


@dataclass(frozen=True)
class SchemaConfig:
    """Validation options shared by the event parsers.

    ``window_start`` / ``window_end`` bound accepted timestamps as a
    half-open interval ``[start, end)``; ``None`` leaves that side open.
    """

    window_start: int | None = None
    window_end: int | None = None
    professions: tuple[str, ...] = PROFESSIONS

    def check_timestamp(self, ts: int) -> None:
        if self.window_start is not None and ts < self.window_start:
            raise ValueError(f"timestamp {ts} before observation window")
        if self.window_end is not None and ts >= self.window_end:
            raise ValueError(f"timestamp {ts} after observation window")


@dataclass(frozen=True)
class SubscriberTimeline:
    subscriber_id: str
    cdr_events: tuple[CdrRecord, ...] = ()
    topups: tuple[TopUpRecord, ...] = ()
    handset: HandsetRecord | None = None


@dataclass
class TowerRegistry:
    towers: dict[str, Tower] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.towers)

    def __contains__(self, tower_id: str) -> bool:
        return tower_id in self.towers

    def __getitem__(self, tower_id: str) -> Tower:
        try:
            return self.towers[tower_id]
        except KeyError:
            raise KeyError(f"unknown tower_id {tower_id!r}") from None

    def get(self, tower_id: str) -> Tower | None:
        return self.towers.get(tower_id)

    def district_share(self, district_id: str) -> float:
        """Fraction of registry towers that belong to ``district_id``."""
        if not self.towers:
            return 0.0
        n = sum(1 for t in self.towers.values() if t.district_id == district_id)
        return n / len(self.towers)


# -- field converters -------------------------------------------------------

def _nonempty(value: str, name: str) -> str:
    if not value:
        raise ValueError(f"empty {name}")
    return value


def _int(value: str, name: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"{name} is not an integer: {value!r}") from None


def _float(value: str, name: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise ValueError(f"{name} is not a number: {value!r}") from None
    if out != out or out in (float("inf"), float("-inf")):
        raise ValueError(f"{name} is not finite: {value!r}")
    return out


def _cdr_from_fields(f: Sequence[str], cfg: SchemaConfig) -> CdrRecord:
    sub = _nonempty(f[0], "subscriber_id")
    ts = _int(f[2], "timestamp")
    direction = f[3]
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    channel = f[4]
    if channel not in CHANNELS:
        raise ValueError(f"unknown channel {channel!r}")
    duration = _int(f[5], "duration_s")
    volume = _int(f[6], "volume_bytes")
    charge = _float(f[8], "charge")
    if duration < 0:
        raise ValueError("negative duration_s")
    if volume < 0:
        raise ValueError("negative volume_bytes")
    if charge < 0:
        raise ValueError("negative charge")
    if channel in ("sms", "mms") and duration != 0:
        raise ValueError(f"duration nonzero for {channel}")
    if channel != "internet" and volume != 0:
        raise ValueError(f"volume nonzero for {channel}")
    cfg.check_timestamp(ts)
    return CdrRecord(sub, f[1], ts, direction, channel, duration, volume, f[7], charge)


def _topup_from_fields(f: Sequence[str], cfg: SchemaConfig) -> TopUpRecord:
    sub = _nonempty(f[0], "subscriber_id")
    ts = _int(f[1], "timestamp")
    amount = _float(f[2], "amount")
    if amount <= 0:
        raise ValueError("amount must be positive")
    cfg.check_timestamp(ts)
    return TopUpRecord(sub, ts, amount, f[3])


def _handset_from_fields(f: Sequence[str], cfg: SchemaConfig) -> HandsetRecord:
    sub = _nonempty(f[0], "subscriber_id")
    if f[3] not in ("0", "1"):
        raise ValueError(f"camera_enabled must be 0 or 1, got {f[3]!r}")
    tier = f[4]
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}")
    width = _float(f[5], "width_mm")
    if width <= 0:
        raise ValueError("width_mm must be positive")
    return HandsetRecord(sub, f[1], f[2], f[3] == "1", tier, width)


def _label_from_fields(f: Sequence[str], cfg: SchemaConfig) -> LabelRecord:
    sub = _nonempty(f[0], "subscriber_id")
    if f[1] not in cfg.professions:
        raise ValueError(f"unknown profession {f[1]!r}")
    return LabelRecord(sub, f[1])


# -- serialization (inverse of the converters) -----------------------------

def _num(x: float) -> str:
    return repr(float(x))


def format_cdr(r: CdrRecord) -> str:
    return ",".join((r.subscriber_id, r.counterparty_id, str(r.timestamp), r.direction, r.channel,
                     str(r.duration_s), str(r.volume_bytes), r.tower_id, _num(r.charge)))


def format_topup(r: TopUpRecord) -> str:
    return ",".join((r.subscriber_id, str(r.timestamp), _num(r.amount), r.refill_type))


def format_handset(r: HandsetRecord) -> str:
    return ",".join((r.subscriber_id, r.manufacturer, r.brand, "1" if r.camera_enabled else "0",
                     r.tier, _num(r.width_mm)))


def format_tower(t: Tower) -> str:
    return ",".join((t.tower_id, _num(t.latitude), _num(t.longitude), t.district_id))


def format_label(r: LabelRecord) -> str:
    return f"{r.subscriber_id},{r.profession}"


# -- generic line parser ----------------------------------------------------

def parse_lines(lines: Iterable[str], columns: Sequence[str],
                convert: Callable[[Sequence[str], SchemaConfig], object],
                cfg: SchemaConfig | None = None, source: str = "<lines>"):
    """Parse header-first CSV lines into records and rejects.

    The first line must equal ``columns`` joined by commas.
    """
    cfg = cfg or SchemaConfig()
    it = iter(lines)
    try:
        header = next(it).rstrip("\r\n")
    except StopIteration:
        raise IngestError(f"{source}: missing header") from None
    if header.lstrip("﻿") != ",".join(columns):
        raise IngestError(f"{source}: header mismatch, expected {','.join(columns)!r} got {header!r}")
    records, rejects = [], []
    n_cols = len(columns)
    for line_no, raw in enumerate(it, start=2):
        line = raw.rstrip("\r\n")
        fields = line.split(",")
        if len(fields) != n_cols:
            rejects.append(RejectedLine(line_no, f"expected {n_cols} fields, got {len(fields)}", line))
            continue
        try:
            records.append(convert(fields, cfg))
        except ValueError as exc:
            rejects.append(RejectedLine(line_no, str(exc), line))
    total = len(records) + len(rejects)
    if total and len(rejects) / total > MAX_REJECT_FRACTION:
        first = rejects[0]
        raise IngestError(f"{source}: {len(rejects)} of {total} lines rejected "
                          f"(first at line {first.line_no}: {first.reason})")
    if rejects:
        logger.warning("%s: rejected %d of %d lines", source, len(rejects), total)
    return records, rejects


def _parse_file(path, columns, convert, cfg):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing input file: {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        return parse_lines(fh, columns, convert, cfg, source=str(path))


def parse_cdr_file(path, schema_config: SchemaConfig | None = None):
    """Return ``(records, rejects)`` for a cdr.csv file."""
    return _parse_file(path, CDR_COLUMNS, _cdr_from_fields, schema_config)


def parse_topup_file(path, schema_config: SchemaConfig | None = None):
    return _parse_file(path, TOPUP_COLUMNS, _topup_from_fields, schema_config)


def parse_handset_file(path, schema_config: SchemaConfig | None = None):
    return _parse_file(path, HANDSET_COLUMNS, _handset_from_fields, schema_config)


def parse_label_file(path, schema_config: SchemaConfig | None = None):
    return _parse_file(path, LABEL_COLUMNS, _label_from_fields, schema_config)


def load_tower_registry(path) -> TowerRegistry:
    """Load towers.csv. Any malformed row is an error rather than a reject."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing input file: {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        return tower_registry_from_lines(fh, source=str(path))


def tower_registry_from_lines(lines: Iterable[str], source: str = "<lines>") -> TowerRegistry:
    it = iter(lines)
    header = next(it, "").rstrip("\r\n").lstrip("﻿")
    if header != ",".join(TOWER_COLUMNS):
        raise IngestError(f"{source}: header mismatch, expected {','.join(TOWER_COLUMNS)!r}")
    towers: dict[str, Tower] = {}
    for line_no, raw in enumerate(it, start=2):
        f = raw.rstrip("\r\n").split(",")
        try:
            if len(f) != 4:
                raise ValueError(f"expected 4 fields, got {len(f)}")
            tid = _nonempty(f[0], "tower_id")
            lat = _float(f[1], "latitude")
            lon = _float(f[2], "longitude")
        except ValueError as exc:
            raise IngestError(f"{source} line {line_no}: {exc}") from None
        if not -90.0 <= lat <= 90.0:
            raise IngestError(f"{source} line {line_no}: latitude {lat} out of range [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise IngestError(f"{source} line {line_no}: longitude {lon} out of range [-180, 180]")
        if tid in towers:
            raise IngestError(f"{source} line {line_no}: duplicate tower_id {tid!r}")
        towers[tid] = Tower(tid, lat, lon, f[3])
    return TowerRegistry(towers)


def _event_key(r: CdrRecord):
    return (r.timestamp, r.channel, r.counterparty_id)


def _topup_key(r: TopUpRecord):
    return (r.timestamp, r.amount, r.refill_type)


def group_by_subscriber(cdrs: Iterable[CdrRecord], topups: Iterable[TopUpRecord] = (),
                        handsets: Iterable[HandsetRecord] = ()) -> list[SubscriberTimeline]:
    """Partition records into one timeline per subscriber, sorted by id.

    CDR events are ordered by timestamp, ties broken by ``(channel,
    counterparty_id)``; top-ups by ``(timestamp, amount, refill_type)``.
    Python's sort is stable, so fully identical keys keep input order.
    If a subscriber has several handset rows the first one wins.
    """
    events: dict[str, list[CdrRecord]] = {}
    for r in cdrs:
        events.setdefault(r.subscriber_id, []).append(r)
    tops: dict[str, list[TopUpRecord]] = {}
    for r in topups:
        tops.setdefault(r.subscriber_id, []).append(r)
    phones: dict[str, HandsetRecord] = {}
    for r in handsets:
        if r.subscriber_id in phones:
            logger.warning("duplicate handset row for %s ignored", r.subscriber_id)
            continue
        phones[r.subscriber_id] = r
    ids = sorted(set(events) | set(tops) | set(phones))
    return [
        SubscriberTimeline(
            sid,
            tuple(sorted(events.get(sid, ()), key=_event_key)),
            tuple(sorted(tops.get(sid, ()), key=_topup_key)),
            phones.get(sid),
        )
        for sid in ids
    ]


@dataclass
class RawData:
    """Everything read from an input directory, plus the rejects per file."""

    timelines: list[SubscriberTimeline]
    registry: TowerRegistry
    labels: dict[str, str]
    rejects: dict[str, list[RejectedLine]]


def load_directory(data_dir, schema_config: SchemaConfig | None = None,
                   require_labels: bool = False) -> RawData:
    """Read cdr/topup/handset/towers (and labels, when present) from a directory."""
    data_dir = Path(data_dir)
    cdrs, cdr_rej = parse_cdr_file(data_dir / "cdr.csv", schema_config)
    tops, top_rej = parse_topup_file(data_dir / "topup.csv", schema_config)
    phones, ph_rej = parse_handset_file(data_dir / "handset.csv", schema_config)
    registry = load_tower_registry(data_dir / "towers.csv")
    labels: dict[str, str] = {}
    rejects = {"cdr.csv": cdr_rej, "topup.csv": top_rej, "handset.csv": ph_rej}
    label_path = data_dir / "labels.csv"
    if label_path.is_file() or require_labels:
        recs, lab_rej = parse_label_file(label_path, schema_config)
        labels = {r.subscriber_id: r.profession for r in recs}
        rejects["labels.csv"] = lab_rej
    return RawData(group_by_subscriber(cdrs, tops, phones), registry, labels, rejects)

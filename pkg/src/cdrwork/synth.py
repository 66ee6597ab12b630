"""Seeded synthetic CDR / top-up / handset / tower / label generator.

Behaviour is drawn from deliberately simple parametric processes (Poisson
event counts, log-normal amounts and durations, tower choice concentrated
on a home tower). Each profession can scale the generating parameters by
fixed multipliers, which plants a known dependency between behaviour and
label. The data is a test fixture: it is not calibrated to any real
population and results on it say nothing about real subscribers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .ingest import (CDR_COLUMNS, HANDSET_COLUMNS, LABEL_COLUMNS, PROFESSIONS, TOPUP_COLUMNS,
                     TOWER_COLUMNS, LabelRecord)

DAY = 86400

DEFAULT_PREVALENCE = {
    "unemployed": 0.021, "student": 0.08, "retired": 0.05, "clerk": 0.06, "landlord": 0.03,
    "teacher": 0.05, "skilled_worker": 0.12, "unskilled_worker": 0.12, "farmer": 0.10,
    "homemaker": 0.08, "shopkeeper": 0.07, "business_owner": 0.05, "government_employee": 0.04,
    "professional": 0.03, "driver": 0.04, "healthcare_worker": 0.02, "security_personnel": 0.019,
    "other": 0.02,
}

# Generating parameters: (base value, log-normal spread across subscribers).
BASE_PARAMS: dict[str, tuple[float, float]] = {
    "voice_rate": (1.5, 0.3),
    "sms_rate": (0.8, 0.3),
    "mms_rate": (0.03, 0.3),
    "video_rate": (0.03, 0.3),
    "internet_rate": (0.6, 0.3),
    "vas_rate": (0.08, 0.3),
    "nocturnal_voice_share": (0.15, 0.3),
    "n_contacts": (20.0, 0.3),
    "topup_amount": (60.0, 0.3),
    "topup_rate": (0.2, 0.3),
    "refill_types": (2.0, 0.3),
    "mobility_radius": (3.0, 0.3),
    "home_zone_affinity": (1.0, 0.0),
    "voice_duration": (90.0, 0.3),
    "internet_volume": (4.0e6, 0.3),
    "handset_width": (1.0, 0.03),
    "smart_share": (0.4, 0.0),
    "home_share": (0.5, 0.0),
}

DEFAULT_EFFECTS: dict[str, dict[str, float]] = {
    "unemployed": {"nocturnal_voice_share": 2.0, "topup_amount": 0.5, "n_contacts": 0.5,
                   "mobility_radius": 0.6, "home_zone_affinity": 4.0},
    "student": {"sms_rate": 2.0, "internet_rate": 2.5, "smart_share": 1.8},
    "retired": {"handset_width": 0.85, "smart_share": 0.4, "mobility_radius": 0.7},
    "clerk": {"mobility_radius": 0.5, "refill_types": 2.0, "voice_duration": 1.5},
    "landlord": {"topup_amount": 2.0, "home_zone_affinity": 0.3},
    "teacher": {"sms_rate": 1.5, "voice_duration": 1.3},
    "driver": {"mobility_radius": 2.5},
    "business_owner": {"voice_rate": 1.8, "n_contacts": 1.6},
    "farmer": {"internet_rate": 0.4},
}

DENOMINATIONS = (10.0, 20.0, 50.0, 100.0, 200.0, 500.0)
REFILL_TYPES = ("card", "evoucher", "bank", "agent", "app", "kiosk")
MANUFACTURERS = ("Nokia", "Samsung", "Symphony", "Walton", "Huawei", "Apple")
MANUFACTURER_WEIGHTS = (0.25, 0.25, 0.2, 0.12, 0.12, 0.06)
OUT_TARIFF = {"voice": 1.0, "sms": 0.5, "mms": 2.0, "video": 2.0, "internet": 0.1, "vas": 0.5}
CHANNEL_ORDER = ("voice", "sms", "mms", "video", "internet", "vas")
CONTACT_CHANNELS = ("voice", "sms", "mms", "video")


@dataclass
class SynthConfig:
    n_subscribers: int = 20000
    n_towers: int = 300
    bbox: tuple[float, float, float, float] = (23.70, 90.33, 23.90, 90.50)  # lat_min, lon_min, lat_max, lon_max
    days: int = 42
    start: int = 1704067200
    utc_offset_s: int = 6 * 3600
    prevalence: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PREVALENCE))
    effects: dict[str, dict[str, float]] = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_EFFECTS.items()})
    low_zone_fraction: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.n_subscribers <= 0 or self.n_towers <= 0 or self.days <= 0:
            raise ValueError("n_subscribers, n_towers and days must be positive")
        if abs(sum(self.prevalence.values()) - 1.0) > 1e-9:
            raise ValueError("profession prevalences must sum to 1")
        if any(p < 0 for p in self.prevalence.values()):
            raise ValueError("prevalences must be non-negative")
        unknown = set(self.prevalence) - set(PROFESSIONS)
        if unknown:
            raise ValueError(f"unknown professions {sorted(unknown)}")
        for prof, eff in self.effects.items():
            bad = set(eff) - set(BASE_PARAMS)
            if bad:
                raise ValueError(f"unknown generating parameters for {prof}: {sorted(bad)}")
            if any(m <= 0 for m in eff.values()):
                raise ValueError("effect multipliers must be positive")
        lat_min, lon_min, lat_max, lon_max = self.bbox
        if not (-90 <= lat_min < lat_max <= 90 and -180 <= lon_min < lon_max <= 180):
            raise ValueError("invalid bounding box")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = list(self.bbox)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        if "bbox" in d:
            d["bbox"] = tuple(d["bbox"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _haversine_matrix(lat, lon):
    p = np.radians(lat)[:, None], np.radians(lat)[None, :]
    dl = np.radians(lon)[:, None] - np.radians(lon)[None, :]
    a = np.sin((p[1] - p[0]) / 2) ** 2 + np.cos(p[0]) * np.cos(p[1]) * np.sin(dl / 2) ** 2
    return 2 * 6371.0088 * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


def _towers(cfg: SynthConfig, rng: np.random.Generator):
    lat_min, lon_min, lat_max, lon_max = cfg.bbox
    lat = np.round(rng.uniform(lat_min, lat_max, cfg.n_towers), 6)
    lon = np.round(rng.uniform(lon_min, lon_max, cfg.n_towers), 6)
    ids = [f"T{i:05d}" for i in range(cfg.n_towers)]
    row = np.minimum(((lat - lat_min) / (lat_max - lat_min) * 4).astype(int), 3)
    col = np.minimum(((lon - lon_min) / (lon_max - lon_min) * 4).astype(int), 3)
    districts = [f"D{r}{c}" for r, c in zip(row, col)]
    z = cfg.low_zone_fraction
    in_zone = (lat < lat_min + z * (lat_max - lat_min)) & (lon < lon_min + z * (lon_max - lon_min))
    return ids, lat, lon, districts, in_zone


def _lognormal(rng, mean, sigma, size):
    return rng.lognormal(np.log(mean) - sigma ** 2 / 2, sigma, size)


def subscriber_params(rng: np.random.Generator, profession: str, cfg: SynthConfig) -> dict[str, float]:
    """Per-subscriber generating parameters. Draws one normal per parameter."""
    eff = cfg.effects.get(profession, {})
    z = rng.standard_normal(len(BASE_PARAMS))
    out = {}
    for k, (name, (base, sigma)) in enumerate(BASE_PARAMS.items()):
        out[name] = base * eff.get(name, 1.0) * math.exp(sigma * z[k] - sigma ** 2 / 2)
    out["nocturnal_voice_share"] = min(out["nocturnal_voice_share"], 0.95)
    out["smart_share"] = min(out["smart_share"], 0.95)
    out["home_share"] = min(out["home_share"], 0.95)
    return out


def _subscriber(i: int, sid: str, profession: str, cfg: SynthConfig, towers, dist) -> tuple[list, list, str]:
    ids, lat, lon, districts, in_zone = towers
    rng = np.random.default_rng([cfg.seed, 1, i])
    p = subscriber_params(rng, profession, cfg)
    days = cfg.days
    span = days * DAY

    w = np.where(in_zone, p["home_zone_affinity"], 1.0)
    home = int(rng.choice(len(ids), p=w / w.sum()))
    order = np.argsort(dist[home], kind="stable")
    near = [t for t in order[1:] if dist[home, t] <= p["mobility_radius"]]
    if len(near) < 2:
        near = [int(t) for t in order[1:3]] or [home]

    n_contacts = max(1, int(round(p["n_contacts"])))
    contact_w = 1.0 / np.arange(1, n_contacts + 1)
    contact_w /= contact_w.sum()

    rows = []
    for channel in CHANNEL_ORDER:
        n = int(rng.poisson(p[f"{channel}_rate"] * days))
        day = rng.integers(0, days, n)
        u_night = rng.random(n)
        u_hour = rng.random(n)
        if channel == "voice":
            night = u_night < p["nocturnal_voice_share"]
            local = np.where(night, 19 * 3600 + u_hour * 10 * 3600, 5 * 3600 + u_hour * 14 * 3600)
        else:
            local = u_hour * DAY
        local_abs = day * DAY + local.astype(np.int64)
        ts = cfg.start + (local_abs - cfg.utc_offset_s) % span
        outgoing = rng.random(n) < 0.55
        contact = rng.choice(n_contacts, size=n, p=contact_w)
        at_home = rng.random(n) < p["home_share"]
        near_pick = rng.integers(0, len(near), n)
        no_cell = rng.random(n) < (0.01 if channel in CONTACT_CHANNELS else 0.2 if channel == "vas" else 0.0)
        dur_draw = _lognormal(rng, 1.0, 0.8, n)
        vol_draw = _lognormal(rng, 1.0, 1.0, n)
        for k in range(n):
            tower = "" if no_cell[k] else ids[home] if at_home[k] else ids[near[near_pick[k]]]
            cp = f"K{i:06d}N{int(contact[k]):03d}" if channel in CONTACT_CHANNELS else ""
            direction = "out" if outgoing[k] else "in"
            duration = volume = 0
            if channel == "voice":
                duration = max(1, int(dur_draw[k] * p["voice_duration"]))
            elif channel == "video":
                duration = max(1, int(dur_draw[k] * 120))
            elif channel == "internet":
                duration = max(1, int(dur_draw[k] * 300))
                volume = max(1, int(vol_draw[k] * p["internet_volume"]))
            elif channel == "vas":
                duration = max(1, int(dur_draw[k] * 60))
            if direction == "out":
                units = volume / 1e6 if channel == "internet" else duration / 60 if duration else 1.0
                charge = round(OUT_TARIFF[channel] * units, 2)
            else:
                charge = round(duration / 60, 2) if (not tower and channel == "voice") else 0.0
            rows.append((int(ts[k]), channel, cp, direction, duration, volume, tower, charge))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    cdr = [f"{sid},{cp},{t},{d},{ch},{du},{vo},{tw},{c!r}" for t, ch, cp, d, du, vo, tw, c in rows]

    n_top = int(rng.poisson(p["topup_rate"] * days))
    top_ts = np.sort(cfg.start + rng.integers(0, span, n_top))
    raw_amount = _lognormal(rng, p["topup_amount"], 0.5, n_top)
    log_d = np.log(DENOMINATIONS)
    denom = [DENOMINATIONS[int(np.argmin(np.abs(log_d - math.log(a))))] for a in raw_amount]
    n_types = min(len(REFILL_TYPES), max(1, int(round(p["refill_types"]))))
    types = rng.integers(0, n_types, n_top)
    top = [f"{sid},{int(t)},{a!r},{REFILL_TYPES[ty]}" for t, a, ty in zip(top_ts, denom, types)]

    u = rng.random(4)
    if u[0] < p["smart_share"]:
        tier, width, cam = "smart", 72.0, True
    elif u[1] < 0.6:
        tier, width, cam = "feature", 52.0, u[2] < 0.7
    else:
        tier, width, cam = "basic", 46.0, u[2] < 0.1
    width = max(30.0, round(width * p["handset_width"] + 3.0 * rng.standard_normal(), 1))
    man = MANUFACTURERS[int(rng.choice(len(MANUFACTURERS), p=MANUFACTURER_WEIGHTS))]
    brand = f"{man}{tier[0].upper()}{int(u[3] * 5)}"
    handset = f"{sid},{man},{brand},{int(cam)},{tier},{width!r}"
    return cdr, top, handset


def assign_professions(cfg: SynthConfig) -> list[str]:
    rng = np.random.default_rng([cfg.seed, 0])
    names = [p for p in PROFESSIONS if p in cfg.prevalence]
    probs = np.array([cfg.prevalence[p] for p in names])
    picks = rng.choice(len(names), size=cfg.n_subscribers, p=probs / probs.sum())
    return [names[k] for k in picks]


def generate(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write cdr/topup/handset/towers/labels CSVs into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    towers = _towers(cfg, np.random.default_rng([cfg.seed, 2]))
    ids, lat, lon, districts, _ = towers
    dist = _haversine_matrix(lat, lon)
    professions = assign_professions(cfg)
    width = max(6, len(str(cfg.n_subscribers)))
    paths = {name: out / f"{name}.csv" for name in ("cdr", "topup", "handset", "towers", "labels")}
    with paths["towers"].open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(TOWER_COLUMNS) + "\n")
        for t, a, o, d in zip(ids, lat, lon, districts):
            fh.write(f"{t},{float(a)!r},{float(o)!r},{d}\n")
    with paths["cdr"].open("w", encoding="utf-8", newline="\n") as f_cdr, \
            paths["topup"].open("w", encoding="utf-8", newline="\n") as f_top, \
            paths["handset"].open("w", encoding="utf-8", newline="\n") as f_hs, \
            paths["labels"].open("w", encoding="utf-8", newline="\n") as f_lab:
        f_cdr.write(",".join(CDR_COLUMNS) + "\n")
        f_top.write(",".join(TOPUP_COLUMNS) + "\n")
        f_hs.write(",".join(HANDSET_COLUMNS) + "\n")
        f_lab.write(",".join(LABEL_COLUMNS) + "\n")
        for i, prof in enumerate(professions):
            sid = f"S{i:0{width}d}"
            cdr, top, hs = _subscriber(i, sid, prof, cfg, towers, dist)
            if cdr:
                f_cdr.write("\n".join(cdr) + "\n")
            if top:
                f_top.write("\n".join(top) + "\n")
            f_hs.write(hs + "\n")
            f_lab.write(f"{sid},{prof}\n")
    return paths


def shuffle_labels(labels: list[LabelRecord], seed: int) -> list[LabelRecord]:
    """Permute the profession column uniformly at random (negative control)."""
    rng = np.random.default_rng([seed, 3])
    perm = rng.permutation(len(labels))
    return [LabelRecord(r.subscriber_id, labels[j].profession) for r, j in zip(labels, perm)]


def write_labels(path, labels: list[LabelRecord]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(LABEL_COLUMNS) + "\n")
        for r in labels:
            fh.write(f"{r.subscriber_id},{r.profession}\n")

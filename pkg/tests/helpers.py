"""Random inputs and an independent re-implementation of every feature.

The oracle below is written from the feature definitions alone. It uses
plain loops, ``datetime`` for local hours and numpy for the summary
statistics, so it shares no arithmetic code with :mod:`cdrwork.features`.
"""

from __future__ import annotations

import math
from datetime import datetime, timedelta, timezone

import numpy as np

from cdrwork.importance import gedeon_importance
from cdrwork.ingest import (CdrRecord, HandsetRecord, SubscriberTimeline, TopUpRecord, Tower,
                            TowerRegistry)
from cdrwork.model import ModelSpec, Network, loss_and_gradients, sample_masks
from cdrwork.pipeline import run_profession

T0 = 1704067200  # 2024-01-01 00:00 UTC
DAY = 86400
CONTACTS = ("c1", "c2", "c3", "c4", "c5")


def make_registry(n: int = 8, seed: int = 0) -> TowerRegistry:
    rng = np.random.default_rng(seed)
    towers = {}
    for i in range(n):
        tid = f"T{i:02d}"
        towers[tid] = Tower(tid, float(23.7 + 0.2 * rng.random()), float(90.3 + 0.2 * rng.random()),
                            f"D{i % 3}")
    return TowerRegistry(towers)


def random_timeline(rng: np.random.Generator, registry: TowerRegistry, sid: str = "s1",
                    max_events: int = 30, span_days: int = 40) -> SubscriberTimeline:
    tower_ids = sorted(registry.towers)
    events = []
    for _ in range(int(rng.integers(0, max_events + 1))):
        channel = str(rng.choice(["voice", "sms", "mms", "video", "internet", "vas"]))
        ts = T0 + int(rng.integers(0, span_days * DAY))
        duration = 0 if channel in ("sms", "mms") else int(rng.integers(0, 600))
        volume = int(rng.integers(0, 10**6)) if channel == "internet" else 0
        tower = "" if rng.random() < 0.2 else str(rng.choice(tower_ids))
        contact = "" if channel in ("internet", "vas") else str(rng.choice(CONTACTS))
        events.append(CdrRecord(sid, contact, ts, str(rng.choice(["out", "in"])), channel,
                                duration, volume, tower, round(float(rng.random() * 5), 2)))
    topups = [TopUpRecord(sid, T0 + int(rng.integers(0, span_days * DAY)),
                          float(rng.choice([10.0, 20.0, 50.0, 100.0])), str(rng.choice(["card", "app"])))
              for _ in range(int(rng.integers(0, 7)))]
    handset = None
    if rng.random() < 0.8:
        handset = HandsetRecord(sid, str(rng.choice(["Nokia", "Walton"])), str(rng.choice(["A", "B", "C"])),
                                bool(rng.random() < 0.5), str(rng.choice(["smart", "feature", "basic"])),
                                float(rng.integers(40, 80)))
    events.sort(key=lambda e: (e.timestamp, e.channel, e.counterparty_id))
    topups.sort(key=lambda t: (t.timestamp, t.amount, t.refill_type))
    return SubscriberTimeline(sid, tuple(events), tuple(topups), handset)


# -- oracle -----------------------------------------------------------------

def _local_hour(ts: int, offset_s: int) -> int:
    return datetime.fromtimestamp(ts, tz=timezone(timedelta(seconds=offset_s))).hour


def _is_night(ts, offset_s, start=19, end=5):
    h = _local_hour(ts, offset_s)
    return h >= start or h < end


def _entropy(counts):
    p = np.array([c for c in counts if c > 0], dtype=float)
    p = p / p.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def _haversine(lat1, lon1, lat2, lon2, r=6371.0088):
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    a = (math.sin((phi2 - phi1) / 2) ** 2
         + math.cos(phi1) * math.cos(phi2) * math.sin(math.radians(lon2 - lon1) / 2) ** 2)
    return 2 * r * math.atan2(math.sqrt(a), math.sqrt(1 - a))


def _window_stats(stamps, values, start, days, width):
    n_win = math.ceil(days / width)
    totals = [0.0] * n_win
    seen = False
    for ts, v in zip(stamps, values):
        k = int((ts - start) // (width * DAY))
        if 0 <= k < n_win:
            totals[k] += v
            seen = True
    if not seen:
        return None
    return float(np.mean(totals)), float(np.median(totals)), float(np.var(totals))


def oracle_context(timelines, offset_s=21600):
    amounts = [t.amount for tl in timelines for t in tl.topups]
    phones = [tl.handset for tl in timelines if tl.handset]
    stamps = [e.timestamp for tl in timelines for e in tl.cdr_events] + \
             [t.timestamp for tl in timelines for t in tl.topups]
    start = (min(stamps) // DAY) * DAY
    days = max(1, math.ceil((max(stamps) + 1 - start) / DAY))
    return {
        "min": min(amounts) if amounts else None,
        "max": max(amounts) if amounts else None,
        "man": {m: sum(p.manufacturer == m for p in phones) / len(phones) for m in {p.manufacturer for p in phones}},
        "brand": {b: sum(p.brand == b for p in phones) / len(phones) for b in {p.brand for p in phones}},
        "start": start,
        "days": days,
        "offset": offset_s,
    }


def oracle_features(tl: SubscriberTimeline, registry: TowerRegistry, ctx: dict) -> dict:
    f: dict = {}
    ev, tops, h = tl.cdr_events, tl.topups, tl.handset
    empty = not ev and not tops and h is None
    amounts = [t.amount for t in tops]
    n = len(amounts)

    f["topup_count"] = float(n)
    f["recharge_mean"] = float(np.mean(amounts)) if n else None
    f["recharge_median"] = float(np.median(amounts)) if n else None
    f["recharge_variance"] = float(np.var(amounts)) if n >= 2 else None
    f["recharge_cv"] = float(np.std(amounts) / np.mean(amounts)) if n >= 2 else None
    f["recharge_n_types"] = float(len({t.refill_type for t in tops})) if n else None
    if n:
        all_ts = [e.timestamp for e in ev] + [t.timestamp for t in tops]
        span = (max(all_ts) - min(all_ts)) / DAY
        f["spending_speed"] = sum(amounts) / span if span >= 1 else None
        f["frac_lowest_denomination"] = amounts.count(ctx["min"]) / n
        f["frac_highest_denomination"] = amounts.count(ctx["max"]) / n
    else:
        f["spending_speed"] = f["frac_lowest_denomination"] = f["frac_highest_denomination"] = None
    for prefix, stamps, vals in (
        ("recharge", [t.timestamp for t in tops], amounts),
        ("voice_duration", [e.timestamp for e in ev if e.channel == "voice"],
         [float(e.duration_s) for e in ev if e.channel == "voice"]),
    ):
        for wname, width in (("weekly", 7), ("monthly", 30)):
            st = _window_stats(stamps, vals, ctx["start"], ctx["days"], width)
            for i, s in enumerate(("mean", "median", "var")):
                f[f"{prefix}_{wname}_{s}"] = None if st is None else st[i]

    for d in ("out", "in"):
        for c in ("voice", "sms", "mms", "video", "internet", "vas"):
            f[f"charge_{d}_{c}"] = sum(e.charge for e in ev if e.direction == d and e.channel == c)
        f[f"charge_{d}_roaming"] = sum(e.charge for e in ev if e.direction == d and not e.tower_id
                                       and e.channel in ("voice", "sms", "mms", "video"))
    for t in ("smart", "feature", "basic"):
        f[f"handset_tier_{t}"] = None if h is None else (1.0 if h.tier == t else 0.0)
    f["handset_camera"] = None if h is None else (1.0 if h.camera_enabled else 0.0)
    f["handset_width_mm"] = None if h is None else h.width_mm
    f["handset_manufacturer_freq"] = None if h is None else ctx["man"][h.manufacturer]
    f["handset_brand_freq"] = None if h is None else ctx["brand"][h.brand]

    # mobility
    night = {}
    for e in ev:
        if e.channel == "voice" and e.tower_id and _is_night(e.timestamp, ctx["offset"]):
            night[e.tower_id] = night.get(e.tower_id, 0) + 1
    if night:
        best = max(night.values())
        home = sorted(t for t, c in night.items() if c == best)[0]
        tower = registry.towers[home]
        f["home_tower_lat"], f["home_tower_lon"] = tower.latitude, tower.longitude
        same = [t for t in registry.towers.values() if t.district_id == tower.district_id]
        f["home_district_tower_share"] = len(same) / len(registry.towers)
    else:
        f["home_tower_lat"] = f["home_tower_lon"] = f["home_district_tower_share"] = None
    located = [registry.towers[e.tower_id] for e in ev if e.tower_id]
    if located:
        clat = float(np.mean([t.latitude for t in located]))
        clon = float(np.mean([t.longitude for t in located]))
        f["radius_of_gyration_km"] = math.sqrt(
            sum(_haversine(t.latitude, t.longitude, clat, clon) ** 2 for t in located) / len(located))
        per_tower = {}
        for t in located:
            per_tower[t.tower_id] = per_tower.get(t.tower_id, 0) + 1
        f["entropy_of_places"] = _entropy(per_tower.values())
        f["top_tower_share"] = max(per_tower.values()) / len(located)
        f["n_places_visited"] = float(len(per_tower))
    else:
        f["radius_of_gyration_km"] = f["entropy_of_places"] = f["top_tower_share"] = None
        f["n_places_visited"] = 0.0

    # social
    per_contact = {}
    for e in ev:
        if e.channel in ("voice", "sms", "mms", "video") and e.counterparty_id:
            per_contact[e.counterparty_id] = per_contact.get(e.counterparty_id, 0) + 1
    f["degree"] = float(len(per_contact))
    if per_contact:
        total = sum(per_contact.values())
        f["interaction_per_contact"] = total / len(per_contact)
        f["entropy_of_contacts"] = _entropy(per_contact.values())
        f["top_contact_share"] = max(per_contact.values()) / total
    else:
        f["interaction_per_contact"] = f["entropy_of_contacts"] = f["top_contact_share"] = None
    voice = [e for e in ev if e.channel == "voice"]
    f["nocturnal_voice_pct"] = (sum(1 for e in voice if _is_night(e.timestamp, ctx["offset"])) / len(voice)
                                if voice else None)
    for d in ("out", "in"):
        for c in ("voice", "sms", "mms", "video", "internet", "vas"):
            f[f"count_{d}_{c}"] = float(sum(1 for e in ev if e.direction == d and e.channel == c))
        for c in ("voice", "video", "vas"):
            f[f"duration_{d}_{c}"] = float(sum(e.duration_s for e in ev if e.direction == d and e.channel == c))
        f[f"internet_volume_{d}"] = float(sum(e.volume_bytes for e in ev
                                              if e.direction == d and e.channel == "internet"))
    if empty:
        return {k: None for k in f}
    return f


# -- planted-signal tables --------------------------------------------------

def planted_table(seed: int, n: int = 2000, n_features: int = 45, n_informative: int = 5,
                  prevalence: float = 0.15):
    """Feature table where only ``f00``..``f04`` drive the label.

    Returns ``(FeatureTable, labels, informative_names)``. Positive rows get
    "target", the rest "other".
    """
    from cdrwork.features import FeatureTable

    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, n_features))
    score = x[:, :n_informative].sum(axis=1) / math.sqrt(n_informative)
    cut = np.quantile(score, 1 - prevalence)
    y = score + 0.3 * rng.normal(size=n) > cut
    x[rng.random(x.shape) < 0.02] = np.nan
    names = tuple(f"f{j:02d}" for j in range(n_features))
    ids = [f"s{i:05d}" for i in range(n)]
    labels = {s: ("target" if v else "other") for s, v in zip(ids, y)}
    return FeatureTable(ids, names, x), labels, list(names[:n_informative])


# -- shared checks ----------------------------------------------------------

def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def gradient_check(seed: int, h: float = 1e-5) -> float:
    """Max relative error of backprop against central differences."""
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 4)), int(rng.integers(1, 5))]
    if rng.random() < 0.5:
        sizes.append(int(rng.integers(1, 5)))
    sizes.append(1)
    net = Network([rng.normal(size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                  [rng.normal(size=b) for b in sizes[1:]])
    x = rng.normal(size=(5, sizes[0]))
    y = (rng.random(5) < 0.5).astype(float)
    masks = sample_masks(rng, 5, net, [0.1] + [0.2] * (len(sizes) - 2)) if seed % 2 else None
    _, gw, gb = loss_and_gradients(net, x, y, masks)
    worst = 0.0
    for params, grads in ((net.weights, gw), (net.biases, gb)):
        for p, g in zip(params, grads):
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = loss_and_gradients(net, x, y, masks)[0]
                p[idx] = old - h
                down = loss_and_gradients(net, x, y, masks)[0]
                p[idx] = old
                num[idx] = (up - down) / (2 * h)
            worst = max(worst, float(_rel_err(g.reshape(p.shape), num).max()))
    return worst


def planted_recovery(seed: int) -> tuple[int, float, float]:
    """(planted features in the top 20, mean planted rank, mean noise rank)."""
    table, labels, informative = planted_table(seed)
    run = run_profession(table, labels, "target", ModelSpec(seed=seed))
    ranking = gedeon_importance(run.model)
    ranks = {n: ranking.rank_of(n) for n in table.names}
    noise = [r for n, r in ranks.items() if n not in informative]
    hits = len(set(ranking.top(20)) & set(informative))
    return hits, float(np.mean([ranks[n] for n in informative])), float(np.mean(noise))

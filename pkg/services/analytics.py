# services/analytics.py: descriptive statistics over reconstructed chains.
# Every table comes back as a pandas DataFrame; app.py writes them to CSV.

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from services.core_model import (
    ActivityChain,
    ActivityType,
    Record,
    TripPurpose,
    day_start_epoch,
    euclidean_distance,
    local_day,
    seconds_of_day,
)
from services.helpers import get_logger
from services.lda import GAP

logger = get_logger("analytics")

PASS_BY = "PassBy"
STATES: Tuple[str, ...] = tuple(a.value for a in ActivityType) + (GAP,)
PURPOSES: Tuple[str, ...] = tuple(p.value for p in TripPurpose)
COHORTS = ("commuter", "non_commuter")


# ---------------------------
# Log-normal fits
# ---------------------------
@dataclass(frozen=True)
class LogNormalFit:
    mu: float
    sigma: float
    mean: float
    n: int

    def as_dict(self) -> Dict[str, float]:
        return {"mu": self.mu, "sigma": self.sigma, "sample_mean": self.mean, "n": self.n}


def fit_lognormal(values: Iterable[float]) -> Optional[LogNormalFit]:
    """Maximum-likelihood fit on the positive values; None with fewer than two distinct ones."""
    x = np.asarray([v for v in values if v > 0], dtype=float)
    if len(np.unique(x)) < 2:
        return None
    logs = np.log(x)
    return LogNormalFit(mu=float(logs.mean()), sigma=float(logs.std(ddof=0)), mean=float(x.mean()), n=len(x))


def _cohort(user_id: str, profiles: Optional[Mapping]) -> str:
    profile = profiles.get(user_id) if profiles else None
    return COHORTS[0] if profile is not None and profile.is_commuter else COHORTS[1]


# ---------------------------
# Per user-day distributions
# ---------------------------
def daily_location_count(chains: Iterable[ActivityChain]) -> Tuple[pd.DataFrame, Optional[LogNormalFit]]:
    rows = [
        {"user_id": c.user_id, "day": c.day.isoformat(), "locations": len({s.place_id for s in c.stays if s.is_stay})}
        for c in chains
    ]
    frame = pd.DataFrame(rows, columns=["user_id", "day", "locations"])
    return frame, fit_lognormal(frame["locations"])


def chain_travel_km(chain: ActivityChain, home) -> float:
    """Leg sum home -> Stay 1 -> ... -> Stay n -> home."""
    points = [home] + [s.center for s in chain.stays if s.is_stay] + [home]
    return sum(euclidean_distance(a, b) for a, b in zip(points, points[1:])) / 1000.0


def daily_travel_distance(
    chains: Iterable[ActivityChain], profiles: Mapping
) -> Tuple[pd.DataFrame, Optional[LogNormalFit]]:
    rows = []
    skipped = set()
    for c in chains:
        profile = profiles.get(c.user_id)
        if profile is None or profile.home is None:
            skipped.add(c.user_id)
            continue
        rows.append({"user_id": c.user_id, "day": c.day.isoformat(), "km": chain_travel_km(c, profile.home)})
    if skipped:
        logger.info(f"Travel distance skipped {len(skipped)} user(s) without a home")
    frame = pd.DataFrame(rows, columns=["user_id", "day", "km"])
    return frame, fit_lognormal(frame["km"])


def trip_purpose_fractions(chains: Iterable[ActivityChain], utc_offset_hours: float = 8.0) -> pd.DataFrame:
    """Trips by departure hour and purpose, normalized within each hour; hours without trips are all zero."""
    counts = pd.DataFrame(0, index=pd.RangeIndex(24, name="hour"), columns=list(PURPOSES))
    for c in chains:
        for t in c.trips:
            if t.purpose is None:
                continue
            counts.loc[seconds_of_day(t.departure, utc_offset_hours) // 3600, t.purpose.value] += 1
    totals = counts.sum(axis=1)
    shares = counts.div(totals.replace(0, 1), axis=0).astype(float)
    shares["trips"] = totals
    return shares


def arrival_duration_hist(
    chains: Iterable[ActivityChain],
    activity: ActivityType,
    profiles: Optional[Mapping] = None,
    bin_minutes: int = 30,
    utc_offset_hours: float = 8.0,
) -> Dict[str, pd.DataFrame]:
    """
    Counts over (arrival bin x duration bin) per cohort. A stay cut at
    midnight counts once, by its first piece and full span; durations past
    the last bin land in it.
    """
    bin_s = bin_minutes * 60
    n_bins = 86400 // bin_s
    labels = [round(k * bin_minutes / 60.0, 2) for k in range(n_bins)]
    hists = {c: np.zeros((n_bins, n_bins), dtype=int) for c in COHORTS}
    for c in chains:
        cohort = _cohort(c.user_id, profiles)
        for s in c.stays:
            if s.activity is not activity or s.is_continuation:
                continue
            arrival, departure = s.span
            a = seconds_of_day(arrival, utc_offset_hours) // bin_s
            d = min(n_bins - 1, (departure - arrival) // bin_s)
            hists[cohort][a, d] += 1
    out = {}
    for cohort, h in hists.items():
        frame = pd.DataFrame(h, index=labels, columns=labels)
        frame.index.name = "arrival_hour"
        frame.columns.name = "duration_hours"
        out[cohort] = frame
    return out


# ---------------------------
# States over the day
# ---------------------------
def state_at(chain: ActivityChain, ts: int) -> str:
    """Activity of the Stay covering ts; pass-bys and uncovered times are Gap."""
    for s in chain.stays:
        if s.arrival <= ts < s.departure:
            return s.activity.value if s.is_stay and s.activity is not None else GAP
    return GAP


@dataclass(frozen=True)
class TransitionMatrix:
    t1: float
    t2: float
    states: Tuple[str, ...]
    counts: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros_like(self.counts, dtype=float), where=totals > 0)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.probs, index=list(self.states), columns=list(self.states))
        frame.index.name = "from"
        frame["n_from"] = self.counts.sum(axis=1)
        return frame


def transition_matrix(
    chains: Iterable[ActivityChain], t1: float, t2: float, utc_offset_hours: float = 8.0
) -> TransitionMatrix:
    if not t1 < t2:
        raise ValueError("transition times need t1 < t2")
    index = {s: i for i, s in enumerate(STATES)}
    counts = np.zeros((len(STATES), len(STATES)), dtype=int)
    for c in chains:
        base = day_start_epoch(c.day, utc_offset_hours)
        a = state_at(c, base + int(t1 * 3600))
        b = state_at(c, base + int(t2 * 3600))
        counts[index[a], index[b]] += 1
    return TransitionMatrix(t1=t1, t2=t2, states=STATES, counts=counts)


def _chain_seconds(chain: ActivityChain) -> Dict[str, int]:
    totals: Dict[str, int] = defaultdict(int)
    for s in chain.stays:
        if not s.is_stay:
            totals[PASS_BY] += s.duration
        elif s.activity is not None:
            totals[s.activity.value] += s.duration
    return totals


def time_use_summary(chains: Sequence[ActivityChain], profiles: Optional[Mapping] = None) -> pd.DataFrame:
    """Mean daily hours per activity (plus a PassBy row) for each cohort."""
    rows = [a.value for a in ActivityType] + [PASS_BY]
    sums = {c: defaultdict(float) for c in COHORTS}
    days = {c: 0 for c in COHORTS}
    for chain in chains:
        cohort = _cohort(chain.user_id, profiles)
        days[cohort] += 1
        for k, v in _chain_seconds(chain).items():
            sums[cohort][k] += v
    frame = pd.DataFrame(
        {c: [sums[c][r] / 3600.0 / days[c] if days[c] else 0.0 for r in rows] for c in COHORTS}, index=rows
    )
    frame.index.name = "activity"
    return frame


def group_profiles(
    chains: Sequence[ActivityChain], groups: Mapping[str, int], profiles: Mapping
) -> pd.DataFrame:
    """Per group: activity-time shares, mean daily travel km and mean daily visited locations."""
    activities = [a.value for a in ActivityType]
    seconds: Dict[int, Dict[str, float]] = defaultdict(lambda: defaultdict(float))
    km: Dict[int, List[float]] = defaultdict(list)
    locations: Dict[int, List[int]] = defaultdict(list)
    users: Dict[int, set] = defaultdict(set)
    for c in chains:
        if c.user_id not in groups:
            continue
        g = groups[c.user_id]
        users[g].add(c.user_id)
        for k, v in _chain_seconds(c).items():
            if k != PASS_BY:
                seconds[g][k] += v
        locations[g].append(len({s.place_id for s in c.stays if s.is_stay}))
        profile = profiles.get(c.user_id)
        if profile is not None and profile.home is not None:
            km[g].append(chain_travel_km(c, profile.home))
    rows = []
    for g in sorted(users):
        total = sum(seconds[g].values())
        row = {"group": g, "n_users": len(users[g])}
        row.update({a: (seconds[g][a] / total if total else 0.0) for a in activities})
        row["mean_travel_km"] = float(np.mean(km[g])) if km[g] else float("nan")
        row["mean_locations"] = float(np.mean(locations[g])) if locations[g] else float("nan")
        rows.append(row)
    return pd.DataFrame(rows, columns=["group", "n_users"] + activities + ["mean_travel_km", "mean_locations"])


def od_flows(
    chains: Iterable[ActivityChain],
    start_hour: float = 7.0,
    end_hour: float = 9.0,
    min_share: float = 0.0,
    utc_offset_hours: float = 8.0,
) -> pd.DataFrame:
    """Station-to-station trip counts by purpose for departures in [start_hour, end_hour)."""
    counts: Dict[Tuple[str, str, str], int] = defaultdict(int)
    for c in chains:
        for t in c.trips:
            hour = seconds_of_day(t.departure, utc_offset_hours) / 3600.0
            if start_hour <= hour < end_hour:
                purpose = t.purpose.value if t.purpose else ""
                counts[(t.origin.station_id, t.destination.station_id, purpose)] += 1
    frame = pd.DataFrame(
        [(o, d, p, n) for (o, d, p), n in sorted(counts.items())],
        columns=["origin_station", "destination_station", "purpose", "trips"],
    )
    total = frame["trips"].sum()
    frame["share"] = frame["trips"] / total if total else 0.0
    if min_share > 0:
        frame = frame[frame["share"] >= min_share].reset_index(drop=True)
    return frame


def activity_occupancy(
    chains: Sequence[ActivityChain], slot_minutes: int = 10, utc_offset_hours: float = 8.0
) -> pd.DataFrame:
    """Share of user-days in each state at the middle of every slot of the day."""
    n = 1440 // slot_minutes
    states = [a.value for a in ActivityType] + [PASS_BY, GAP]
    counts = np.zeros((n, len(states)))
    col = {s: i for i, s in enumerate(states)}
    for c in chains:
        base = day_start_epoch(c.day, utc_offset_hours)
        for k in range(n):
            ts = base + k * slot_minutes * 60 + slot_minutes * 30
            state = GAP
            for s in c.stays:
                if s.arrival <= ts < s.departure:
                    if not s.is_stay:
                        state = PASS_BY
                    elif s.activity is not None:
                        state = s.activity.value
                    break
            counts[k, col[state]] += 1
    total = max(1, len(chains))
    labels = [f"{(k * slot_minutes) // 60:02d}:{(k * slot_minutes) % 60:02d}" for k in range(n)]
    frame = pd.DataFrame(counts / total, index=labels, columns=states)
    frame.index.name = "slot"
    return frame


# ---------------------------
# Raw-data statistics
# ---------------------------
INTERVAL_EDGES_MIN = [0, 1, 5, 10, 30, 60, 180, np.inf]


def record_statistics(records_by_user: Mapping[str, Sequence[Record]], utc_offset_hours: float = 8.0) -> Dict[str, pd.DataFrame]:
    per_hour = np.zeros(24, dtype=int)
    per_day: Dict[Tuple[str, str], int] = defaultdict(int)
    gaps: List[float] = []
    for user, records in sorted(records_by_user.items()):
        ts = np.array([r.timestamp for r in records], dtype=np.int64)
        for t in ts:
            per_hour[seconds_of_day(int(t), utc_offset_hours) // 3600] += 1
            per_day[(user, local_day(int(t), utc_offset_hours).isoformat())] += 1
        gaps.extend((np.diff(np.sort(ts)) / 60.0).tolist())

    hourly = pd.DataFrame({"hour": range(24), "records": per_hour})
    daily = pd.DataFrame([(u, d, n) for (u, d), n in sorted(per_day.items())], columns=["user_id", "day", "records"])
    hist, _ = np.histogram(gaps, bins=INTERVAL_EDGES_MIN)
    labels = [f"{INTERVAL_EDGES_MIN[i]}-{INTERVAL_EDGES_MIN[i + 1]}" for i in range(len(INTERVAL_EDGES_MIN) - 1)]
    intervals = pd.DataFrame({"interval_minutes": labels, "count": hist})
    summary = pd.DataFrame(
        [
            {
                "users": len(records_by_user),
                "records": int(per_hour.sum()),
                "user_days": len(daily),
                "mean_records_per_user_day": float(daily["records"].mean()) if len(daily) else 0.0,
                "median_interval_minutes": float(np.median(gaps)) if gaps else float("nan"),
            }
        ]
    )
    return {"records_per_hour": hourly, "records_per_user_day": daily, "record_intervals": intervals, "record_summary": summary}


def write_gnuplot(frame: pd.DataFrame, path: str, index: bool = True) -> None:
    """Whitespace-separated table with a '#' header line."""
    data = frame.reset_index() if index and frame.index.name is not None else frame
    with open(path, "w", encoding="utf-8") as f:
        f.write("# " + " ".join(str(c).replace(" ", "_") for c in data.columns) + "\n")
        for row in data.itertuples(index=False):
            f.write(" ".join(str(v) for v in row) + "\n")

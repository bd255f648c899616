# services/ingest.py: parse the four input tables, filter sparse days,
# and answer nearest-station (Voronoi membership) queries.

import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from services.core_model import (
    BaseStation,
    CategoryMap,
    CheckIn,
    POI,
    ProjectedPoint,
    Projection,
    Record,
    SECONDS_PER_DAY,
    is_weekend,
    local_day,
    parse_timestamp,
    seconds_of_day,
)
from services.errors import IngestError
from services.helpers import get_logger

logger = get_logger("ingest")

XDR_COLUMNS = ("user_id", "timestamp", "lon", "lat", "station_id")
POI_COLUMNS = ("poi_id", "lon", "lat", "category")
STATION_COLUMNS = ("station_id", "lon", "lat")
CHECKIN_COLUMNS = ("user_id", "timestamp", "category")
MAX_DIAGNOSTICS = 20


@dataclass
class ParseStats:
    n_rows: int = 0
    n_malformed: int = 0
    n_duplicates: int = 0
    n_out_of_window: int = 0
    diagnostics: List[str] = field(default_factory=list)

    def reject(self, row_number: int, reason: str) -> None:
        self.n_malformed += 1
        if len(self.diagnostics) < MAX_DIAGNOSTICS:
            self.diagnostics.append(f"row {row_number}: {reason}")

    def as_dict(self) -> Dict:
        return {
            "rows": self.n_rows,
            "malformed": self.n_malformed,
            "duplicates": self.n_duplicates,
            "out_of_window": self.n_out_of_window,
            "diagnostics": list(self.diagnostics),
        }


@dataclass
class XdrDataset:
    by_user: Dict[str, List[Record]]
    stats: ParseStats

    @property
    def n_users(self) -> int:
        return len(self.by_user)

    @property
    def n_records(self) -> int:
        return sum(len(v) for v in self.by_user.values())


# ---------------------------
# CSV plumbing
# ---------------------------
def _read_table(stream, columns: Sequence[str], what: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(stream, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        return pd.DataFrame({c: pd.Series(dtype=str) for c in columns})
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise IngestError(f"{what}: missing column(s) {missing}")
    return frame[list(columns)]


def _enforce_malformed_limit(stats: ParseStats, max_share: float, what: str) -> None:
    if stats.n_malformed:
        logger.warning(
            f"⚠️ {what}: skipped {stats.n_malformed}/{stats.n_rows} malformed row(s); "
            f"first: {stats.diagnostics[:3]}"
        )
    if stats.n_rows and stats.n_malformed / stats.n_rows > max_share:
        raise IngestError(
            f"{what}: {stats.n_malformed} of {stats.n_rows} rows malformed "
            f"(limit {max_share:.1%})"
        )


def _coords(frame: pd.DataFrame, stats: ParseStats) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    lon = pd.to_numeric(frame["lon"], errors="coerce").to_numpy(dtype=float)
    lat = pd.to_numeric(frame["lat"], errors="coerce").to_numpy(dtype=float)
    ok = np.isfinite(lon) & np.isfinite(lat) & (np.abs(lon) <= 180.0) & (np.abs(lat) <= 90.0)
    for i in np.flatnonzero(~ok):
        stats.reject(int(i) + 2, f"coordinate out of range or unreadable ({frame['lon'].iat[i]!r}, {frame['lat'].iat[i]!r})")
    return lon, lat, ok


def _timestamps(values: pd.Series, utc_offset_hours: float, stats: ParseStats) -> Tuple[np.ndarray, np.ndarray]:
    numeric = pd.to_numeric(values, errors="coerce")
    ts = np.zeros(len(values), dtype=np.int64)
    ok = np.ones(len(values), dtype=bool)
    for i, (raw, num) in enumerate(zip(values, numeric)):
        if not pd.isna(num):
            ts[i] = int(num)
            continue
        try:
            ts[i] = parse_timestamp(raw, utc_offset_hours)
        except (ValueError, TypeError):
            ok[i] = False
            stats.reject(i + 2, f"unreadable timestamp {raw!r}")
    return ts, ok


def _non_empty(frame: pd.DataFrame, column: str, stats: ParseStats) -> np.ndarray:
    values = frame[column].astype(str).str.strip()
    ok = (values != "").to_numpy()
    for i in np.flatnonzero(~ok):
        stats.reject(int(i) + 2, f"empty {column}")
    return ok


# ---------------------------
# Parsers
# ---------------------------
def parse_xdr(
    stream,
    utc_offset_hours: float = 8.0,
    study_window: Optional[Tuple[Optional[int], Optional[int]]] = None,
    max_malformed_share: float = 0.01,
) -> XdrDataset:
    """
    Read xdr.csv (user_id,timestamp,lon,lat,station_id). Returns records
    grouped by user and time-sorted, with exact (user, timestamp, station)
    duplicates collapsed. Malformed rows are counted and skipped; more than
    max_malformed_share of them is fatal.
    """
    frame = _read_table(stream, XDR_COLUMNS, "xdr")
    stats = ParseStats(n_rows=len(frame))
    if frame.empty:
        return XdrDataset(by_user={}, stats=stats)

    frame = frame.assign(user_id=frame["user_id"].str.strip(), station_id=frame["station_id"].str.strip())
    ok = _non_empty(frame, "user_id", stats) & _non_empty(frame, "station_id", stats)
    ts, ts_ok = _timestamps(frame["timestamp"], utc_offset_hours, stats)
    lon, lat, coord_ok = _coords(frame, stats)
    ok &= ts_ok & coord_ok
    _enforce_malformed_limit(stats, max_malformed_share, "xdr")

    clean = pd.DataFrame(
        {
            "user_id": frame["user_id"].to_numpy()[ok],
            "timestamp": ts[ok],
            "lon": lon[ok],
            "lat": lat[ok],
            "station_id": frame["station_id"].to_numpy()[ok],
        }
    )

    if study_window is not None:
        start, end = study_window
        inside = np.ones(len(clean), dtype=bool)
        if start is not None:
            inside &= clean["timestamp"].to_numpy() >= start
        if end is not None:
            inside &= clean["timestamp"].to_numpy() < end
        stats.n_out_of_window = int((~inside).sum())
        if stats.n_out_of_window:
            logger.info(f"Dropped {stats.n_out_of_window} record(s) outside the study window")
        clean = clean[inside]

    before = len(clean)
    clean = clean.drop_duplicates(subset=["user_id", "timestamp", "station_id"], keep="first")
    stats.n_duplicates = before - len(clean)
    clean = clean.sort_values(["user_id", "timestamp"], kind="mergesort")

    by_user: Dict[str, List[Record]] = {}
    for user_id, group in clean.groupby("user_id", sort=True):
        by_user[str(user_id)] = [
            Record(str(user_id), int(t), float(x), float(y), str(s))
            for t, x, y, s in zip(group["timestamp"], group["lon"], group["lat"], group["station_id"])
        ]
    logger.info(
        f"✅ Parsed {len(clean)} XDR record(s) for {len(by_user)} user(s) "
        f"({stats.n_duplicates} duplicate(s) collapsed)"
    )
    return XdrDataset(by_user=by_user, stats=stats)


def parse_stations(stream, max_malformed_share: float = 0.01) -> List[BaseStation]:
    frame = _read_table(stream, STATION_COLUMNS, "stations")
    stats = ParseStats(n_rows=len(frame))
    ok = _non_empty(frame, "station_id", stats)
    lon, lat, coord_ok = _coords(frame, stats)
    ok &= coord_ok
    seen = set()
    stations = []
    for i in np.flatnonzero(ok):
        sid = frame["station_id"].iat[i].strip()
        if sid in seen:
            stats.reject(int(i) + 2, f"duplicate station_id {sid!r}")
            continue
        seen.add(sid)
        stations.append(BaseStation(sid, float(lon[i]), float(lat[i])))
    _enforce_malformed_limit(stats, max_malformed_share, "stations")
    return stations


def parse_pois(stream, max_malformed_share: float = 0.01) -> List[POI]:
    frame = _read_table(stream, POI_COLUMNS, "pois")
    stats = ParseStats(n_rows=len(frame))
    ok = _non_empty(frame, "poi_id", stats)
    lon, lat, coord_ok = _coords(frame, stats)
    ok &= coord_ok
    _enforce_malformed_limit(stats, max_malformed_share, "pois")
    return [
        POI(frame["poi_id"].iat[i].strip(), float(lon[i]), float(lat[i]), frame["category"].iat[i].strip())
        for i in np.flatnonzero(ok)
    ]


def parse_checkins(
    stream, utc_offset_hours: float = 8.0, max_malformed_share: float = 0.01
) -> Dict[str, List[CheckIn]]:
    frame = _read_table(stream, CHECKIN_COLUMNS, "checkins")
    stats = ParseStats(n_rows=len(frame))
    ok = _non_empty(frame, "user_id", stats)
    ts, ts_ok = _timestamps(frame["timestamp"], utc_offset_hours, stats)
    ok &= ts_ok
    _enforce_malformed_limit(stats, max_malformed_share, "checkins")

    grouped: Dict[str, List[CheckIn]] = defaultdict(list)
    for i in np.flatnonzero(ok):
        user = frame["user_id"].iat[i].strip()
        grouped[user].append(CheckIn(user, int(ts[i]), frame["category"].iat[i].strip()))
    return {u: sorted(v, key=lambda c: c.timestamp) for u, v in sorted(grouped.items())}


def map_categories(items: Iterable, category_map: CategoryMap) -> Dict[str, int]:
    """Count how many POIs/check-ins land in each activity type; unknowns are reported."""
    counts: Dict[str, int] = defaultdict(int)
    for item in items:
        counts[category_map.lookup(item.category).value] += 1
    category_map.report_unknown()
    return dict(counts)


# ---------------------------
# Day filters
# ---------------------------
def filter_sparse_days(
    timestamps: Iterable[int],
    utc_offset_hours: float = 8.0,
    slot_minutes: int = 30,
    min_slots: int = 12,
) -> bool:
    """Keep a user-day iff at least min_slots distinct local slots hold a record."""
    slot_s = slot_minutes * 60
    slots = {seconds_of_day(t, utc_offset_hours) // slot_s for t in timestamps}
    return len(slots) >= min_slots


def prepare_user_records(
    records: Sequence[Record],
    utc_offset_hours: float = 8.0,
    exclude_weekends: bool = True,
    slot_minutes: int = 30,
    min_slots: int = 12,
) -> Tuple[List[Record], Dict[date, str]]:
    """Drop weekend days (flag) and sparse days; returns kept records and the per-day verdicts."""
    by_day: Dict[date, List[Record]] = defaultdict(list)
    for r in records:
        by_day[local_day(r.timestamp, utc_offset_hours)].append(r)

    kept: List[Record] = []
    verdicts: Dict[date, str] = {}
    for day in sorted(by_day):
        day_records = by_day[day]
        if exclude_weekends and is_weekend(day):
            verdicts[day] = "weekend"
        elif not filter_sparse_days((r.timestamp for r in day_records), utc_offset_hours, slot_minutes, min_slots):
            verdicts[day] = "sparse"
        else:
            verdicts[day] = "kept"
            kept.extend(day_records)
    return kept, verdicts


def remove_visitors(
    checkins_by_user: Dict[str, List[CheckIn]], min_span_days: float = 14.0
) -> Dict[str, List[CheckIn]]:
    """Drop LBSN users whose first-to-last check-in span is shorter than min_span_days."""
    min_span = min_span_days * SECONDS_PER_DAY
    kept = {}
    for user, checkins in checkins_by_user.items():
        if not checkins:
            continue
        times = [c.timestamp for c in checkins]
        if max(times) - min(times) >= min_span:
            kept[user] = checkins
    logger.info(f"Visitor filter kept {len(kept)}/{len(checkins_by_user)} check-in user(s)")
    return kept


# ---------------------------
# Nearest-station index
# ---------------------------
class StationIndex:
    """
    Uniform grid over projected station coordinates. Queries expand ring by
    ring until no unseen cell can hold a closer station, so results equal a
    linear scan; the cell size only affects speed.
    """

    def __init__(self, stations: Sequence[BaseStation], projection: Projection, cell_m: float = 1000.0):
        if cell_m <= 0:
            raise ValueError("cell_m must be > 0")
        self.stations: Tuple[BaseStation, ...] = tuple(stations)
        self.projection = projection
        self.cell_m = float(cell_m)
        self.by_id = {s.station_id: i for i, s in enumerate(self.stations)}
        if self.stations:
            self.xy = projection.project_arrays([s.lon for s in self.stations], [s.lat for s in self.stations])
        else:
            self.xy = np.zeros((0, 2))
        self.grid: Dict[Tuple[int, int], List[int]] = defaultdict(list)
        for i, (x, y) in enumerate(self.xy):
            self.grid[self._cell(x, y)].append(i)
        if self.grid:
            keys = np.array(list(self.grid.keys()))
            self._lo = keys.min(axis=0)
            self._hi = keys.max(axis=0)

    def __len__(self) -> int:
        return len(self.stations)

    def _cell(self, x: float, y: float) -> Tuple[int, int]:
        return (int(math.floor(x / self.cell_m)), int(math.floor(y / self.cell_m)))

    def point_of(self, station_id: str) -> ProjectedPoint:
        x, y = self.xy[self.by_id[station_id]]
        return ProjectedPoint(float(x), float(y))

    def _ring(self, ci: int, cj: int, r: int):
        if r == 0:
            yield (ci, cj)
            return
        for i in range(ci - r, ci + r + 1):
            yield (i, cj - r)
            yield (i, cj + r)
        for j in range(cj - r + 1, cj + r):
            yield (ci - r, j)
            yield (ci + r, j)

    def nearest_k(self, p: ProjectedPoint, k: int = 1) -> List[BaseStation]:
        """k nearest stations by Euclidean distance, ties broken by station_id."""
        if not self.stations:
            raise IngestError("nearest-station query on an empty StationIndex")
        k = min(k, len(self.stations))
        ci, cj = self._cell(p.x, p.y)
        max_r = int(max(abs(ci - self._lo[0]), abs(ci - self._hi[0]), abs(cj - self._lo[1]), abs(cj - self._hi[1])))
        found: List[Tuple[float, str, int]] = []
        r = 0
        while True:
            for cell in self._ring(ci, cj, r):
                for idx in self.grid.get(cell, ()):
                    dx = self.xy[idx, 0] - p.x
                    dy = self.xy[idx, 1] - p.y
                    found.append((dx * dx + dy * dy, self.stations[idx].station_id, idx))
            if r >= max_r:
                break
            if len(found) >= k:
                found.sort()
                # unseen stations are at least r * cell_m away
                bound = r * self.cell_m
                if found[k - 1][0] < bound * bound:
                    break
            r += 1
        found.sort()
        return [self.stations[idx] for _, _, idx in found[:k]]

    def nearest(self, p: ProjectedPoint) -> BaseStation:
        return self.nearest_k(p, 1)[0]


def nearest_station(p: ProjectedPoint, idx: StationIndex) -> BaseStation:
    return idx.nearest(p)

# services/staylabel.py: home/work detection, resident filter, stay labels,
# per-day chains and trip purposes.

from collections import defaultdict
from dataclasses import dataclass, replace
from datetime import date, timedelta
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from services.config import LabelConfig
from services.core_model import (
    SECONDS_PER_DAY,
    ActivityChain,
    PlaceLabel,
    ProjectedPoint,
    Projection,
    StayPoint,
    Trip,
    TripPurpose,
    day_start_epoch,
    euclidean_distance,
    is_weekend,
    local_day,
    seconds_of_day,
)
from services.helpers import get_logger

logger = get_logger("staylabel")


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    home: Optional[ProjectedPoint] = None
    work: Optional[ProjectedPoint] = None
    is_resident: bool = False
    is_commuter: bool = False
    home_place: Optional[int] = None
    work_place: Optional[int] = None
    home_station: Optional[str] = None
    work_station: Optional[str] = None
    home_share: float = 0.0
    n_records: int = 0

    def __post_init__(self):
        if self.is_resident and self.home is None:
            raise ValueError(f"resident {self.user_id} without a home")
        if self.is_commuter and self.work is None:
            raise ValueError(f"commuter {self.user_id} without a work place")


def profile_to_dict(profile: UserProfile, projection: Optional[Projection] = None) -> Dict:
    def point(p: Optional[ProjectedPoint]):
        if p is None:
            return None
        row = {"x": round(p.x, 3), "y": round(p.y, 3)}
        if projection is not None:
            lon, lat = projection.inverse(p)
            row.update(lon=round(lon, 7), lat=round(lat, 7))
        return row

    return {
        "user_id": profile.user_id,
        "home": point(profile.home),
        "work": point(profile.work),
        "is_resident": profile.is_resident,
        "is_commuter": profile.is_commuter,
        "home_place": profile.home_place,
        "work_place": profile.work_place,
        "home_station": profile.home_station,
        "work_station": profile.work_station,
        "home_share": round(profile.home_share, 6),
        "n_records": profile.n_records,
    }


def profile_from_dict(row: Dict) -> UserProfile:
    def point(d):
        return None if d is None else ProjectedPoint(float(d["x"]), float(d["y"]))

    return UserProfile(
        user_id=str(row["user_id"]),
        home=point(row.get("home")),
        work=point(row.get("work")),
        is_resident=bool(row.get("is_resident", False)),
        is_commuter=bool(row.get("is_commuter", False)),
        home_place=row.get("home_place"),
        work_place=row.get("work_place"),
        home_station=row.get("home_station"),
        work_station=row.get("work_station"),
        home_share=float(row.get("home_share", 0.0)),
        n_records=int(row.get("n_records", 0)),
    )


# ---------------------------
# Window overlap
# ---------------------------
def window_overlap(
    arrival: int,
    departure: int,
    start_hour: float,
    end_hour: float,
    utc_offset_hours: float,
    weekdays_only: bool = False,
) -> int:
    """
    Seconds of [arrival, departure] falling inside the daily local window
    [start_hour, end_hour). A window with start > end wraps past midnight and
    belongs to the day it starts on.
    """
    wraps = start_hour > end_hour
    total = 0
    day = local_day(arrival, utc_offset_hours) - timedelta(days=1)
    last = local_day(departure, utc_offset_hours)
    while day <= last:
        if not (weekdays_only and is_weekend(day)):
            base = day_start_epoch(day, utc_offset_hours)
            w0 = base + int(start_hour * 3600)
            w1 = base + int(end_hour * 3600) + (SECONDS_PER_DAY if wraps else 0)
            total += max(0, min(departure, w1) - max(arrival, w0))
        day += timedelta(days=1)
    return total


def _weight(stay: StayPoint, overlap: int, mode: str) -> float:
    if mode == "records":
        # records spread evenly over the stay
        if stay.duration == 0:
            return float(stay.n_records) if overlap > 0 else 0.0
        return stay.n_records * overlap / stay.duration
    return float(overlap)


def _pick_place(
    scores: Dict[int, float], totals: Dict[int, float], exclude: Optional[int] = None
) -> Optional[int]:
    ranked = [p for p, s in scores.items() if s > 0 and p != exclude]
    if not ranked:
        return None
    return min(ranked, key=lambda p: (-scores[p], -totals.get(p, 0.0), p))


def _place_totals(stays: Sequence[StayPoint], mode: str) -> Dict[int, float]:
    totals: Dict[int, float] = defaultdict(float)
    for s in stays:
        totals[s.place_id] += s.n_records if mode == "records" else s.duration
    return totals


# ---------------------------
# Home / resident / work
# ---------------------------
def detect_home(
    stays: Sequence[StayPoint], cfg: LabelConfig = LabelConfig(), utc_offset_hours: float = 8.0
) -> Optional[int]:
    """Place with the most night-window presence; None without any night-time stay."""
    scores: Dict[int, float] = defaultdict(float)
    for s in stays:
        overlap = window_overlap(s.arrival, s.departure, cfg.night_start_hour, cfg.night_end_hour, utc_offset_hours)
        if s.duration == 0 and overlap == 0:
            overlap = int(_instant_in_window(s.arrival, cfg.night_start_hour, cfg.night_end_hour, utc_offset_hours))
        scores[s.place_id] += _weight(s, overlap, cfg.frequency_mode)
    return _pick_place(scores, _place_totals(stays, cfg.frequency_mode))


def _instant_in_window(ts: int, start_hour: float, end_hour: float, utc_offset_hours: float) -> bool:
    sod = seconds_of_day(ts, utc_offset_hours)
    lo, hi = int(start_hour * 3600), int(end_hour * 3600)
    if lo <= hi:
        return lo <= sod < hi
    return sod >= lo or sod < hi


def filter_resident(stays: Sequence[StayPoint], home_place: Optional[int], min_share: float = 0.30) -> bool:
    """Resident iff the home place holds at least min_share of the user's records."""
    if home_place is None:
        return False
    total = sum(s.n_records for s in stays)
    if total == 0:
        return False
    at_home = sum(s.n_records for s in stays if s.place_id == home_place)
    return at_home / total >= min_share


def _study_weeks(stays: Sequence[StayPoint], utc_offset_hours: float) -> float:
    first = local_day(min(s.arrival for s in stays), utc_offset_hours)
    last = local_day(max(s.departure for s in stays), utc_offset_hours)
    return ((last - first).days + 1) / 7.0


def _visit_days(stays: Iterable[StayPoint], utc_offset_hours: float) -> Set[date]:
    days: Set[date] = set()
    for s in stays:
        d = local_day(s.arrival, utc_offset_hours)
        last = local_day(s.departure, utc_offset_hours)
        while d <= last:
            days.add(d)
            d += timedelta(days=1)
    return days


def detect_work(
    stays: Sequence[StayPoint],
    home_place: Optional[int],
    cfg: LabelConfig = LabelConfig(),
    utc_offset_hours: float = 8.0,
    study_weeks: Optional[float] = None,
) -> Tuple[Optional[int], Optional[int]]:
    """
    Returns (work place, candidate). The candidate is the place other than
    home with the most weekday working-hours presence; it is kept as work
    only if it lies far enough from home and is visited often enough.
    """
    if not stays:
        return None, None
    scores: Dict[int, float] = defaultdict(float)
    for s in stays:
        if s.place_id == home_place:
            continue
        overlap = window_overlap(
            s.arrival, s.departure, cfg.work_start_hour, cfg.work_end_hour, utc_offset_hours, weekdays_only=True
        )
        scores[s.place_id] += _weight(s, overlap, cfg.frequency_mode)
    candidate = _pick_place(scores, _place_totals(stays, cfg.frequency_mode), exclude=home_place)
    if candidate is None:
        return None, None

    centers = {s.place_id: s.center for s in stays}
    if home_place is not None and home_place in centers:
        if euclidean_distance(centers[home_place], centers[candidate]) < cfg.commuter_min_distance_m:
            return None, candidate

    weeks = study_weeks if study_weeks else _study_weeks(stays, utc_offset_hours)
    n_days = len(_visit_days((s for s in stays if s.place_id == candidate), utc_offset_hours))
    if n_days / weeks < cfg.work_min_days_per_week:
        return None, candidate
    return candidate, candidate


def _station_at(stays: Sequence[StayPoint], place: Optional[int]) -> Optional[str]:
    if place is None:
        return None
    counts: Dict[str, int] = defaultdict(int)
    for s in stays:
        if s.place_id == place:
            counts[s.station_id] += s.n_records
    return min(counts, key=lambda k: (-counts[k], k)) if counts else None


def build_profile(
    user_id: str,
    stays: Sequence[StayPoint],
    cfg: LabelConfig = LabelConfig(),
    utc_offset_hours: float = 8.0,
    study_weeks: Optional[float] = None,
) -> UserProfile:
    n_records = sum(s.n_records for s in stays)
    home_place = detect_home(stays, cfg, utc_offset_hours)
    if home_place is None:
        return UserProfile(user_id=user_id, n_records=n_records)

    centers = {s.place_id: s.center for s in stays}
    at_home = sum(s.n_records for s in stays if s.place_id == home_place)
    share = at_home / n_records if n_records else 0.0
    resident = filter_resident(stays, home_place, cfg.residency_min_share)
    work_place = None
    if resident:
        work_place, _ = detect_work(stays, home_place, cfg, utc_offset_hours, study_weeks)

    return UserProfile(
        user_id=user_id,
        home=centers[home_place],
        work=centers[work_place] if work_place is not None else None,
        is_resident=resident,
        is_commuter=work_place is not None,
        home_place=home_place,
        work_place=work_place,
        home_station=_station_at(stays, home_place),
        work_station=_station_at(stays, work_place),
        home_share=share,
        n_records=n_records,
    )


# ---------------------------
# Labels and chains
# ---------------------------
def label_stays(stays: Sequence[StayPoint], profile: UserProfile) -> List[StayPoint]:
    out = []
    for s in stays:
        if not s.is_stay:
            label = PlaceLabel.UNLABELED
        elif profile.home_place is not None and s.place_id == profile.home_place:
            label = PlaceLabel.HOME
        elif profile.work_place is not None and s.place_id == profile.work_place:
            label = PlaceLabel.WORK
        else:
            label = PlaceLabel.OTHER
        out.append(s if s.label is label else replace(s, label=label))
    return out


def trip_purpose(origin: PlaceLabel, destination: PlaceLabel) -> TripPurpose:
    ends = {origin, destination}
    if ends == {PlaceLabel.HOME, PlaceLabel.WORK}:
        return TripPurpose.HBW
    if ends == {PlaceLabel.HOME, PlaceLabel.OTHER}:
        return TripPurpose.HBO
    return TripPurpose.NHB


def label_trip_purposes(chain: ActivityChain) -> ActivityChain:
    trips = [replace(t, purpose=trip_purpose(t.origin.label, t.destination.label)) for t in chain.trips]
    return chain.with_stays(chain.stays, trips)


def split_at_midnight(stay: StayPoint, utc_offset_hours: float) -> List[Tuple[date, StayPoint]]:
    """
    Cut a stay at local midnights. Pieces keep the parent's kind and carry its
    full span; a piece ends exactly where the next begins.
    """
    first = local_day(stay.arrival, utc_offset_hours)
    last = local_day(stay.departure, utc_offset_hours)
    if first == last:
        return [(first, stay)]
    pieces = []
    day = first
    while day <= last:
        start = max(stay.arrival, day_start_epoch(day, utc_offset_hours))
        end = min(stay.departure, day_start_epoch(day + timedelta(days=1), utc_offset_hours))
        if end > start or day == first:
            pieces.append(
                (day, replace(stay, arrival=start, departure=end, full_arrival=stay.arrival, full_departure=stay.departure))
            )
        day += timedelta(days=1)
    return pieces


def connect_trips(stays: Sequence[StayPoint]) -> List[Trip]:
    """Trips join consecutive Stays at different places; pass-bys in between are skipped."""
    only = [s for s in stays if s.is_stay]
    return [Trip(a, b) for a, b in zip(only, only[1:]) if a.place_id != b.place_id]


def build_chains(
    stays: Sequence[StayPoint],
    utc_offset_hours: float = 8.0,
    weekdays_only: bool = True,
    days: Optional[Set[date]] = None,
) -> List[ActivityChain]:
    """One ActivityChain per local day, with trips labelled by purpose."""
    if not stays:
        return []
    by_day: Dict[date, List[StayPoint]] = defaultdict(list)
    for s in sorted(stays, key=lambda s: s.arrival):
        for day, piece in split_at_midnight(s, utc_offset_hours):
            by_day[day].append(piece)

    user_id = stays[0].user_id
    chains = []
    for day in sorted(by_day):
        if weekdays_only and is_weekend(day):
            continue
        if days is not None and day not in days:
            continue
        pieces = by_day[day]
        chain = ActivityChain(user_id=user_id, day=day, stays=tuple(pieces), trips=tuple(connect_trips(pieces)))
        chains.append(label_trip_purposes(chain))
    return chains

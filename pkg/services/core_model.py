# services/core_model.py: shared domain types, projection and the activity taxonomy.

import math
import re
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta, timezone
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from services.errors import CoordinateError
from services.helpers import get_logger

logger = get_logger("core_model")

EARTH_RADIUS_M = 6_371_000.0
SECONDS_PER_DAY = 86_400


def _norm_key(text: str) -> str:
    return re.sub(r"[^a-z0-9]", "", str(text).lower())


# ---------------------------
# Taxonomy
# ---------------------------
class ActivityType(str, Enum):
    # declaration order is the tie-break order everywhere
    SHOPPING = "Shopping"
    DAILY_LIFE = "DailyLife"
    TRANSPORT = "Transport"
    DRINK_EAT = "DrinkEat"
    LEISURE_SPORT = "LeisureSport"
    EDUCATION = "Education"
    HOME = "Home"
    WORK = "Work"
    OTHER = "Other"

    @classmethod
    def parse(cls, text: str) -> "ActivityType":
        """Accepts 'DrinkEat', 'Drink & Eat', 'drink_eat', 'DRINK_EAT' ..."""
        key = _norm_key(text)
        for member in cls:
            if key in (_norm_key(member.value), _norm_key(member.name)):
                return member
        raise ValueError(f"unknown activity type: {text!r}")


ACTIVITY_ORDER: Tuple[ActivityType, ...] = tuple(ActivityType)
INFERABLE_TYPES: Tuple[ActivityType, ...] = tuple(
    t for t in ActivityType if t not in (ActivityType.HOME, ActivityType.WORK)
)


class StayKind(str, Enum):
    STAY = "Stay"
    PASS_BY = "PassBy"


class PlaceLabel(str, Enum):
    HOME = "Home"
    WORK = "Work"
    OTHER = "Other"
    UNLABELED = "Unlabeled"


class TripPurpose(str, Enum):
    HBW = "HBW"
    HBO = "HBO"
    NHB = "NHB"


# ---------------------------
# Value objects
# ---------------------------
@dataclass(frozen=True)
class ProjectedPoint:
    x: float
    y: float


@dataclass(frozen=True)
class Record:
    user_id: str
    timestamp: int
    lon: float
    lat: float
    station_id: str


@dataclass(frozen=True)
class BaseStation:
    station_id: str
    lon: float
    lat: float


@dataclass(frozen=True)
class POI:
    poi_id: str
    lon: float
    lat: float
    category: str


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    timestamp: int
    category: str


# ---------------------------
# Coordinates
# ---------------------------
def validate_lonlat(lon: float, lat: float) -> None:
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise CoordinateError(f"non-finite coordinate ({lon}, {lat})")
    if not -180.0 <= lon <= 180.0:
        raise CoordinateError(f"longitude {lon} outside [-180, 180]")
    if not -90.0 <= lat <= 90.0:
        raise CoordinateError(f"latitude {lat} outside [-90, 90]")


def project(lon: float, lat: float, origin: Tuple[float, float]) -> ProjectedPoint:
    """Local equirectangular projection about origin=(lon0, lat0), in meters."""
    lon0, lat0 = origin
    validate_lonlat(lon, lat)
    validate_lonlat(lon0, lat0)
    k = EARTH_RADIUS_M * math.pi / 180.0
    return ProjectedPoint(
        x=k * (lon - lon0) * math.cos(math.radians(lat0)),
        y=k * (lat - lat0),
    )


def unproject(point: ProjectedPoint, origin: Tuple[float, float]) -> Tuple[float, float]:
    lon0, lat0 = origin
    k = EARTH_RADIUS_M * math.pi / 180.0
    lon = lon0 + point.x / (k * math.cos(math.radians(lat0)))
    lat = lat0 + point.y / k
    return lon, lat


def euclidean_distance(a: ProjectedPoint, b: ProjectedPoint) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class Projection:
    origin_lon: float
    origin_lat: float

    @property
    def origin(self) -> Tuple[float, float]:
        return (self.origin_lon, self.origin_lat)

    @classmethod
    def from_stations(cls, stations: Sequence[BaseStation]) -> "Projection":
        if not stations:
            raise CoordinateError("cannot place a projection origin without stations")
        return cls(
            origin_lon=float(np.mean([s.lon for s in stations])),
            origin_lat=float(np.mean([s.lat for s in stations])),
        )

    def project(self, lon: float, lat: float) -> ProjectedPoint:
        return project(lon, lat, self.origin)

    def inverse(self, point: ProjectedPoint) -> Tuple[float, float]:
        return unproject(point, self.origin)

    def project_arrays(self, lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
        """Vectorised project(); returns an (n, 2) array of x/y meters."""
        k = EARTH_RADIUS_M * math.pi / 180.0
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        x = k * (lon - self.origin_lon) * math.cos(math.radians(self.origin_lat))
        y = k * (lat - self.origin_lat)
        return np.column_stack([x, y])


# ---------------------------
# Local time
# ---------------------------
def local_seconds(ts: int, utc_offset_hours: float) -> int:
    return int(ts) + int(round(utc_offset_hours * 3600))


def local_day(ts: int, utc_offset_hours: float) -> date:
    return date(1970, 1, 1) + timedelta(days=local_seconds(ts, utc_offset_hours) // SECONDS_PER_DAY)


def seconds_of_day(ts: int, utc_offset_hours: float) -> int:
    return local_seconds(ts, utc_offset_hours) % SECONDS_PER_DAY


def day_start_epoch(day: date, utc_offset_hours: float) -> int:
    """Epoch seconds of local midnight at the start of day."""
    return (day - date(1970, 1, 1)).days * SECONDS_PER_DAY - int(round(utc_offset_hours * 3600))


def is_weekend(day: date) -> bool:
    return day.weekday() >= 5


def parse_timestamp(value, utc_offset_hours: float) -> int:
    """
    Epoch seconds or ISO-8601. ISO strings without an offset are read as
    local time at the configured offset.
    """
    if isinstance(value, (int, np.integer)):
        return int(value)
    text = str(value).strip()
    if re.fullmatch(r"[+-]?\d+(\.\d+)?", text):
        return int(float(text))
    parsed = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone(timedelta(hours=utc_offset_hours)))
    return int(parsed.timestamp())


# ---------------------------
# Stays and chains
# ---------------------------
@dataclass(frozen=True)
class StayPoint:
    user_id: str
    center: ProjectedPoint
    arrival: int
    departure: int
    kind: StayKind
    station_id: str
    place_id: int = -1
    n_records: int = 1
    label: PlaceLabel = PlaceLabel.UNLABELED
    activity: Optional[ActivityType] = None
    stay_id: int = 0
    # set on pieces cut at local midnight: the span of the uncut stay
    full_arrival: Optional[int] = None
    full_departure: Optional[int] = None

    def __post_init__(self):
        if self.departure < self.arrival:
            raise ValueError(f"stay departs before it arrives ({self.arrival} > {self.departure})")
        if self.activity is not None and self.kind is not StayKind.STAY:
            raise ValueError("only Stays carry an activity")

    @property
    def duration(self) -> int:
        return self.departure - self.arrival

    @property
    def is_stay(self) -> bool:
        return self.kind is StayKind.STAY

    @property
    def span(self) -> Tuple[int, int]:
        if self.full_arrival is None:
            return (self.arrival, self.departure)
        return (self.full_arrival, self.full_departure)

    @property
    def is_continuation(self) -> bool:
        return self.full_arrival is not None and self.arrival != self.full_arrival


@dataclass(frozen=True)
class Trip:
    origin: StayPoint
    destination: StayPoint
    purpose: Optional[TripPurpose] = None

    @property
    def departure(self) -> int:
        return self.origin.departure

    @property
    def arrival(self) -> int:
        return self.destination.arrival


@dataclass(frozen=True)
class ActivityChain:
    user_id: str
    day: date
    stays: Tuple[StayPoint, ...] = ()
    trips: Tuple[Trip, ...] = ()

    def __post_init__(self):
        for a, b in zip(self.stays, self.stays[1:]):
            if b.arrival < a.departure:
                raise ValueError(f"overlapping stays in chain {self.user_id}/{self.day}")

    def with_stays(self, stays: Sequence[StayPoint], trips: Sequence[Trip]) -> "ActivityChain":
        return replace(self, stays=tuple(stays), trips=tuple(trips))


def stay_to_dict(stay: StayPoint, projection: Optional[Projection] = None) -> Dict:
    row = {
        "user_id": stay.user_id,
        "x": round(stay.center.x, 3),
        "y": round(stay.center.y, 3),
        "arrival": stay.arrival,
        "departure": stay.departure,
        "kind": stay.kind.value,
        "station_id": stay.station_id,
        "place_id": stay.place_id,
        "n_records": stay.n_records,
        "label": stay.label.value,
        "activity": stay.activity.value if stay.activity else None,
        "stay_id": stay.stay_id,
    }
    if stay.full_arrival is not None:
        row["full_arrival"] = stay.full_arrival
        row["full_departure"] = stay.full_departure
    if projection is not None:
        lon, lat = projection.inverse(stay.center)
        row["lon"] = round(lon, 7)
        row["lat"] = round(lat, 7)
    return row


def stay_from_dict(row: Dict) -> StayPoint:
    return StayPoint(
        user_id=str(row["user_id"]),
        center=ProjectedPoint(float(row["x"]), float(row["y"])),
        arrival=int(row["arrival"]),
        departure=int(row["departure"]),
        kind=StayKind(row["kind"]),
        station_id=str(row["station_id"]),
        place_id=int(row.get("place_id", -1)),
        n_records=int(row.get("n_records", 1)),
        label=PlaceLabel(row.get("label", PlaceLabel.UNLABELED.value)),
        activity=ActivityType(row["activity"]) if row.get("activity") else None,
        stay_id=int(row.get("stay_id", 0)),
        full_arrival=row.get("full_arrival"),
        full_departure=row.get("full_departure"),
    )


def chain_to_dict(chain: ActivityChain, projection: Optional[Projection] = None) -> Dict:
    index = {id(s): i for i, s in enumerate(chain.stays)}

    def position(stay):
        found = index.get(id(stay))
        return found if found is not None else chain.stays.index(stay)

    return {
        "user_id": chain.user_id,
        "day": chain.day.isoformat(),
        "stays": [stay_to_dict(s, projection) for s in chain.stays],
        "trips": [
            {
                "origin": position(t.origin),
                "destination": position(t.destination),
                "purpose": t.purpose.value if t.purpose else None,
            }
            for t in chain.trips
        ],
    }


def chain_from_dict(row: Dict) -> ActivityChain:
    stays = tuple(stay_from_dict(s) for s in row["stays"])
    trips = tuple(
        Trip(
            origin=stays[t["origin"]],
            destination=stays[t["destination"]],
            purpose=TripPurpose(t["purpose"]) if t.get("purpose") else None,
        )
        for t in row.get("trips", [])
    )
    return ActivityChain(
        user_id=str(row["user_id"]),
        day=date.fromisoformat(row["day"]),
        stays=stays,
        trips=trips,
    )


# ---------------------------
# Category mapping (raw POI categories to activity types, kept as a CSV)
# ---------------------------
@dataclass
class CategoryMap:
    mapping: Dict[str, ActivityType]
    unknown: Dict[str, int] = field(default_factory=dict)
    # normalized key -> category as spelled in the file
    spelled: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str) -> "CategoryMap":
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        missing = {"raw_category", "activity_type"} - set(frame.columns)
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        mapping: Dict[str, ActivityType] = {}
        spelled: Dict[str, str] = {}
        for raw, activity in zip(frame["raw_category"], frame["activity_type"]):
            key = _norm_key(raw)
            if not key:
                continue
            parsed = ActivityType.parse(activity)
            if key in mapping and mapping[key] is not parsed:
                raise ValueError(f"{path}: category {raw!r} maps to both {mapping[key].value} and {parsed.value}")
            mapping[key] = parsed
            spelled.setdefault(key, raw.strip())
        logger.info(f"Loaded {len(mapping)} category mappings from {path}")
        return cls(mapping=mapping, spelled=spelled)

    def lookup(self, raw: str) -> ActivityType:
        key = _norm_key(raw)
        found = self.mapping.get(key)
        if found is None:
            # reported, never dropped
            self.unknown[str(raw)] = self.unknown.get(str(raw), 0) + 1
            return ActivityType.OTHER
        return found

    def raw_categories(self, activity: ActivityType) -> List[str]:
        return sorted(self.spelled.get(k, k) for k, v in self.mapping.items() if v is activity)

    def report_unknown(self) -> None:
        if self.unknown:
            listed = ", ".join(f"{k} ({n})" for k, n in sorted(self.unknown.items()))
            logger.warning(f"⚠️ Unmapped categories counted as Other: {listed}")


def iter_days(first: date, last: date) -> Iterable[date]:
    d = first
    while d <= last:
        yield d
        d += timedelta(days=1)

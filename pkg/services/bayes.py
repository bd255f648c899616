# services/bayes.py: activity inference for Other-labelled stays.
# Temporal profiles come from check-ins, type mixtures from the POIs around
# the stay's base station; the posterior combines both.

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from services.core_model import (
    INFERABLE_TYPES,
    SECONDS_PER_DAY,
    ActivityChain,
    ActivityType,
    CategoryMap,
    CheckIn,
    POI,
    PlaceLabel,
    StayPoint,
    Trip,
    euclidean_distance,
    seconds_of_day,
)
from services.errors import InferenceError
from services.helpers import get_logger

logger = get_logger("bayes")

OTHER_PROFESSION = "Other"


# ---------------------------
# Temporal profiles p(t|O)
# ---------------------------
@dataclass(frozen=True)
class TemporalProfile:
    probs: Mapping[ActivityType, np.ndarray]
    n_slots: int = 144
    counts: Mapping[ActivityType, int] = field(default_factory=dict)

    def p(self, activity: ActivityType, slot: int) -> float:
        return float(self.probs[activity][slot])

    def slot_of(self, ts: int, utc_offset_hours: float) -> int:
        return seconds_of_day(ts, utc_offset_hours) // (SECONDS_PER_DAY // self.n_slots)

    def to_frame(self) -> pd.DataFrame:
        rows = {a.value: self.probs[a] for a in INFERABLE_TYPES if a in self.probs}
        frame = pd.DataFrame.from_dict(rows, orient="index", columns=[f"slot_{i}" for i in range(self.n_slots)])
        frame.index.name = "activity_type"
        return frame

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: str) -> "TemporalProfile":
        frame = pd.read_csv(path, index_col="activity_type")
        probs = {ActivityType.parse(k): row.to_numpy(dtype=float) for k, row in frame.iterrows()}
        return cls(probs=probs, n_slots=frame.shape[1])


def build_temporal_profiles(
    checkins: Iterable[CheckIn],
    category_map: CategoryMap,
    utc_offset_hours: float = 8.0,
    n_slots: int = 144,
    pseudo_count: float = 1.0,
) -> TemporalProfile:
    """
    Histogram check-in local times per inferable type over n_slots bins,
    add pseudo_count to every bin and normalize.
    """
    slot_s = SECONDS_PER_DAY // n_slots
    hist = {a: np.zeros(n_slots) for a in INFERABLE_TYPES}
    for c in checkins:
        activity = category_map.lookup(c.category)
        if activity in hist:
            hist[activity][seconds_of_day(c.timestamp, utc_offset_hours) // slot_s] += 1
    category_map.report_unknown()

    probs, counts = {}, {}
    for activity, h in hist.items():
        counts[activity] = int(h.sum())
        if counts[activity] == 0:
            logger.warning(f"⚠️ No check-ins for {activity.value}; its temporal profile is uniform")
        smoothed = h + pseudo_count
        probs[activity] = smoothed / smoothed.sum()
    return TemporalProfile(probs=probs, n_slots=n_slots, counts=counts)


# ---------------------------
# Candidate POIs and type mixtures p(O|c)
# ---------------------------
def candidate_pois(station, pois: Sequence[POI], station_index, buffer_m: float = 900.0) -> List[POI]:
    """POIs inside the station's Voronoi cell and within buffer_m of it."""
    station_id = getattr(station, "station_id", station)
    origin = station_index.point_of(station_id)
    out = []
    for poi in pois:
        p = station_index.projection.project(poi.lon, poi.lat)
        if euclidean_distance(p, origin) > buffer_m:
            continue
        if station_index.nearest(p).station_id == station_id:
            out.append(poi)
    return out


@dataclass(frozen=True)
class TypeMixture:
    proportions: Mapping[ActivityType, float]
    n_candidates: int = 0

    @property
    def is_empty(self) -> bool:
        return self.n_candidates == 0


def type_mixture(candidates: Iterable, category_map: Optional[CategoryMap] = None) -> TypeMixture:
    """
    Share of each inferable type among the candidates (POIs or ActivityTypes).
    Home and Work candidates are not inferable and are left out.
    """
    counts: Dict[ActivityType, int] = defaultdict(int)
    for c in candidates:
        activity = c if isinstance(c, ActivityType) else category_map.lookup(c.category)
        if activity in INFERABLE_TYPES:
            counts[activity] += 1
    total = sum(counts.values())
    if total == 0:
        return TypeMixture(proportions={}, n_candidates=0)
    return TypeMixture(proportions={a: counts[a] / total for a in INFERABLE_TYPES if counts[a]}, n_candidates=total)


@dataclass
class CandidateTable:
    """Candidate POIs and type mixture of every station, computed in one pass over the POIs."""

    by_station: Dict[str, Tuple[POI, ...]]
    mixtures: Dict[str, TypeMixture]
    buffer_m: float = 900.0

    @classmethod
    def build(
        cls, pois: Sequence[POI], station_index, category_map: CategoryMap, buffer_m: float = 900.0
    ) -> "CandidateTable":
        grouped: Dict[str, List[POI]] = defaultdict(list)
        for poi in pois:
            p = station_index.projection.project(poi.lon, poi.lat)
            nearest = station_index.nearest(p)
            if euclidean_distance(p, station_index.point_of(nearest.station_id)) <= buffer_m:
                grouped[nearest.station_id].append(poi)
        by_station = {sid: tuple(v) for sid, v in sorted(grouped.items())}
        mixtures = {sid: type_mixture(v, category_map) for sid, v in by_station.items()}
        category_map.report_unknown()
        logger.info(f"Candidate POIs found for {len(by_station)}/{len(station_index)} station(s)")
        return cls(by_station=by_station, mixtures=mixtures, buffer_m=buffer_m)

    def candidates(self, station_id: str) -> Tuple[POI, ...]:
        return self.by_station.get(station_id, ())

    def mixture(self, station_id: str) -> TypeMixture:
        return self.mixtures.get(station_id, TypeMixture(proportions={}, n_candidates=0))


# ---------------------------
# Posterior p(O|c,t)
# ---------------------------
@dataclass(frozen=True)
class Posterior:
    probs: Mapping[ActivityType, float]
    argmax: ActivityType


def posterior(mixture: TypeMixture, slot: int, profiles: TemporalProfile) -> Posterior:
    if mixture.is_empty:
        raise InferenceError("posterior over an empty type mixture")
    if not 0 <= slot < profiles.n_slots:
        raise ValueError(f"slot {slot} outside [0, {profiles.n_slots})")
    weights = {a: profiles.p(a, slot) * mixture.proportions.get(a, 0.0) for a in INFERABLE_TYPES}
    total = sum(weights.values())
    if not total > 0:
        raise InferenceError(f"no temporal profile mass at slot {slot} for the candidate types")
    probs = {a: w / total for a, w in weights.items()}
    best = max(INFERABLE_TYPES, key=lambda a: (probs[a], -INFERABLE_TYPES.index(a)))
    return Posterior(probs=probs, argmax=best)


def infer_activity(
    stay: StayPoint,
    profiles: TemporalProfile,
    table: CandidateTable,
    utc_offset_hours: float = 8.0,
) -> Optional[ActivityType]:
    """Home and Work come from the labels; other Stays take the posterior argmax at their arrival slot."""
    if not stay.is_stay:
        return None
    if stay.label is PlaceLabel.HOME:
        return ActivityType.HOME
    if stay.label is PlaceLabel.WORK:
        return ActivityType.WORK
    mixture = table.mixture(stay.station_id)
    if mixture.is_empty:
        return ActivityType.OTHER
    # continuation pieces keep the arrival of the uncut stay
    slot = profiles.slot_of(stay.span[0], utc_offset_hours)
    return posterior(mixture, slot, profiles).argmax


def infer_chain(
    chain: ActivityChain, profiles: TemporalProfile, table: CandidateTable, utc_offset_hours: float = 8.0
) -> ActivityChain:
    stays = [replace(s, activity=infer_activity(s, profiles, table, utc_offset_hours)) for s in chain.stays]
    index = {id(s): i for i, s in enumerate(chain.stays)}

    def moved(stay):
        i = index.get(id(stay))
        return stays[i if i is not None else chain.stays.index(stay)]

    trips = [Trip(moved(t.origin), moved(t.destination), t.purpose) for t in chain.trips]
    return chain.with_stays(stays, trips)


def infer_chains(
    chains: Sequence[ActivityChain],
    profiles: TemporalProfile,
    table: CandidateTable,
    utc_offset_hours: float = 8.0,
) -> List[ActivityChain]:
    out = [infer_chain(c, profiles, table, utc_offset_hours) for c in chains]
    counts: Dict[str, int] = defaultdict(int)
    for c in out:
        for s in c.stays:
            if s.activity is not None:
                counts[s.activity.value] += 1
    logger.info(f"✅ Inferred activities: {dict(sorted(counts.items()))}")
    return out


def inferred_arrival_distribution(
    chains: Iterable[ActivityChain], n_slots: int = 144, utc_offset_hours: float = 8.0
) -> pd.DataFrame:
    """Per-type share of inferred stays arriving in each slot; types without stays are all zero."""
    slot_s = SECONDS_PER_DAY // n_slots
    counts = pd.DataFrame(
        0.0, index=[a.value for a in ActivityType], columns=[f"slot_{i}" for i in range(n_slots)]
    )
    for chain in chains:
        for s in chain.stays:
            if s.activity is None or s.is_continuation:
                continue
            counts.iat[list(ActivityType).index(s.activity), seconds_of_day(s.arrival, utc_offset_hours) // slot_s] += 1
    totals = counts.sum(axis=1).replace(0.0, 1.0)
    out = counts.div(totals, axis=0)
    out.index.name = "activity_type"
    return out


# ---------------------------
# Professions
# ---------------------------
@dataclass
class ProfessionMap:
    mapping: Dict[str, str]

    @classmethod
    def load(cls, path: str) -> "ProfessionMap":
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        missing = {"raw_category", "profession"} - set(frame.columns)
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        mapping = {
            raw.strip().lower(): prof.strip()
            for raw, prof in zip(frame["raw_category"], frame["profession"])
            if raw.strip()
        }
        logger.info(f"Loaded {len(mapping)} profession mappings covering {len(set(mapping.values()))} group(s)")
        return cls(mapping=mapping)

    def lookup(self, raw: str) -> Optional[str]:
        return self.mapping.get(str(raw).strip().lower())

    @property
    def groups(self) -> List[str]:
        return sorted(set(self.mapping.values()))


def profession_from_candidates(candidates: Sequence[POI], profession_map: ProfessionMap) -> str:
    """
    Largest profession group among the work station's candidate POIs.
    No mapped candidates, or a tie at the top, gives Other.
    """
    counts: Dict[str, int] = defaultdict(int)
    for poi in candidates:
        group = profession_map.lookup(poi.category)
        if group is not None:
            counts[group] += 1
    if not counts:
        return OTHER_PROFESSION
    ranked = sorted(counts.values(), reverse=True)
    if len(ranked) > 1 and ranked[0] == ranked[1]:
        return OTHER_PROFESSION
    return max(counts, key=counts.get)


def profession_distribution(professions: Mapping[str, str]) -> pd.Series:
    """Share of commuters per profession group."""
    series = pd.Series(list(professions.values()), dtype=object)
    if series.empty:
        return pd.Series(dtype=float, name="share")
    shares = series.value_counts(normalize=True).sort_index()
    shares.index.name = "profession"
    shares.name = "share"
    return shares


def infer_profession(work_station: Optional[str], table: CandidateTable, profession_map: ProfessionMap) -> str:
    if work_station is None:
        return OTHER_PROFESSION
    return profession_from_candidates(table.candidates(work_station), profession_map)

# services/synthgen.py: deterministic synthetic city: base-station sites,
# POIs, agents with ground-truth schedules, XDR records and check-ins in the
# exact input formats, plus scoring of pipeline output against the truth.

import math
import os
import shutil
from bisect import bisect_right
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from services.config import SynthConfig
from services.core_model import (
    INFERABLE_TYPES,
    SECONDS_PER_DAY,
    ActivityChain,
    ActivityType,
    BaseStation,
    POI,
    ProjectedPoint,
    Projection,
    StayPoint,
    day_start_epoch,
    euclidean_distance,
    is_weekend,
    local_day,
)
from services.errors import SynthError
from services.helpers import get_logger, parallel_map, write_jsonl, read_jsonl
from services.ingest import StationIndex

logger = get_logger("synthgen")

# raw spellings as they appear in data/category_map.csv
SYNTH_CATEGORIES: Dict[ActivityType, Tuple[str, ...]] = {
    ActivityType.SHOPPING: ("Shopping mall", "Supermarket", "Convenience store"),
    ActivityType.DAILY_LIFE: ("Bank", "Hospital", "Post office"),
    ActivityType.TRANSPORT: ("Subway", "Bus Station"),
    ActivityType.DRINK_EAT: ("Restaurant", "Cafe", "Fast food"),
    ActivityType.LEISURE_SPORT: ("Park", "Gym", "Movie Theater"),
    ActivityType.EDUCATION: ("School", "University", "Library"),
    ActivityType.OTHER: ("Building", "Event Space"),
}
WORK_CATEGORY = "Office"

# mean dwell per outing type, hours
DWELL_HOURS: Dict[ActivityType, float] = {
    ActivityType.SHOPPING: 1.25,
    ActivityType.DAILY_LIFE: 0.75,
    ActivityType.TRANSPORT: 0.5,
    ActivityType.DRINK_EAT: 1.0,
    ActivityType.LEISURE_SPORT: 1.5,
    ActivityType.EDUCATION: 2.0,
    ActivityType.OTHER: 1.0,
}

ARCHETYPES: Dict[str, Dict] = {
    "work_led": {"evening_prob": 0.25, "outings": (0, 1), "weights": {"DrinkEat": 3, "Shopping": 1, "LeisureSport": 1, "DailyLife": 1, "Transport": 1, "Education": 0.5, "Other": 0.5}},
    "leisure_led": {"evening_prob": 0.6, "outings": (1, 3), "weights": {"LeisureSport": 4, "DrinkEat": 2, "Shopping": 1, "DailyLife": 0.5, "Transport": 0.5, "Education": 0.5, "Other": 0.5}},
    "shopping_led": {"evening_prob": 0.6, "outings": (1, 3), "weights": {"Shopping": 4, "DrinkEat": 2, "LeisureSport": 1, "DailyLife": 0.5, "Transport": 0.5, "Education": 0.5, "Other": 0.5}},
    "home_led": {"evening_prob": 0.1, "outings": (0, 1), "weights": {"DailyLife": 2, "DrinkEat": 1, "Shopping": 1, "LeisureSport": 0.5, "Transport": 0.5, "Education": 0.5, "Other": 0.5}},
    "active": {"evening_prob": 0.8, "outings": (2, 4), "weights": {"DrinkEat": 1, "Shopping": 1, "LeisureSport": 1, "DailyLife": 1, "Transport": 1, "Education": 1, "Other": 1}},
}

EARLIEST_LEAVE_H = 6.5
LATEST_HOME_H = 21.75
LUNCH_PROB = 0.25
SITE_MIN_SPACING_M = 400.0
HOME_SPREAD_M = 100.0

# stream tags for per-agent generators
_SCHEDULE, _XDR, _CHECKINS = 1, 2, 3


# ---------------------------
# Types
# ---------------------------
@dataclass
class SynthWorld:
    projection: Projection
    stations: List[BaseStation]
    site_xy: np.ndarray
    site_types: List[ActivityType]
    pois: List[POI]
    poi_xy: np.ndarray
    poi_types: List[ActivityType]
    index: StationIndex

    def pois_of(self, activity: ActivityType) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.poi_types) if t is activity], dtype=int)


@dataclass(frozen=True)
class Dwell:
    facility_id: str
    activity: ActivityType
    x: float
    y: float
    arrival: int
    departure: int
    category: str = ""

    @property
    def point(self) -> ProjectedPoint:
        return ProjectedPoint(self.x, self.y)

    @property
    def duration(self) -> int:
        return self.departure - self.arrival


@dataclass
class AgentTruth:
    agent_id: str
    commuter: bool
    archetype: str
    home: ProjectedPoint
    work: Optional[ProjectedPoint]
    dwells: List[Dwell] = field(default_factory=list)


@dataclass
class GroundTruth:
    agents: List[AgentTruth]
    start_epoch: int
    study_days: int
    checkin_days: int

    @property
    def xdr_end(self) -> int:
        return self.start_epoch + self.study_days * SECONDS_PER_DAY

    @property
    def checkin_end(self) -> int:
        return self.start_epoch + self.checkin_days * SECONDS_PER_DAY


# ---------------------------
# World
# ---------------------------
def _disc_point(rng: np.random.Generator, radius: float) -> Tuple[float, float]:
    r = radius * math.sqrt(rng.random())
    a = 2 * math.pi * rng.random()
    return r * math.cos(a), r * math.sin(a)


def _place_sites(rng: np.random.Generator, n_sites: int, radius: float) -> np.ndarray:
    sites: List[Tuple[float, float]] = []
    attempts = 0
    while len(sites) < n_sites:
        attempts += 1
        if attempts > 2000 * n_sites:
            raise SynthError(f"could not place {n_sites} sites {SITE_MIN_SPACING_M:.0f} m apart within {radius:.0f} m")
        x, y = _disc_point(rng, radius)
        if all((x - sx) ** 2 + (y - sy) ** 2 >= SITE_MIN_SPACING_M**2 for sx, sy in sites):
            sites.append((x, y))
    return np.array(sites, dtype=float).reshape(-1, 2)


def generate_world(cfg: SynthConfig = SynthConfig()) -> SynthWorld:
    """
    Sites are spread over a disc with a minimum spacing; each carries
    cells_per_site jittered cells. Each site gets a dominant land use and
    POIs of a type settle near sites of that use with probability
    land_use_dominance.
    """
    if cfg.n_stations <= 0:
        raise SynthError("the synthetic world needs at least one base station")
    rng = np.random.default_rng([cfg.seed, 0, 0])
    projection = Projection(cfg.center_lon, cfg.center_lat)
    per_site = max(1, cfg.cells_per_site)
    n_sites = -(-cfg.n_stations // per_site)
    site_xy = _place_sites(rng, n_sites, cfg.radius_m)

    station_xy = []
    for s in range(n_sites):
        for _ in range(per_site):
            if len(station_xy) < cfg.n_stations:
                station_xy.append(site_xy[s] + rng.normal(0.0, cfg.cell_jitter_m, 2))
    station_xy = np.array(station_xy)
    stations = []
    for i, (x, y) in enumerate(station_xy):
        lon, lat = projection.inverse(ProjectedPoint(float(x), float(y)))
        stations.append(BaseStation(f"S{i:05d}", round(lon, 7), round(lat, 7)))

    counts = {ActivityType.parse(k): int(v) for k, v in cfg.n_pois.items()}
    types = [t for t in INFERABLE_TYPES if counts.get(t, 0) > 0]
    total = sum(counts.get(t, 0) for t in types)
    if types:
        weights = np.array([counts[t] for t in types], dtype=float) / total
        site_types = [types[i] for i in rng.choice(len(types), size=n_sites, p=weights)]
    else:
        site_types = [ActivityType.OTHER] * n_sites

    pois, poi_types = [], []
    for t in types:
        own = [i for i, st in enumerate(site_types) if st is t]
        for _ in range(counts[t]):
            if own and rng.random() < cfg.land_use_dominance:
                site = own[int(rng.integers(len(own)))]
            else:
                site = int(rng.integers(n_sites))
            x, y = site_xy[site] + rng.normal(0.0, cfg.poi_spread_m, 2)
            category = SYNTH_CATEGORIES[t][int(rng.integers(len(SYNTH_CATEGORIES[t])))]
            lon, lat = projection.inverse(ProjectedPoint(float(x), float(y)))
            pois.append(POI(f"P{len(pois):05d}", round(lon, 7), round(lat, 7), category))
            poi_types.append(t)

    # positions as written, so generator and pipeline agree to the digit
    index = StationIndex(stations, projection)
    poi_xy_arr = projection.project_arrays([p.lon for p in pois], [p.lat for p in pois]) if pois else np.zeros((0, 2))
    logger.info(f"✅ World: {len(stations)} station(s) on {n_sites} site(s), {len(pois)} POI(s)")
    return SynthWorld(
        projection=projection,
        stations=stations,
        site_xy=site_xy,
        site_types=site_types,
        pois=pois,
        poi_xy=poi_xy_arr,
        poi_types=poi_types,
        index=index,
    )


# ---------------------------
# Agents and schedules
# ---------------------------
def _travel_h(a: Tuple[float, float], b: Tuple[float, float], speed: float) -> float:
    return (math.hypot(a[0] - b[0], a[1] - b[1]) / speed + 300.0) / 3600.0


@dataclass
class _Segment:
    facility_id: str
    activity: ActivityType
    xy: Tuple[float, float]
    category: str
    arrival_h: float
    departure_h: float
    home_after: bool = False


class _Planner:
    def __init__(self, rng: np.random.Generator, world: SynthWorld, cfg: SynthConfig, agent: AgentTruth):
        self.rng = rng
        self.world = world
        self.cfg = cfg
        self.agent = agent
        self.home = (agent.home.x, agent.home.y)
        self.work = (agent.work.x, agent.work.y) if agent.work else None
        self.style = ARCHETYPES[agent.archetype]
        names = list(self.style["weights"])
        self.type_names = [ActivityType.parse(n) for n in names]
        w = np.array([self.style["weights"][n] for n in names], dtype=float)
        self.type_weights = w / w.sum()
        self.by_type = {t: world.pois_of(t) for t in INFERABLE_TYPES}

    def tt(self, a, b) -> float:
        return _travel_h(a, b, self.cfg.travel_speed_mps)

    def pick_type(self) -> ActivityType:
        return self.type_names[int(self.rng.choice(len(self.type_names), p=self.type_weights))]

    def pick_poi(self, activity: ActivityType, near, max_m: float = 4000.0) -> Optional[int]:
        idx = self.by_type.get(activity)
        if idx is None or len(idx) == 0:
            return None
        xy = self.world.poi_xy[idx]
        ok = np.hypot(xy[:, 0] - self.home[0], xy[:, 1] - self.home[1]) >= 600.0
        if self.work is not None:
            ok &= np.hypot(xy[:, 0] - self.work[0], xy[:, 1] - self.work[1]) >= 600.0
        close = ok & (np.hypot(xy[:, 0] - near[0], xy[:, 1] - near[1]) <= max_m)
        pool = idx[close] if close.any() else idx[ok] if ok.any() else idx
        return int(pool[int(self.rng.integers(len(pool)))])

    def duration_h(self, activity: ActivityType) -> float:
        mean = DWELL_HOURS[activity]
        return max(1.0 / 3.0, float(self.rng.normal(mean, 0.3 * mean)))

    def segment(self, poi: int, arrival: float, duration: float) -> _Segment:
        p = self.world.pois[poi]
        return _Segment(
            p.poi_id, self.world.poi_types[poi], tuple(self.world.poi_xy[poi]), p.category, arrival, arrival + duration
        )

    def commute_day(self) -> List[_Segment]:
        leave = float(np.clip(self.rng.normal(7.75, 0.5), EARLIEST_LEAVE_H, 9.5))
        arrive = leave + self.tt(self.home, self.work)
        end = arrive + float(np.clip(self.rng.normal(8.5, 0.5), 6.0, 10.5))
        work_id = f"work:{self.agent.agent_id}"
        segments = [_Segment(work_id, ActivityType.WORK, self.work, WORK_CATEGORY, arrive, end)]

        if self.rng.random() < LUNCH_PROB:
            poi = self.pick_poi(ActivityType.DRINK_EAT, self.work, max_m=2000.0)
            if poi is not None:
                there = self.tt(self.work, tuple(self.world.poi_xy[poi]))
                start = float(np.clip(self.rng.normal(12.25, 0.25), 11.5, 13.0))
                back = start + 0.75 + there
                if start - there - arrive >= 0.5 and end - back >= 0.5:
                    segments = [
                        _Segment(work_id, ActivityType.WORK, self.work, WORK_CATEGORY, arrive, start - there),
                        self.segment(poi, start, 0.75),
                        _Segment(work_id, ActivityType.WORK, self.work, WORK_CATEGORY, back, end),
                    ]

        if self.rng.random() < self.style["evening_prob"]:
            activity = self.pick_type()
            poi = self.pick_poi(activity, self.work)
            if poi is not None:
                xy = tuple(self.world.poi_xy[poi])
                arrival = end + self.tt(self.work, xy)
                duration = self.duration_h(activity)
                if arrival + duration + self.tt(xy, self.home) <= LATEST_HOME_H:
                    segments.append(self.segment(poi, arrival, duration))
        segments[-1].home_after = True
        return segments

    def free_day(self) -> List[_Segment]:
        lo, hi = self.style["outings"]
        wishes = []
        for _ in range(int(self.rng.integers(lo, hi + 1))):
            activity = self.pick_type()
            peaks = self.cfg.peak_hours.get(activity.value) or [12.0]
            peak = peaks[int(self.rng.integers(len(peaks)))]
            wishes.append((float(self.rng.normal(peak, self.cfg.peak_spread_hours)), activity))
        wishes.sort(key=lambda w: w[0])

        segments: List[_Segment] = []
        here, free = self.home, EARLIEST_LEAVE_H
        for start, activity in wishes:
            poi = self.pick_poi(activity, here)
            if poi is None:
                continue
            xy = tuple(self.world.poi_xy[poi])
            if segments and here != self.home:
                if start - free >= self.tt(here, self.home) + 1.0 + self.tt(self.home, xy):
                    segments[-1].home_after = True
                    free += self.tt(here, self.home)
                    here = self.home
            arrival = max(start, free + self.tt(here, xy))
            duration = self.duration_h(activity)
            if arrival + duration + self.tt(xy, self.home) > LATEST_HOME_H:
                continue
            segments.append(self.segment(poi, arrival, duration))
            here, free = xy, arrival + duration
        if segments:
            segments[-1].home_after = True
        return segments


def _agent_truth(index: int, world: SynthWorld, cfg: SynthConfig, start: date, utc_offset_hours: float) -> AgentTruth:
    rng = np.random.default_rng([cfg.seed, index + 1, _SCHEDULE])
    agent_id = f"U{index + 1:05d}"
    commuter = bool(rng.random() < cfg.commuter_fraction)
    names = sorted(cfg.archetype_mix)
    weights = np.array([cfg.archetype_mix[n] for n in names], dtype=float)
    archetype = names[int(rng.choice(len(names), p=weights / weights.sum()))]

    site = int(rng.integers(len(world.site_xy)))
    hx, hy = world.site_xy[site] + rng.normal(0.0, HOME_SPREAD_M, 2)
    work = None
    if commuter and len(world.pois):
        d = np.hypot(world.poi_xy[:, 0] - hx, world.poi_xy[:, 1] - hy)
        far = np.flatnonzero(d >= cfg.min_commute_m)
        pool = far if len(far) else np.arange(len(world.pois))
        w = int(pool[int(rng.integers(len(pool)))])
        work = ProjectedPoint(float(world.poi_xy[w, 0]), float(world.poi_xy[w, 1]))
    agent = AgentTruth(agent_id, work is not None, archetype, ProjectedPoint(float(hx), float(hy)), work)

    planner = _Planner(rng, world, cfg, agent)
    n_days = max(cfg.study_days, cfg.checkin_days)
    t0 = day_start_epoch(start, utc_offset_hours)
    home_id = f"home:{agent_id}"
    home_xy = (agent.home.x, agent.home.y)
    here, home_since = home_xy, t0
    dwells: List[Dwell] = []
    for d in range(n_days):
        day = start + timedelta(days=d)
        base = day_start_epoch(day, utc_offset_hours)
        plan = planner.commute_day() if agent.commuter and not is_weekend(day) else planner.free_day()
        at_home = True
        for seg in plan:
            arrival = base + int(round(seg.arrival_h * 3600))
            departure = base + int(round(seg.departure_h * 3600))
            if at_home:
                leave = arrival - int(round(planner.tt(home_xy, seg.xy) * 3600))
                dwells.append(Dwell(home_id, ActivityType.HOME, home_xy[0], home_xy[1], home_since, max(home_since, leave)))
            dwells.append(Dwell(seg.facility_id, seg.activity, seg.xy[0], seg.xy[1], arrival, departure, seg.category))
            at_home = seg.home_after
            if at_home:
                home_since = departure + int(round(planner.tt(seg.xy, home_xy) * 3600))
    dwells.append(Dwell(home_id, ActivityType.HOME, home_xy[0], home_xy[1], home_since, t0 + n_days * SECONDS_PER_DAY))
    agent.dwells = dwells
    return agent


def generate_agents(
    cfg: SynthConfig, world: SynthWorld, utc_offset_hours: float = 8.0, threads: int = 1
) -> GroundTruth:
    unknown = sorted(set(cfg.archetype_mix) - set(ARCHETYPES))
    if unknown:
        raise SynthError(f"unknown archetype(s): {', '.join(unknown)}")
    if not world.pois and cfg.n_agents:
        raise SynthError("agents need at least one POI to visit")
    start = date.fromisoformat(cfg.start_date)
    agents = parallel_map(lambda i: _agent_truth(i, world, cfg, start, utc_offset_hours), list(range(cfg.n_agents)), threads)
    n_commuters = sum(a.commuter for a in agents)
    logger.info(f"✅ Agents: {len(agents)} ({n_commuters} commuter(s))")
    return GroundTruth(
        agents=agents,
        start_epoch=day_start_epoch(start, utc_offset_hours),
        study_days=cfg.study_days,
        checkin_days=cfg.checkin_days,
    )


# ---------------------------
# Records
# ---------------------------
def _position(dwells: Sequence[Dwell], arrivals: Sequence[int], t: float) -> Tuple[Tuple[float, float], Optional[str]]:
    i = bisect_right(arrivals, t) - 1
    if i < 0:
        return (dwells[0].x, dwells[0].y), dwells[0].facility_id
    d = dwells[i]
    if t <= d.departure or i + 1 >= len(dwells):
        return (d.x, d.y), d.facility_id
    nxt = dwells[i + 1]
    f = (t - d.departure) / max(1, nxt.arrival - d.departure)
    return (d.x + f * (nxt.x - d.x), d.y + f * (nxt.y - d.y)), None


def _agent_records(agent: AgentTruth, index: int, world: SynthWorld, cfg: SynthConfig, truth: GroundTruth) -> List[Tuple]:
    rng = np.random.default_rng([cfg.seed, index + 1, _XDR])
    if cfg.records_per_day <= 0 or not agent.dwells:
        return []
    arrivals = [d.arrival for d in agent.dwells]
    cache: Dict[str, List[BaseStation]] = {}

    def station_at(t: float) -> BaseStation:
        xy, facility = _position(agent.dwells, arrivals, t)
        if facility is not None and facility in cache:
            candidates = cache[facility]
        else:
            candidates = world.index.nearest_k(ProjectedPoint(xy[0], xy[1]), 2)
            if facility is not None:
                cache[facility] = candidates
        if len(candidates) > 1 and rng.random() < cfg.reassignment_prob:
            return candidates[1]
        return candidates[0]

    rows = []
    for d in range(truth.study_days):
        lo = truth.start_epoch + d * SECONDS_PER_DAY
        hi = lo + SECONDS_PER_DAY
        anchors: List[float] = []
        if cfg.anchor_records:
            for dw in agent.dwells:
                if dw.duration < 240:
                    continue
                if lo <= dw.arrival < hi and dw.arrival > truth.start_epoch:
                    anchors.append(dw.arrival + rng.uniform(0, 120))
                if lo <= dw.departure < hi and dw.departure < truth.xdr_end:
                    anchors.append(dw.departure - rng.uniform(0, 120))
        n_background = int(rng.poisson(max(0.0, cfg.records_per_day - len(anchors))))
        times = sorted(anchors + list(rng.uniform(lo, hi, n_background)))
        for t in times:
            s = station_at(t)
            rows.append((agent.agent_id, int(t), s.lon, s.lat, s.station_id))
    return rows


def emit_xdr(truth: GroundTruth, world: SynthWorld, cfg: SynthConfig, threads: int = 1) -> pd.DataFrame:
    per_agent = parallel_map(
        lambda ia: _agent_records(ia[1], ia[0], world, cfg, truth), list(enumerate(truth.agents)), threads
    )
    rows = [r for agent_rows in per_agent for r in agent_rows]
    frame = pd.DataFrame(rows, columns=["user_id", "timestamp", "lon", "lat", "station_id"])
    logger.info(f"✅ XDR: {len(frame)} record(s)")
    return frame


def emit_checkins(truth: GroundTruth, cfg: SynthConfig) -> pd.DataFrame:
    """One check-in per non-home dwell with probability checkin_prob, uniform within the dwell."""
    rows = []
    for index, agent in enumerate(truth.agents):
        rng = np.random.default_rng([cfg.seed, index + 1, _CHECKINS])
        for dw in agent.dwells:
            if dw.activity is ActivityType.HOME or dw.arrival >= truth.checkin_end:
                continue
            if rng.random() < cfg.checkin_prob:
                rows.append((agent.agent_id, int(rng.uniform(dw.arrival, dw.departure)), dw.category))
    frame = pd.DataFrame(rows, columns=["user_id", "timestamp", "category"])
    logger.info(f"✅ Check-ins: {len(frame)}")
    return frame


# ---------------------------
# Files
# ---------------------------
def write_world(world: SynthWorld, input_dir: str, category_map: Optional[str] = None, profession_map: Optional[str] = None) -> List[str]:
    os.makedirs(input_dir, exist_ok=True)
    stations = os.path.join(input_dir, "stations.csv")
    pois = os.path.join(input_dir, "pois.csv")
    pd.DataFrame([(s.station_id, s.lon, s.lat) for s in world.stations], columns=["station_id", "lon", "lat"]).to_csv(
        stations, index=False, float_format="%.7f"
    )
    pd.DataFrame([(p.poi_id, p.lon, p.lat, p.category) for p in world.pois], columns=["poi_id", "lon", "lat", "category"]).to_csv(
        pois, index=False, float_format="%.7f"
    )
    written = [stations, pois]
    for src in (category_map, profession_map):
        if src:
            dst = os.path.join(input_dir, os.path.basename(src))
            shutil.copyfile(src, dst)
            written.append(dst)
    return written


def _point_dict(p: Optional[ProjectedPoint], projection: Projection):
    if p is None:
        return None
    lon, lat = projection.inverse(p)
    return {"x": round(p.x, 3), "y": round(p.y, 3), "lon": round(lon, 7), "lat": round(lat, 7)}


def write_truth(path: str, truth: GroundTruth, world: SynthWorld) -> int:
    def rows():
        for a in truth.agents:
            yield {
                "agent_id": a.agent_id,
                "commuter": a.commuter,
                "archetype": a.archetype,
                "home": _point_dict(a.home, world.projection),
                "work": _point_dict(a.work, world.projection),
                "start_epoch": truth.start_epoch,
                "study_days": truth.study_days,
                "checkin_days": truth.checkin_days,
                "dwells": [
                    {
                        "facility_id": d.facility_id,
                        "activity": d.activity.value,
                        "lon": round(world.projection.inverse(d.point)[0], 7),
                        "lat": round(world.projection.inverse(d.point)[1], 7),
                        "arrival": d.arrival,
                        "departure": d.departure,
                        "category": d.category,
                    }
                    for d in a.dwells
                ],
            }

    return write_jsonl(path, rows())


def read_truth(path: str, projection: Projection) -> GroundTruth:
    """Load truth.jsonl with every point projected by the given (pipeline) projection."""
    agents, meta = [], {}

    def point(d):
        return None if d is None else projection.project(d["lon"], d["lat"])

    for row in read_jsonl(path):
        meta = row
        dwells = []
        for d in row["dwells"]:
            p = projection.project(d["lon"], d["lat"])
            dwells.append(Dwell(d["facility_id"], ActivityType(d["activity"]), p.x, p.y, d["arrival"], d["departure"], d.get("category", "")))
        agents.append(AgentTruth(row["agent_id"], row["commuter"], row["archetype"], point(row["home"]), point(row["work"]), dwells))
    return GroundTruth(
        agents=agents,
        start_epoch=int(meta.get("start_epoch", 0)),
        study_days=int(meta.get("study_days", 0)),
        checkin_days=int(meta.get("checkin_days", 0)),
    )


# ---------------------------
# Scoring
# ---------------------------
def _isolated(agent: AgentTruth, min_sep_m: float) -> Dict[str, bool]:
    points: Dict[str, ProjectedPoint] = {}
    for d in agent.dwells:
        points.setdefault(d.facility_id, d.point)
    out = {}
    for fid, p in points.items():
        out[fid] = all(euclidean_distance(p, q) >= min_sep_m for other, q in points.items() if other != fid)
    return out


def score_pipeline(
    truth: GroundTruth,
    stays_by_user: Mapping[str, Sequence[StayPoint]],
    profiles: Mapping,
    utc_offset_hours: float = 8.0,
    chains_by_user: Optional[Mapping[str, Sequence[ActivityChain]]] = None,
    min_dwell_s: int = 1200,
    isolation_m: float = 600.0,
    match_m: float = 300.0,
) -> Dict:
    """
    Compare pipeline output with the truth; all points must share one
    projection (read_truth handles that). Only weekday dwells inside the
    XDR window at isolated facilities enter the recall.
    """
    home_hits = home_n = work_hits = work_n = 0
    recalled = dwell_n = 0
    errors: List[float] = []
    act_hits = act_n = 0
    for agent in truth.agents:
        stays = [s for s in stays_by_user.get(agent.agent_id, ()) if s.is_stay]
        if not stays:
            continue
        profile = profiles.get(agent.agent_id)
        home_n += 1
        if profile is not None and profile.home is not None and euclidean_distance(profile.home, agent.home) <= match_m:
            home_hits += 1
        if agent.commuter:
            work_n += 1
            if profile is not None and profile.work is not None and euclidean_distance(profile.work, agent.work) <= match_m:
                work_hits += 1

        isolated = _isolated(agent, isolation_m)
        pieces = []
        if chains_by_user is not None:
            pieces = [s for c in chains_by_user.get(agent.agent_id, ()) for s in c.stays if s.activity is not None]
        for dw in agent.dwells:
            if dw.duration < min_dwell_s or dw.arrival < truth.start_epoch or dw.departure > truth.xdr_end:
                continue
            if is_weekend(local_day(dw.arrival, utc_offset_hours)) or not isolated[dw.facility_id]:
                continue
            dwell_n += 1
            hits = [
                euclidean_distance(s.center, dw.point)
                for s in stays
                if s.arrival < dw.departure and s.departure > dw.arrival and euclidean_distance(s.center, dw.point) <= match_m
            ]
            if hits:
                recalled += 1
                errors.append(min(hits))
            if dw.activity in INFERABLE_TYPES and pieces:
                found = [
                    s for s in pieces
                    if s.arrival < dw.departure and s.departure > dw.arrival and euclidean_distance(s.center, dw.point) <= match_m
                ]
                if found:
                    act_n += 1
                    act_hits += int(found[0].activity is dw.activity)

    def share(a, b):
        return a / b if b else None

    return {
        "agents_scored": home_n,
        "home_recovery": share(home_hits, home_n),
        "work_recovery": share(work_hits, work_n),
        "stay_recall": share(recalled, dwell_n),
        "dwells_scored": dwell_n,
        "mean_center_error_m": float(np.mean(errors)) if errors else None,
        "max_center_error_m": float(np.max(errors)) if errors else None,
        "activity_accuracy": share(act_hits, act_n),
    }


def reproject_truth(truth: GroundTruth, source: Projection, target: Projection) -> GroundTruth:
    """Same truth with every point moved from one local projection into another."""

    def move(p: Optional[ProjectedPoint]) -> Optional[ProjectedPoint]:
        return None if p is None else target.project(*source.inverse(p))

    agents = []
    for a in truth.agents:
        dwells = []
        for d in a.dwells:
            p = move(d.point)
            dwells.append(Dwell(d.facility_id, d.activity, p.x, p.y, d.arrival, d.departure, d.category))
        agents.append(AgentTruth(a.agent_id, a.commuter, a.archetype, move(a.home), move(a.work), dwells))
    return GroundTruth(agents, truth.start_epoch, truth.study_days, truth.checkin_days)

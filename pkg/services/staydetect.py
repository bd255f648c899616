# services/staydetect.py: stay detection for one user's records:
# temporal bursts, DBSCAN denoising, significant-place merging, stay/pass-by split.

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist, pdist
from sklearn.cluster import DBSCAN

from services.config import StayConfig
from services.core_model import ProjectedPoint, Projection, Record, StayKind, StayPoint
from services.errors import StayDetectionError
from services.helpers import get_logger, parallel_map

logger = get_logger("staydetect")

PointsLike = Union[np.ndarray, Sequence[ProjectedPoint]]


@dataclass(frozen=True)
class DbscanParams:
    eps: float
    min_samples: int

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"DBSCAN eps must be > 0, got {self.eps}")
        if self.min_samples < 1:
            raise ValueError(f"DBSCAN min_samples must be >= 1, got {self.min_samples}")


def _as_xy(points: PointsLike) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return points.reshape(-1, 2).astype(float)
    return np.array([[p.x, p.y] for p in points], dtype=float).reshape(-1, 2)


def dbscan(points: PointsLike, params: DbscanParams) -> np.ndarray:
    """
    Cluster labels in input order, -1 for noise. Neighbourhoods are closed
    (distance <= eps) and include the point itself.
    """
    xy = _as_xy(points)
    if len(xy) == 0:
        return np.zeros(0, dtype=int)
    if not np.all(np.isfinite(xy)):
        raise StayDetectionError("DBSCAN input holds non-finite coordinates")
    model = DBSCAN(eps=params.eps, min_samples=params.min_samples, metric="euclidean", algorithm="brute")
    return model.fit_predict(xy).astype(int)


def segment_bursts(timestamps: Sequence[int], gap_s: int = 600) -> List[np.ndarray]:
    """Index groups of consecutive records whose inter-record gap is <= gap_s."""
    ts = np.asarray(timestamps, dtype=np.int64)
    if len(ts) == 0:
        return []
    breaks = np.flatnonzero(np.diff(ts) > gap_s) + 1
    return np.split(np.arange(len(ts)), breaks)


def medoid_index(
    points: PointsLike,
    timestamps: Optional[Sequence[int]] = None,
    weights: Optional[Sequence[float]] = None,
) -> int:
    """
    Index of the member minimizing the (weighted) summed distance to all
    members. Ties go to the earliest timestamp, then the lowest index.
    """
    xy = _as_xy(points)
    if len(xy) == 0:
        raise StayDetectionError("medoid of an empty point set")
    if len(xy) == 1:
        return 0
    dist = cdist(xy, xy)
    if weights is not None:
        dist = dist * np.asarray(weights, dtype=float)[np.newaxis, :]
    sums = dist.sum(axis=1)
    tied = np.flatnonzero(sums <= sums.min() + 1e-9)
    if timestamps is None or len(tied) == 1:
        return int(tied[0])
    ts = np.asarray(timestamps)
    return int(tied[np.argmin(ts[tied])])


def medoid(points: PointsLike, timestamps: Optional[Sequence[int]] = None) -> ProjectedPoint:
    xy = _as_xy(points)
    i = medoid_index(xy, timestamps)
    return ProjectedPoint(float(xy[i, 0]), float(xy[i, 1]))


def _burst_labels(xy: np.ndarray, params: DbscanParams) -> np.ndarray:
    if len(xy) < params.min_samples:
        return np.full(len(xy), -1, dtype=int)
    # all points mutually within eps: every point is core and the burst is one cluster
    if len(xy) == 1 or pdist(xy).max() <= params.eps:
        return np.zeros(len(xy), dtype=int)
    return dbscan(xy, params)


def denoise_bursts(
    xy: np.ndarray,
    timestamps: Sequence[int],
    bursts: Sequence[np.ndarray],
    params: DbscanParams = DbscanParams(50.0, 2),
) -> np.ndarray:
    """Snap each in-burst cluster to its medoid; noise and single-record bursts keep their coordinates."""
    out = np.array(xy, dtype=float, copy=True)
    ts = np.asarray(timestamps)
    for burst in bursts:
        if len(burst) < 2:
            continue
        labels = _burst_labels(out[burst], params)
        for label in np.unique(labels[labels >= 0]):
            members = burst[labels == label]
            m = members[medoid_index(out[members], ts[members])]
            out[members] = out[m]
    return out


def merge_significant_places(
    xy: np.ndarray,
    timestamps: Sequence[int],
    params: DbscanParams = DbscanParams(300.0, 1),
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cluster the distinct denoised locations of one user (time ignored) and
    snap every record to its cluster's medoid. Returns the snapped
    coordinates and a place id per record; ids follow first appearance.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    ts = np.asarray(timestamps)
    if len(xy) == 0:
        return xy.copy(), np.zeros(0, dtype=int)

    _, first, inverse, counts = np.unique(xy, axis=0, return_index=True, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")  # distinct locations by first appearance
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    locations = xy[first[order]]
    loc_counts = counts[order]
    loc_first_ts = ts[first[order]]
    loc_of_record = rank[inverse]

    labels = dbscan(locations, params)
    next_label = labels.max() + 1 if len(labels) else 0
    for i in np.flatnonzero(labels < 0):
        labels[i] = next_label
        next_label += 1

    place_of_loc = np.empty(len(locations), dtype=int)
    centers = np.empty_like(locations)
    seen: Dict[int, int] = {}
    for loc in range(len(locations)):
        label = labels[loc]
        if label in seen:
            continue
        seen[label] = len(seen)
        members = np.flatnonzero(labels == label)
        m = members[medoid_index(locations[members], loc_first_ts[members], loc_counts[members])]
        place_of_loc[members] = seen[label]
        centers[members] = locations[m]

    return centers[loc_of_record], place_of_loc[loc_of_record]


def classify_stays(
    user_id: str,
    timestamps: Sequence[int],
    xy: np.ndarray,
    place_ids: Sequence[int],
    station_ids: Sequence[str],
    min_duration_s: int = 600,
) -> List[StayPoint]:
    """Maximal runs of consecutive records at one place become one StayPoint."""
    ts = np.asarray(timestamps, dtype=np.int64)
    places = np.asarray(place_ids)
    if len(ts) == 0:
        return []
    breaks = np.flatnonzero(places[1:] != places[:-1]) + 1
    stays = []
    for run in np.split(np.arange(len(ts)), breaks):
        arrival, departure = int(ts[run[0]]), int(ts[run[-1]])
        kind = StayKind.STAY if departure - arrival >= min_duration_s else StayKind.PASS_BY
        stays.append(
            StayPoint(
                user_id=user_id,
                center=ProjectedPoint(float(xy[run[0], 0]), float(xy[run[0], 1])),
                arrival=arrival,
                departure=departure,
                kind=kind,
                station_id=_run_station([station_ids[i] for i in run]),
                place_id=int(places[run[0]]),
                n_records=len(run),
                stay_id=len(stays),
            )
        )
    return stays


def _run_station(station_ids: Sequence[str]) -> str:
    counts: Dict[str, int] = {}
    for s in station_ids:
        counts[s] = counts.get(s, 0) + 1
    return min(counts, key=lambda s: (-counts[s], s))


def detect_user_stays(
    records: Sequence[Record],
    projection: Projection,
    cfg: StayConfig = StayConfig(),
    station_index=None,
) -> List[StayPoint]:
    """
    All steps for one user. With a station index, each stay reports the
    station nearest its center; otherwise the station most of its records
    came from.
    """
    if not records:
        return []
    records = sorted(records, key=lambda r: r.timestamp)
    ts = np.array([r.timestamp for r in records], dtype=np.int64)
    xy = projection.project_arrays([r.lon for r in records], [r.lat for r in records])

    bursts = segment_bursts(ts, cfg.burst_gap_s)
    xy = denoise_bursts(xy, ts, bursts, DbscanParams(cfg.denoise_eps_m, cfg.denoise_min_samples))
    xy, place_ids = merge_significant_places(xy, ts, DbscanParams(cfg.place_eps_m, cfg.place_min_samples))
    stays = classify_stays(
        records[0].user_id, ts, xy, place_ids, [r.station_id for r in records], cfg.stay_min_duration_s
    )
    if station_index is not None:
        stays = [_with_station(s, station_index.nearest(s.center).station_id) for s in stays]
    return stays


def _with_station(stay: StayPoint, station_id: str) -> StayPoint:
    return replace(stay, station_id=station_id)


def detect_all_stays(
    records_by_user: Dict[str, Sequence[Record]],
    projection: Projection,
    cfg: StayConfig = StayConfig(),
    station_index=None,
    threads: int = 1,
) -> Dict[str, List[StayPoint]]:
    users = sorted(records_by_user)
    results = parallel_map(
        lambda u: detect_user_stays(records_by_user[u], projection, cfg, station_index), users, threads
    )
    out = dict(zip(users, results))
    n_stays = sum(1 for v in out.values() for s in v if s.is_stay)
    n_pass = sum(1 for v in out.values() for s in v if not s.is_stay)
    logger.info(f"✅ Detected {n_stays} stay(s) and {n_pass} pass-by(s) for {len(users)} user(s)")
    return out

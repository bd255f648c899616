# services/validate.py: reconstruction accuracy (1 - hourly MAPE) of
# duration-expanded inferred activities against check-in references, and
# subset-bootstrap confidence-interval widths.

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from services.config import ValidateConfig
from services.core_model import (
    ActivityChain,
    ActivityType,
    CategoryMap,
    CheckIn,
    day_start_epoch,
    seconds_of_day,
)
from services.errors import ValidationError
from services.helpers import get_logger, parallel_map

logger = get_logger("validate")


@dataclass(frozen=True)
class FractionSeries:
    activity: ActivityType
    values: np.ndarray
    start_hour: int = 7
    slot_minutes: int = 10

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValidationError("fraction series holds negative values")

    @property
    def slots_per_hour(self) -> int:
        return 60 // self.slot_minutes

    def slot_labels(self) -> List[str]:
        out = []
        for k in range(len(self.values)):
            minutes = self.start_hour * 60 + k * self.slot_minutes
            out.append(f"{minutes // 60:02d}:{minutes % 60:02d}")
        return out

    def to_series(self) -> pd.Series:
        return pd.Series(self.values, index=self.slot_labels(), name=self.activity.value)


def _n_slots(start_hour: int, end_hour: int, slot_minutes: int) -> int:
    return (end_hour - start_hour) * 60 // slot_minutes


def _normalize(counts: np.ndarray, activity: ActivityType, what: str) -> np.ndarray:
    total = counts.sum()
    if total <= 0:
        raise ValidationError(f"no activity of this type: {activity.value} ({what})")
    return counts / total


def _stay_slot_counts(
    chains: Iterable[ActivityChain],
    activity: ActivityType,
    start_hour: int,
    end_hour: int,
    slot_minutes: int,
    utc_offset_hours: float,
) -> np.ndarray:
    n = _n_slots(start_hour, end_hour, slot_minutes)
    slot_s = slot_minutes * 60
    counts = np.zeros(n)
    for chain in chains:
        w0 = day_start_epoch(chain.day, utc_offset_hours) + start_hour * 3600
        w1 = w0 + n * slot_s
        for s in chain.stays:
            if s.activity is not activity or s.departure <= w0 or s.arrival >= w1:
                continue
            first = max(0, (s.arrival - w0) // slot_s)
            last = min(n - 1, -(-(s.departure - w0) // slot_s) - 1)
            if last >= first:
                counts[first : last + 1] += 1
    return counts


def expand_stay_slots(
    chains: Iterable[ActivityChain],
    activity: ActivityType,
    start_hour: int = 7,
    end_hour: int = 22,
    slot_minutes: int = 10,
    utc_offset_hours: float = 8.0,
) -> FractionSeries:
    """Each stay of the type counts once in every slot its [arrival, departure) overlaps."""
    counts = _stay_slot_counts(chains, activity, start_hour, end_hour, slot_minutes, utc_offset_hours)
    return FractionSeries(activity, _normalize(counts, activity, "inferred stays"), start_hour, slot_minutes)


def checkin_series(
    checkins: Iterable[CheckIn],
    activity: ActivityType,
    category_map: CategoryMap,
    start_hour: int = 7,
    end_hour: int = 22,
    slot_minutes: int = 10,
    utc_offset_hours: float = 8.0,
) -> FractionSeries:
    n = _n_slots(start_hour, end_hour, slot_minutes)
    counts = np.zeros(n)
    for c in checkins:
        if category_map.lookup(c.category) is not activity:
            continue
        k = (seconds_of_day(c.timestamp, utc_offset_hours) - start_hour * 3600) // (slot_minutes * 60)
        if 0 <= k < n:
            counts[k] += 1
    return FractionSeries(activity, _normalize(counts, activity, "check-ins"), start_hour, slot_minutes)


def mape_per_hour(pred: FractionSeries, ref: FractionSeries) -> pd.Series:
    """
    Hourly mean of |pred - ref| / ref over that hour's slots, skipping slots
    with ref = 0. Hours without any positive reference slot are left out.
    """
    if len(pred.values) != len(ref.values):
        raise ValidationError("series lengths differ")
    per_hour = ref.slots_per_hour
    out = {}
    for h in range(len(ref.values) // per_hour):
        r = ref.values[h * per_hour : (h + 1) * per_hour]
        p = pred.values[h * per_hour : (h + 1) * per_hour]
        keep = r > 0
        if not keep.any():
            logger.warning(f"⚠️ {ref.activity.value}: hour {ref.start_hour + h:02d} has no reference mass, skipped")
            continue
        out[ref.start_hour + h] = float(np.mean(np.abs(p[keep] - r[keep]) / r[keep]))
    series = pd.Series(out, dtype=float, name="mape")
    series.index.name = "hour"
    return series


def reconstruction_accuracy(pred: FractionSeries, ref: FractionSeries) -> float:
    hourly = mape_per_hour(pred, ref)
    if hourly.empty:
        raise ValidationError(f"{ref.activity.value}: no hour with reference mass")
    return 1.0 - float(hourly.mean())


def bootstrap_ci(
    chains_by_user: Mapping[str, Sequence[ActivityChain]],
    activities: Sequence[ActivityType],
    n_subsets: int = 20,
    frac: float = 0.20,
    level: float = 0.75,
    seed: int = 7,
    start_hour: int = 7,
    end_hour: int = 22,
    slot_minutes: int = 10,
    utc_offset_hours: float = 8.0,
    threads: int = 1,
) -> pd.DataFrame:
    """
    Per-slot width of the central `level` interval of each type's series
    across random user subsets. Subset i samples without replacement with
    seed + i. Rows are activity types, columns slot labels.
    """
    users = sorted(chains_by_user)
    needed = int(np.ceil(n_subsets / frac - 1e-9))
    if len(users) < needed:
        raise ValidationError(f"bootstrap needs at least {needed} users, got {len(users)}")
    size = max(1, int(round(frac * len(users))))
    n = _n_slots(start_hour, end_hour, slot_minutes)

    def one_subset(i: int) -> np.ndarray:
        rng = np.random.default_rng(seed + i)
        picked = rng.choice(len(users), size=size, replace=False)
        chains = [c for j in sorted(picked) for c in chains_by_user[users[j]]]
        rows = []
        for activity in activities:
            counts = _stay_slot_counts(chains, activity, start_hour, end_hour, slot_minutes, utc_offset_hours)
            total = counts.sum()
            rows.append(counts / total if total > 0 else counts)
        return np.vstack(rows) if rows else np.zeros((0, n))

    stacked = np.stack(parallel_map(one_subset, list(range(n_subsets)), threads))  # subsets x types x slots
    lower, upper = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0
    widths = np.quantile(stacked, upper, axis=0) - np.quantile(stacked, lower, axis=0)
    labels = FractionSeries(ActivityType.OTHER, np.zeros(n), start_hour, slot_minutes).slot_labels()
    frame = pd.DataFrame(np.maximum(widths, 0.0), index=[a.value for a in activities], columns=labels)
    frame.index.name = "activity_type"
    return frame


@dataclass
class ValidationResult:
    accuracy: Dict[str, float] = field(default_factory=dict)
    hourly_mape: Dict[str, pd.Series] = field(default_factory=dict)
    predicted: Dict[str, FractionSeries] = field(default_factory=dict)
    reference: Dict[str, FractionSeries] = field(default_factory=dict)
    ci_widths: Optional[pd.DataFrame] = None
    ci_error: Optional[str] = None

    def series_frame(self) -> pd.DataFrame:
        cols = {}
        for name in sorted(self.predicted):
            cols[f"{name}_inferred"] = self.predicted[name].to_series()
            cols[f"{name}_checkin"] = self.reference[name].to_series()
        frame = pd.DataFrame(cols)
        frame.index.name = "slot"
        return frame

    def mape_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({k: v for k, v in sorted(self.hourly_mape.items())})
        frame.index.name = "hour"
        return frame

    def to_dict(self) -> Dict:
        ci = None
        if self.ci_widths is not None:
            ci = {
                k: {"mean_width": float(row.mean()), "max_width": float(row.max()), "widths": [float(v) for v in row]}
                for k, row in self.ci_widths.iterrows()
            }
        return {
            "accuracy": {k: float(v) for k, v in sorted(self.accuracy.items())},
            "hourly_mape": {k: {str(h): float(v) for h, v in s.items()} for k, s in sorted(self.hourly_mape.items())},
            "ci": ci,
            "ci_error": self.ci_error,
        }


def validation_report(
    chains_by_user: Mapping[str, Sequence[ActivityChain]],
    checkins: Iterable[CheckIn],
    category_map: CategoryMap,
    cfg: ValidateConfig = ValidateConfig(),
    utc_offset_hours: float = 8.0,
    threads: int = 1,
) -> ValidationResult:
    checkins = list(checkins)
    chains = [c for u in sorted(chains_by_user) for c in chains_by_user[u]]
    window = dict(start_hour=cfg.window_start_hour, end_hour=cfg.window_end_hour, slot_minutes=cfg.slot_minutes)
    activities = [ActivityType.parse(a) for a in cfg.activity_types]

    result = ValidationResult()
    for activity in activities:
        pred = expand_stay_slots(chains, activity, utc_offset_hours=utc_offset_hours, **window)
        ref = checkin_series(checkins, activity, category_map, utc_offset_hours=utc_offset_hours, **window)
        result.predicted[activity.value] = pred
        result.reference[activity.value] = ref
        result.hourly_mape[activity.value] = mape_per_hour(pred, ref)
        result.accuracy[activity.value] = reconstruction_accuracy(pred, ref)
        logger.info(f"✅ {activity.value}: reconstruction accuracy {result.accuracy[activity.value]:.3f}")

    try:
        result.ci_widths = bootstrap_ci(
            chains_by_user,
            activities,
            n_subsets=cfg.n_subsets,
            frac=cfg.subset_fraction,
            level=cfg.ci_level,
            seed=cfg.seed,
            utc_offset_hours=utc_offset_hours,
            threads=threads,
            **window,
        )
    except ValidationError as e:
        result.ci_error = str(e)
        logger.warning(f"⚠️ Confidence intervals skipped: {e}")
    return result

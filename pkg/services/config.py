# services/config.py: one JSON document configures every stage.
# Sections map onto dataclasses; unknown keys are rejected at any depth.

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, List, Optional, Union, get_type_hints

from services.errors import ConfigError

CONFIG_ENV_VAR = "ACTIVITY_CHAINS_CONFIG"

Prior = Union[float, str]


@dataclass
class CoreConfig:
    utc_offset_hours: float = 8.0
    category_map: str = "data/category_map.csv"


@dataclass
class IngestConfig:
    # local calendar dates, start inclusive / end exclusive; None leaves the side open
    study_start: Optional[str] = None
    study_end: Optional[str] = None
    sparse_slot_minutes: int = 30
    sparse_min_slots: int = 12
    exclude_weekends: bool = True
    visitor_min_span_days: float = 14.0
    grid_cell_m: float = 1000.0
    max_malformed_share: float = 0.01


@dataclass
class StayConfig:
    burst_gap_s: int = 600
    denoise_eps_m: float = 50.0
    denoise_min_samples: int = 2
    place_eps_m: float = 300.0
    place_min_samples: int = 1
    stay_min_duration_s: int = 600


@dataclass
class LabelConfig:
    night_start_hour: float = 22.0
    night_end_hour: float = 6.0
    work_start_hour: float = 8.0
    work_end_hour: float = 18.0
    residency_min_share: float = 0.30
    commuter_min_distance_m: float = 500.0
    work_min_days_per_week: float = 2.0
    # "duration" (overlapping stay-time) or "records" (record counts)
    frequency_mode: str = "duration"


@dataclass
class BayesConfig:
    n_slots: int = 144
    candidate_buffer_m: float = 900.0
    laplace_pseudo_count: float = 1.0
    profession_map: str = "data/profession_map.csv"


@dataclass
class ValidateConfig:
    window_start_hour: int = 7
    window_end_hour: int = 22
    slot_minutes: int = 10
    activity_types: List[str] = field(default_factory=lambda: ["DrinkEat", "Shopping"])
    n_subsets: int = 20
    subset_fraction: float = 0.20
    ci_level: float = 0.75
    seed: int = 7


@dataclass
class LdaConfig:
    n_topics: int = 6
    alpha: Prior = "symmetric"
    beta: Prior = "symmetric"
    iterations: int = 1000
    burn_in: int = 800
    seed: int = 11
    top_n: int = 4
    slot_minutes: int = 30
    day_start_hour: int = 6
    day_end_hour: int = 22
    max_gap_share: float = 0.5
    # "user_day" (one document per resident weekday) or "user"
    document_unit: str = "user_day"
    sweep_alphas: List[Prior] = field(
        default_factory=lambda: [0.001, 0.031, 0.061, 0.091, "symmetric", "asymmetric"]
    )
    sweep_betas: List[Prior] = field(
        default_factory=lambda: [0.001, 0.031, 0.061, 0.091, "symmetric"]
    )
    sweep_topics: List[int] = field(default_factory=lambda: list(range(1, 11)))
    sweep_iterations: int = 200
    sweep_burn_in: int = 150


@dataclass
class AnalyticsConfig:
    transition_pairs: List[List[float]] = field(default_factory=lambda: [[8.0, 12.0], [16.0, 20.0]])
    od_start_hour: float = 7.0
    od_end_hour: float = 9.0
    od_min_share: float = 0.0
    occupancy_slot_minutes: int = 10


@dataclass
class SynthConfig:
    seed: int = 2014
    start_date: str = "2014-01-06"
    study_days: int = 14
    checkin_days: int = 28
    n_stations: int = 450
    cells_per_site: int = 3
    cell_jitter_m: float = 15.0
    radius_m: float = 6000.0
    center_lon: float = 121.47
    center_lat: float = 31.23
    n_pois: Dict[str, int] = field(
        default_factory=lambda: {
            "Shopping": 300,
            "DailyLife": 200,
            "Transport": 100,
            "DrinkEat": 400,
            "LeisureSport": 200,
            "Education": 120,
            "Other": 150,
        }
    )
    poi_spread_m: float = 100.0
    land_use_dominance: float = 0.8
    n_agents: int = 200
    commuter_fraction: float = 0.7
    archetype_mix: Dict[str, float] = field(
        default_factory=lambda: {
            "work_led": 0.35,
            "leisure_led": 0.2,
            "shopping_led": 0.15,
            "home_led": 0.15,
            "active": 0.15,
        }
    )
    # local hours at which each activity type tends to start
    peak_hours: Dict[str, List[float]] = field(
        default_factory=lambda: {
            "DrinkEat": [8.5, 12.5, 19.0],
            "Shopping": [11.0, 15.5, 19.5],
            "LeisureSport": [10.0, 16.0, 19.5],
            "Education": [9.0, 13.0],
            "DailyLife": [9.5, 14.5],
            "Transport": [8.0, 17.5],
            "Other": [11.0, 16.0],
        }
    )
    peak_spread_hours: float = 0.75
    records_per_day: float = 40.0
    reassignment_prob: float = 0.1
    anchor_records: bool = True
    checkin_prob: float = 0.5
    travel_speed_mps: float = 8.0
    min_commute_m: float = 1500.0


@dataclass
class PathsConfig:
    input_dir: str = "data/input"
    output_dir: str = "data/output"


@dataclass
class PipelineConfig:
    core: CoreConfig = field(default_factory=CoreConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    stays: StayConfig = field(default_factory=StayConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    bayes: BayesConfig = field(default_factory=BayesConfig)
    validate: ValidateConfig = field(default_factory=ValidateConfig)
    lda: LdaConfig = field(default_factory=LdaConfig)
    analytics: AnalyticsConfig = field(default_factory=AnalyticsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    threads: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data: Dict[str, Any], prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{prefix or '<root>'}' must be an object")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")

    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if is_dataclass(hint):
            kwargs[name] = _build(hint, value, prefix=f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, hint, prefix + name)
    return cls(**kwargs)


def _coerce(value, hint, key):
    # JSON already gives the right shapes; only int/float/bool need care
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    return value


def _parse_override(raw: str):
    if "=" not in raw:
        raise ConfigError(f"override '{raw}' must look like section.key=value")
    path, text = raw.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return [p for p in path.strip().split(".") if p], value


def apply_overrides(data: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    for raw in overrides or []:
        keys, value = _parse_override(raw)
        if not keys:
            raise ConfigError(f"override '{raw}' has an empty key")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{raw}' descends into a non-section")
        node[keys[-1]] = value
    return data


def config_from_dict(data: Dict[str, Any], overrides: Optional[List[str]] = None) -> PipelineConfig:
    merged = apply_overrides(json.loads(json.dumps(data or {})), overrides or [])
    cfg = _build(PipelineConfig, merged)
    validate_config(cfg)
    return cfg


def load_config(path: Optional[str] = None, overrides: Optional[List[str]] = None) -> PipelineConfig:
    """
    Load the pipeline config. Without an explicit path the
    ACTIVITY_CHAINS_CONFIG environment variable is consulted; with neither,
    the built-in defaults apply.
    """
    path = path or os.environ.get(CONFIG_ENV_VAR)
    data: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return config_from_dict(data, overrides)


def validate_config(cfg: PipelineConfig) -> None:
    checks = [
        (cfg.threads >= 1, "threads must be >= 1"),
        (cfg.stays.denoise_eps_m > 0 and cfg.stays.place_eps_m > 0, "DBSCAN eps must be > 0"),
        (cfg.stays.denoise_min_samples >= 1 and cfg.stays.place_min_samples >= 1, "min_samples must be >= 1"),
        (cfg.label.frequency_mode in ("duration", "records"), "label.frequency_mode must be 'duration' or 'records'"),
        (0.0 <= cfg.label.residency_min_share <= 1.0, "label.residency_min_share must be in [0,1]"),
        (cfg.bayes.n_slots > 0 and 86400 % cfg.bayes.n_slots == 0, "bayes.n_slots must divide a day"),
        (cfg.bayes.laplace_pseudo_count > 0, "bayes.laplace_pseudo_count must be > 0"),
        (cfg.validate.window_start_hour < cfg.validate.window_end_hour, "validate window is empty"),
        (0.0 < cfg.validate.subset_fraction <= 1.0, "validate.subset_fraction must be in (0,1]"),
        (0.0 < cfg.validate.ci_level < 1.0, "validate.ci_level must be in (0,1)"),
        (cfg.lda.n_topics >= 1, "lda.n_topics must be >= 1"),
        (cfg.lda.iterations > cfg.lda.burn_in >= 0, "lda.iterations must exceed lda.burn_in"),
        (cfg.lda.sweep_iterations > cfg.lda.sweep_burn_in >= 0, "lda.sweep_iterations must exceed lda.sweep_burn_in"),
        (cfg.lda.document_unit in ("user_day", "user"), "lda.document_unit must be 'user_day' or 'user'"),
        (0.0 <= cfg.synth.commuter_fraction <= 1.0, "synth.commuter_fraction must be in [0,1]"),
        (0.0 <= cfg.synth.reassignment_prob <= 1.0, "synth.reassignment_prob must be in [0,1]"),
        (0.0 <= cfg.synth.checkin_prob <= 1.0, "synth.checkin_prob must be in [0,1]"),
        (cfg.synth.n_agents >= 0 and cfg.synth.n_stations >= 0, "synth counts must be >= 0"),
        (all(v >= 0 for v in cfg.synth.n_pois.values()), "synth.n_pois counts must be >= 0"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)

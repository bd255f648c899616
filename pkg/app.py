# app.py: Activity chain reconstruction pipeline (CLI)
# Every stage is a subcommand; one JSON config drives them all. Logs go to
# stderr and <output_dir>/logs, data to files, and stdout gets one JSON
# summary line per stage.

import argparse
import json
import os
import sys
from collections import defaultdict
from datetime import date
from typing import Callable, Dict, List, Optional

from dotenv import load_dotenv

load_dotenv()  # load .env file

import pandas as pd

from services import analytics, bayes, lda, staydetect, staylabel, synthgen
from services.config import PipelineConfig, load_config
from services.core_model import (
    ActivityType,
    CategoryMap,
    Projection,
    chain_from_dict,
    chain_to_dict,
    day_start_epoch,
    stay_from_dict,
    stay_to_dict,
)
from services.errors import MissingInputError, PipelineError, UsageError
from services.helpers import (
    build_manifest,
    get_logger,
    read_jsonl,
    resolve_data_path,
    setup_logging,
    write_json,
    write_jsonl,
)
from services.ingest import (
    StationIndex,
    map_categories,
    parse_checkins,
    parse_pois,
    parse_stations,
    parse_xdr,
    prepare_user_records,
    remove_visitors,
)
from services.report import render_validation_pdf
from services.validate import validation_report

logger = get_logger()

STAGES = ("synth", "ingest", "stays", "label", "profiles", "infer", "validate", "lda", "sweep", "analytics")
ALL_STAGES = ("ingest", "stays", "label", "profiles", "infer", "validate", "lda", "analytics")


# ---------------------------
# Run context
# ---------------------------
class Run:
    """
    Paths, loaded inputs and stage results of one invocation. Results of a
    stage run earlier in the same invocation are reused; otherwise they are
    read back from the output directory.
    """

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.off = cfg.core.utc_offset_hours
        self.threads = cfg.threads
        self.input_dir = os.path.abspath(cfg.paths.input_dir)
        self.output_dir = os.path.abspath(cfg.paths.output_dir)
        os.makedirs(self.output_dir, exist_ok=True)
        self.inputs: List[str] = []
        self.artifacts: List[str] = []
        self.cache: Dict[str, object] = {}

    # paths
    def input(self, name: str) -> str:
        path = os.path.join(self.input_dir, name)
        if not os.path.exists(path):
            raise MissingInputError(f"input file not found: {path}")
        self.inputs.append(path)
        return path

    def data_file(self, path: str) -> str:
        path = os.path.abspath(resolve_data_path(path))
        if not os.path.exists(path):
            raise MissingInputError(f"data file not found: {path}")
        self.inputs.append(path)
        return path

    def output(self, *parts: str) -> str:
        path = os.path.join(self.output_dir, *parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        self.artifacts.append(path)
        return path

    def previous(self, name: str, stage: str) -> str:
        path = os.path.join(self.output_dir, name)
        if not os.path.exists(path):
            raise MissingInputError(f"{name} not found in {self.output_dir}; run the '{stage}' stage first")
        return path

    def cached(self, key: str, build: Callable[[], object]):
        if key not in self.cache:
            self.cache[key] = build()
        return self.cache[key]

    # inputs
    def category_map(self) -> CategoryMap:
        return self.cached("category_map", lambda: CategoryMap.load(self.data_file(self.cfg.core.category_map)))

    def stations(self):
        return self.cached(
            "stations",
            lambda: parse_stations(self.input("stations.csv"), self.cfg.ingest.max_malformed_share),
        )

    def projection(self) -> Projection:
        return self.cached("projection", lambda: Projection.from_stations(self.stations()))

    def station_index(self) -> StationIndex:
        return self.cached(
            "station_index", lambda: StationIndex(self.stations(), self.projection(), self.cfg.ingest.grid_cell_m)
        )

    def pois(self):
        return self.cached("pois", lambda: parse_pois(self.input("pois.csv"), self.cfg.ingest.max_malformed_share))

    def study_window(self):
        ic = self.cfg.ingest
        if ic.study_start is None and ic.study_end is None:
            return None

        def edge(text):
            return None if text is None else day_start_epoch(date.fromisoformat(text), self.off)

        return edge(ic.study_start), edge(ic.study_end)

    def xdr(self):
        return self.cached(
            "xdr",
            lambda: parse_xdr(
                self.input("xdr.csv"), self.off, self.study_window(), self.cfg.ingest.max_malformed_share
            ),
        )

    def prepared(self):
        """Kept records and per-day verdicts of every user."""

        def build():
            ic = self.cfg.ingest
            kept, verdicts = {}, {}
            for user, records in self.xdr().by_user.items():
                records, days = prepare_user_records(
                    records, self.off, ic.exclude_weekends, ic.sparse_slot_minutes, ic.sparse_min_slots
                )
                verdicts[user] = days
                if records:
                    kept[user] = records
            return kept, verdicts

        return self.cached("prepared", build)

    def checkins(self):
        def build():
            raw = parse_checkins(self.input("checkins.csv"), self.off, self.cfg.ingest.max_malformed_share)
            return remove_visitors(raw, self.cfg.ingest.visitor_min_span_days)

        return self.cached("checkins", build)

    def all_checkins(self):
        return [c for user in sorted(self.checkins()) for c in self.checkins()[user]]

    # stage results
    def stays(self):
        def load():
            grouped = defaultdict(list)
            for row in read_jsonl(self.previous("stays.jsonl", "stays")):
                s = stay_from_dict(row)
                grouped[s.user_id].append(s)
            return dict(grouped)

        return self.cached("stays", load)

    def user_profiles(self):
        def load():
            rows = read_jsonl(self.previous("user_profiles.jsonl", "label"))
            return {p.user_id: p for p in map(staylabel.profile_from_dict, rows)}

        return self.cached("user_profiles", load)

    def _chains(self, key: str, name: str, stage: str):
        def load():
            grouped = defaultdict(list)
            for row in read_jsonl(self.previous(name, stage)):
                c = chain_from_dict(row)
                grouped[c.user_id].append(c)
            return dict(grouped)

        return self.cached(key, load)

    def chains(self):
        return self._chains("chains", "chains.jsonl", "label")

    def inferred(self):
        return self._chains("inferred", "inferred_chains.jsonl", "infer")

    def temporal_profiles(self) -> bayes.TemporalProfile:
        return self.cached(
            "temporal_profiles",
            lambda: bayes.TemporalProfile.from_csv(self.previous("profiles.csv", "profiles")),
        )

    def candidate_table(self) -> bayes.CandidateTable:
        return self.cached(
            "candidate_table",
            lambda: bayes.CandidateTable.build(
                self.pois(), self.station_index(), self.category_map(), self.cfg.bayes.candidate_buffer_m
            ),
        )

    def finish(self) -> None:
        write_json(os.path.join(self.output_dir, "resolved_config.json"), self.cfg.to_dict())
        manifest = build_manifest(self.inputs, self.artifacts, self.output_dir)
        write_json(os.path.join(self.output_dir, "manifest.json"), manifest)


def _flat(by_user: Dict[str, list]) -> list:
    return [x for user in sorted(by_user) for x in by_user[user]]


def _write_csv(run: Run, frame: pd.DataFrame, *parts: str, index: bool = True) -> str:
    path = run.output(*parts)
    frame.to_csv(path, index=index, float_format="%.10g")
    return path


# ---------------------------
# Stages
# ---------------------------
def stage_synth(run: Run) -> Dict:
    sc = run.cfg.synth
    world = synthgen.generate_world(sc)
    truth = synthgen.generate_agents(sc, world, run.off, run.threads)
    os.makedirs(run.input_dir, exist_ok=True)

    written = synthgen.write_world(
        world,
        run.input_dir,
        resolve_data_path(run.cfg.core.category_map),
        resolve_data_path(run.cfg.bayes.profession_map),
    )
    xdr = synthgen.emit_xdr(truth, world, sc, run.threads)
    xdr_path = os.path.join(run.input_dir, "xdr.csv")
    xdr.to_csv(xdr_path, index=False, float_format="%.7f")
    checkins = synthgen.emit_checkins(truth, sc)
    checkin_path = os.path.join(run.input_dir, "checkins.csv")
    checkins.to_csv(checkin_path, index=False)
    truth_path = os.path.join(run.input_dir, "truth.jsonl")
    synthgen.write_truth(truth_path, truth, world)

    run.artifacts.extend(written + [xdr_path, checkin_path, truth_path])
    run.cache.clear()
    return {
        "agents": len(truth.agents),
        "commuters": sum(a.commuter for a in truth.agents),
        "stations": len(world.stations),
        "pois": len(world.pois),
        "records": len(xdr),
        "checkins": len(checkins),
    }


def stage_ingest(run: Run) -> Dict:
    dataset = run.xdr()
    kept, verdicts = run.prepared()
    rows = [(u, d.isoformat(), v) for u in sorted(verdicts) for d, v in sorted(verdicts[u].items())]
    days = pd.DataFrame(rows, columns=["user_id", "day", "verdict"])
    _write_csv(run, days, "day_verdicts.csv", index=False)

    poi_types = map_categories(run.pois(), run.category_map())
    checkin_types = map_categories(run.all_checkins(), run.category_map())
    summary = {
        "xdr": dataset.stats.as_dict(),
        "users": dataset.n_users,
        "records": dataset.n_records,
        "users_kept": len(kept),
        "records_kept": sum(len(v) for v in kept.values()),
        "days": days["verdict"].value_counts().sort_index().to_dict() if len(days) else {},
        "stations": len(run.stations()),
        "pois_by_type": dict(sorted(poi_types.items())),
        "checkin_users": len(run.checkins()),
        "checkins_by_type": dict(sorted(checkin_types.items())),
        "unknown_categories": dict(sorted(run.category_map().unknown.items())),
    }
    write_json(run.output("ingest_summary.json"), summary)
    return {k: summary[k] for k in ("users", "records", "users_kept", "records_kept", "stations")}


def stage_stays(run: Run) -> Dict:
    kept, _ = run.prepared()
    stays = staydetect.detect_all_stays(kept, run.projection(), run.cfg.stays, run.station_index(), run.threads)
    run.cache["stays"] = stays
    write_jsonl(run.output("stays.jsonl"), (stay_to_dict(s, run.projection()) for s in _flat(stays)))
    flat = _flat(stays)
    return {
        "users": len(stays),
        "stays": sum(1 for s in flat if s.is_stay),
        "pass_bys": sum(1 for s in flat if not s.is_stay),
    }


def stage_label(run: Run) -> Dict:
    stays = run.stays()
    _, verdicts = run.prepared()
    lc = run.cfg.label
    profiles = {u: staylabel.build_profile(u, stays[u], lc, run.off) for u in sorted(stays)}
    run.cache["user_profiles"] = profiles

    chains = {}
    for user, profile in profiles.items():
        if not profile.is_resident:
            continue
        days = {d for d, v in verdicts.get(user, {}).items() if v == "kept"}
        labelled = staylabel.label_stays(stays[user], profile)
        chains[user] = staylabel.build_chains(labelled, run.off, run.cfg.ingest.exclude_weekends, days)
    run.cache["chains"] = chains

    write_jsonl(run.output("user_profiles.jsonl"), (staylabel.profile_to_dict(p, run.projection()) for p in profiles.values()))
    write_jsonl(run.output("chains.jsonl"), (chain_to_dict(c, run.projection()) for c in _flat(chains)))
    n_res = sum(p.is_resident for p in profiles.values())
    n_com = sum(p.is_commuter for p in profiles.values())
    logger.info(f"✅ Labelled {len(profiles)} user(s): {n_res} resident(s), {n_com} commuter(s)")
    return {"users": len(profiles), "residents": n_res, "commuters": n_com, "chains": len(_flat(chains))}


def stage_profiles(run: Run) -> Dict:
    bc = run.cfg.bayes
    profiles = bayes.build_temporal_profiles(
        run.all_checkins(), run.category_map(), run.off, bc.n_slots, bc.laplace_pseudo_count
    )
    run.cache["temporal_profiles"] = profiles
    profiles.to_csv(run.output("profiles.csv"))
    return {"checkin_users": len(run.checkins()), "counts": {a.value: n for a, n in profiles.counts.items()}}


def stage_infer(run: Run) -> Dict:
    chains, profiles, table = run.chains(), run.temporal_profiles(), run.candidate_table()
    inferred = {u: bayes.infer_chains(chains[u], profiles, table, run.off) for u in sorted(chains)}
    run.cache["inferred"] = inferred
    write_jsonl(run.output("inferred_chains.jsonl"), (chain_to_dict(c, run.projection()) for c in _flat(inferred)))

    arrivals = bayes.inferred_arrival_distribution(_flat(inferred), run.cfg.bayes.n_slots, run.off)
    _write_csv(run, arrivals, "inferred_arrivals.csv")

    profession_map = bayes.ProfessionMap.load(run.data_file(run.cfg.bayes.profession_map))
    professions = {
        u: bayes.infer_profession(p.work_station, table, profession_map)
        for u, p in sorted(run.user_profiles().items())
        if p.is_commuter
    }
    _write_csv(run, pd.DataFrame(sorted(professions.items()), columns=["user_id", "profession"]), "professions.csv", index=False)
    _write_csv(run, bayes.profession_distribution(professions).to_frame(), "profession_distribution.csv")
    return {"users": len(inferred), "chains": len(_flat(inferred)), "commuters_with_profession": len(professions)}


def stage_validate(run: Run) -> Dict:
    result = validation_report(
        run.inferred(), run.all_checkins(), run.category_map(), run.cfg.validate, run.off, run.threads
    )
    write_json(run.output("validation_report.json"), result.to_dict())
    _write_csv(run, result.series_frame(), "validation_series.csv")
    _write_csv(run, result.mape_frame(), "validation_mape.csv")
    if result.ci_widths is not None:
        _write_csv(run, result.ci_widths, "validation_ci.csv")
    render_validation_pdf(result, run.output("validation_report.pdf"))
    return {"accuracy": result.accuracy, "ci_error": result.ci_error}


def _documents(run: Run):
    lc = run.cfg.lda
    docs = lda.tokenize_chains(
        _flat(run.inferred()),
        lc.day_start_hour,
        lc.day_end_hour,
        lc.slot_minutes,
        lc.max_gap_share,
        lc.document_unit,
        run.off,
    )
    if not docs:
        raise PipelineError("no activity documents survived the Gap filter")
    return docs


def stage_lda(run: Run) -> Dict:
    lc = run.cfg.lda
    docs = _documents(run)
    model = lda.gibbs_fit(docs, lc.n_topics, lc.alpha, lc.beta, lc.iterations, lc.burn_in, lc.seed, progress=True)
    with open(run.output("model.json"), "w", encoding="utf-8") as f:
        f.write(model.to_json())
        f.write("\n")

    scores, coherence = lda.umass_coherence(model, docs, lc.top_n)
    topics = pd.DataFrame(model.phi, columns=list(model.vocabulary))
    topics.index.name = "topic"
    topics["top_words"] = [" ".join(model.vocabulary[w] for w in model.top_words(k, lc.top_n)) for k in range(model.n_topics)]
    topics["coherence"] = scores
    _write_csv(run, topics, "topics.csv")

    distances = pd.DataFrame(lda.topic_distance_matrix(model))
    distances.index.name = "topic"
    _write_csv(run, distances, "topic_distances.csv")

    groups = lda.assign_groups(model)
    run.cache["groups"] = groups
    _write_csv(run, pd.DataFrame(sorted(groups.items()), columns=["user_id", "group"]), "groups.csv", index=False)
    return {"documents": len(docs), "K": model.n_topics, "coherence": coherence, "users_grouped": len(groups)}


def stage_sweep(run: Run) -> Dict:
    lc = run.cfg.lda
    docs = _documents(run)
    frame = lda.hyperparameter_sweep(
        docs, lc.sweep_alphas, lc.sweep_betas, lc.sweep_topics, lc.sweep_iterations, lc.sweep_burn_in, lc.seed, lc.top_n, run.threads
    )
    _write_csv(run, frame, "sweep.csv", index=False)
    ok = frame[frame["error"] == ""]
    best = ok.loc[ok["coherence"].idxmax()].to_dict() if len(ok) else None
    return {"cells": len(frame), "failed": int((frame["error"] != "").sum()), "best": best}


def _groups(run: Run) -> Optional[Dict[str, int]]:
    if "groups" in run.cache:
        return run.cache["groups"]
    path = os.path.join(run.output_dir, "groups.csv")
    if not os.path.exists(path):
        return None
    frame = pd.read_csv(path, dtype={"user_id": str})
    return dict(zip(frame["user_id"], frame["group"].astype(int)))


def stage_analytics(run: Run) -> Dict:
    ac = run.cfg.analytics
    chains = _flat(run.inferred())
    profiles = run.user_profiles()
    kept, _ = run.prepared()

    def table(frame: pd.DataFrame, name: str, index: bool = True) -> None:
        _write_csv(run, frame, "analytics", f"{name}.csv", index=index)
        analytics.write_gnuplot(frame, run.output("analytics", f"{name}.dat"), index=index)

    for name, frame in analytics.record_statistics(kept, run.off).items():
        table(frame, name, index=False)

    locations, location_fit = analytics.daily_location_count(chains)
    table(locations, "daily_locations", index=False)
    travel, travel_fit = analytics.daily_travel_distance(chains, profiles)
    table(travel, "daily_travel_km", index=False)
    fits = {
        "daily_locations": location_fit.as_dict() if location_fit else None,
        "daily_travel_km": travel_fit.as_dict() if travel_fit else None,
    }
    write_json(run.output("analytics", "lognormal_fits.json"), fits)

    table(analytics.trip_purpose_fractions(chains, run.off), "trip_purposes")
    for name in list(run.cfg.validate.activity_types) + [ActivityType.WORK.value]:
        activity = ActivityType.parse(name)
        for cohort, frame in analytics.arrival_duration_hist(chains, activity, profiles, utc_offset_hours=run.off).items():
            table(frame, f"arrival_duration_{activity.value}_{cohort}")
    for t1, t2 in ac.transition_pairs:
        matrix = analytics.transition_matrix(chains, t1, t2, run.off)
        table(matrix.to_frame(), f"transitions_{t1:g}_{t2:g}")
    table(analytics.time_use_summary(chains, profiles), "time_use")
    table(analytics.activity_occupancy(chains, ac.occupancy_slot_minutes, run.off), "occupancy")
    table(analytics.od_flows(chains, ac.od_start_hour, ac.od_end_hour, ac.od_min_share, run.off), "od_flows", index=False)

    groups = _groups(run)
    if groups:
        table(analytics.group_profiles(chains, groups, profiles), "group_profiles", index=False)

    summary = {"user_days": len(chains), "fits": fits}
    truth_path = os.path.join(run.input_dir, "truth.jsonl")
    if os.path.exists(truth_path):
        truth = synthgen.read_truth(run.input("truth.jsonl"), run.projection())
        score = synthgen.score_pipeline(truth, run.stays(), profiles, run.off, chains_by_user=run.inferred())
        write_json(run.output("synthetic_score.json"), score)
        summary["synthetic_score"] = score
    return summary


STAGE_FUNCS: Dict[str, Callable[[Run], Dict]] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "stays": stage_stays,
    "label": stage_label,
    "profiles": stage_profiles,
    "infer": stage_infer,
    "validate": stage_validate,
    "lda": stage_lda,
    "sweep": stage_sweep,
    "analytics": stage_analytics,
}


# ---------------------------
# Entry point
# ---------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.py", description="Activity chain reconstruction from mobile-phone records.")
    parser.add_argument("stage", choices=STAGES + ("all",), help="stage to run; 'all' runs ingest through analytics")
    parser.add_argument("--config", default=None, help="JSON config (default: $ACTIVITY_CHAINS_CONFIG or built-ins)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. lda.n_topics=5")
    parser.add_argument("--threads", type=int, default=None, help="worker threads per stage")
    return parser


def run(stage: str, config_path: Optional[str] = None, overrides: Optional[List[str]] = None, threads: Optional[int] = None, out=None) -> int:
    """Run one stage (or all) and return the process exit code."""
    out = out or sys.stdout
    try:
        overrides = list(overrides or [])
        if threads is not None:
            overrides.append(f"threads={threads}")
        cfg = load_config(config_path, overrides)
        run_ctx = Run(cfg)
        setup_logging(os.path.join(run_ctx.output_dir, "logs"))
        for name in ALL_STAGES if stage == "all" else (stage,):
            logger.info(f"🚀 Stage {name} started")
            summary = STAGE_FUNCS[name](run_ctx)
            run_ctx.finish()
            out.write(json.dumps({"stage": name, **summary}, sort_keys=True, default=str) + "\n")
            out.flush()
            logger.info(f"✅ Stage {name} finished")
        return 0
    except UsageError as e:
        logger.error(f"❌ {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except PipelineError as e:
        logger.exception(f"❌ Stage failed: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Unexpected error: {e}")
        return 1


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.stage, args.config, args.overrides, args.threads)


# ---------------------------
# Main
# ---------------------------
if __name__ == "__main__":
    sys.exit(main())

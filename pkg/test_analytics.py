from datetime import timedelta

import numpy as np
import pytest

from services.analytics import (
    GAP,
    STATES,
    activity_occupancy,
    arrival_duration_hist,
    chain_travel_km,
    daily_location_count,
    daily_travel_distance,
    fit_lognormal,
    group_profiles,
    od_flows,
    record_statistics,
    time_use_summary,
    transition_matrix,
    trip_purpose_fractions,
    write_gnuplot,
)
from services.core_model import ActivityType, PlaceLabel, ProjectedPoint, Record, Trip, TripPurpose
from services.staylabel import UserProfile, build_chains, split_at_midnight

HOME = ActivityType.HOME
WORK = ActivityType.WORK


@pytest.fixture
def commuter_day(make_stay, make_chain, at, monday):
    """Home 00-08, pass-by 08:08-08:17, office 09-17 at 3 km, home 18-24."""
    home_am = make_stay(at(monday, 0), at(monday, 8), label=PlaceLabel.HOME, activity=HOME, station_id="H")
    passby = make_stay(at(monday, 8, 8), at(monday, 8, 17), x=1500.0, place_id=5, station_id="M")
    office = make_stay(at(monday, 9), at(monday, 17), x=3000.0, place_id=1, label=PlaceLabel.WORK, activity=WORK, station_id="W")
    home_pm = make_stay(at(monday, 18), at(monday, 24), label=PlaceLabel.HOME, activity=HOME, station_id="H")
    trips = [Trip(home_am, office, TripPurpose.HBW), Trip(office, home_pm, TripPurpose.HBW)]
    return make_chain([home_am, passby, office, home_pm], trips=trips)


@pytest.fixture
def profiles():
    commuter = UserProfile(
        "u1", home=ProjectedPoint(0, 0), work=ProjectedPoint(3000, 0), is_resident=True, is_commuter=True
    )
    return {"u1": commuter}


def test_lognormal_mle():
    rng = np.random.default_rng(8)
    fit = fit_lognormal(rng.lognormal(mean=1.2, sigma=0.6, size=10_000))
    assert fit.mu == pytest.approx(1.2, abs=0.03)
    assert fit.sigma == pytest.approx(0.6, abs=0.03)
    assert fit.n == 10_000
    assert fit_lognormal([2.0, 2.0, 0.0, -1.0]) is None


def test_location_count(commuter_day, make_stay, make_chain, at, monday):
    home_only = make_chain([make_stay(at(monday, 0), at(monday, 24), activity=HOME)], user_id="u1")
    frame, _ = daily_location_count([home_only, commuter_day])
    assert frame["locations"].tolist() == [1, 2]


def test_travel_distance(commuter_day, profiles, make_stay, make_chain, at, monday):
    assert chain_travel_km(commuter_day, ProjectedPoint(0, 0)) == pytest.approx(6.0)
    stranger = make_chain([make_stay(at(monday, 9), at(monday, 10))], user_id="nobody")
    frame, fit = daily_travel_distance([commuter_day, stranger], profiles)
    assert frame["user_id"].tolist() == ["u1"]
    assert frame["km"].tolist() == [pytest.approx(6.0)]
    assert fit is None


def test_trip_purpose_by_departure_hour(commuter_day):
    shares = trip_purpose_fractions([commuter_day])
    assert shares.loc[8, "HBW"] == 1.0
    assert shares.loc[17, "HBW"] == 1.0
    assert shares.loc[8, "trips"] == 1
    assert shares.loc[3, ["HBW", "HBO", "NHB"]].sum() == 0.0


def test_arrival_duration_cell(commuter_day, profiles):
    hists = arrival_duration_hist([commuter_day], WORK, profiles)
    assert hists["commuter"].loc[9.0, 8.0] == 1
    assert hists["commuter"].to_numpy().sum() == 1
    assert hists["non_commuter"].to_numpy().sum() == 0
    assert arrival_duration_hist([commuter_day], WORK)["non_commuter"].loc[9.0, 8.0] == 1


def test_overnight_stay_counts_once(make_stay, make_chain, at, monday):
    stay = make_stay(at(monday, 22), at(monday + timedelta(days=1), 7), activity=ActivityType.LEISURE_SPORT)
    chains = [make_chain([piece], day=day) for day, piece in split_at_midnight(stay, 8.0)]
    hist = arrival_duration_hist(chains, ActivityType.LEISURE_SPORT)["non_commuter"]
    assert hist.loc[22.0, 9.0] == 1
    assert hist.to_numpy().sum() == 1


def test_home_to_work_transition(commuter_day):
    tm = transition_matrix([commuter_day], 7.0, 10.0)
    probs = tm.to_frame()
    assert probs.loc["Home", "Work"] == 1.0
    assert probs.loc["Home", "n_from"] == 1
    assert probs.drop(index="Home")[list(STATES)].to_numpy().sum() == 0.0
    assert transition_matrix([commuter_day], 8.2, 12.0).counts[STATES.index(GAP), STATES.index("Work")] == 1
    with pytest.raises(ValueError):
        transition_matrix([commuter_day], 10.0, 7.0)


def test_time_use_and_groups(commuter_day, profiles):
    summary = time_use_summary([commuter_day], profiles)
    assert summary.loc["Home", "commuter"] == pytest.approx(14.0)
    assert summary.loc["Work", "commuter"] == pytest.approx(8.0)
    assert summary.loc["PassBy", "commuter"] == pytest.approx(9 / 60)
    assert summary["non_commuter"].sum() == 0.0

    groups = group_profiles([commuter_day], {"u1": 2}, profiles)
    row = groups.iloc[0]
    assert row["group"] == 2 and row["n_users"] == 1
    assert row["Home"] == pytest.approx(14 / 22)
    assert row["mean_travel_km"] == pytest.approx(6.0)
    assert row["mean_locations"] == 2.0


def test_od_flows_window(commuter_day):
    flows = od_flows([commuter_day], start_hour=7.0, end_hour=9.0)
    assert flows[["origin_station", "destination_station", "purpose", "trips"]].values.tolist() == [["H", "W", "HBW", 1]]
    assert flows["share"].tolist() == [1.0]
    both = od_flows([commuter_day], start_hour=0.0, end_hour=24.0)
    assert both["trips"].sum() == 2
    assert od_flows([commuter_day], start_hour=0.0, end_hour=24.0, min_share=0.6).empty


def test_occupancy(commuter_day):
    occ = activity_occupancy([commuter_day])
    assert occ.shape == (144, len(ActivityType) + 2)
    assert occ.loc["03:00", "Home"] == 1.0
    assert occ.loc["08:10", "PassBy"] == 1.0
    assert occ.loc["08:30", GAP] == 1.0
    assert occ.loc["12:00", "Work"] == 1.0
    assert np.allclose(occ.sum(axis=1), 1.0)


def test_record_statistics(at, monday):
    records = {
        "u1": [Record("u1", at(monday, 8, m), 116.4, 39.9, "S1") for m in (0, 3, 13)],
        "u2": [Record("u2", at(monday + timedelta(days=1), 20), 116.4, 39.9, "S2")],
    }
    stats = record_statistics(records)
    assert stats["records_per_hour"].set_index("hour").loc[8, "records"] == 3
    assert stats["records_per_user_day"]["records"].tolist() == [3, 1]
    intervals = dict(zip(stats["record_intervals"]["interval_minutes"], stats["record_intervals"]["count"]))
    assert intervals["1-5"] == 1 and intervals["10-30"] == 1
    summary = stats["record_summary"].iloc[0]
    assert summary["records"] == 4 and summary["median_interval_minutes"] == 6.5


def test_gnuplot_file(tmp_path, commuter_day):
    path = tmp_path / "purposes.dat"
    write_gnuplot(trip_purpose_fractions([commuter_day]), str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "# hour HBW HBO NHB trips"
    assert len(lines) == 25
    assert lines[9].split()[:2] == ["8", "1.0"]


def test_chains_from_labelled_stays_feed_analytics(make_stay, at, monday):
    stays = [
        make_stay(at(monday, 0), at(monday, 8), label=PlaceLabel.HOME, activity=HOME),
        make_stay(at(monday, 8, 30), at(monday, 10), x=800.0, place_id=3, label=PlaceLabel.OTHER,
                  activity=ActivityType.DRINK_EAT),
        make_stay(at(monday, 11), at(monday, 23), label=PlaceLabel.HOME, activity=HOME),
    ]
    (chain,) = build_chains(stays, 8.0)
    shares = trip_purpose_fractions([chain])
    assert shares.loc[8, "HBO"] == 1.0 and shares.loc[10, "HBO"] == 1.0

from collections import Counter

import numpy as np
import pandas as pd
import pytest

from services.bayes import (
    OTHER_PROFESSION,
    CandidateTable,
    ProfessionMap,
    TemporalProfile,
    build_temporal_profiles,
    candidate_pois,
    infer_activity,
    infer_chain,
    infer_profession,
    inferred_arrival_distribution,
    posterior,
    profession_distribution,
    profession_from_candidates,
    type_mixture,
)
from services.core_model import (
    INFERABLE_TYPES,
    ActivityType,
    BaseStation,
    CheckIn,
    PlaceLabel,
    POI,
    ProjectedPoint,
    Projection,
    StayKind,
    Trip,
)
from services.errors import InferenceError
from services.helpers import resolve_data_path
from services.ingest import StationIndex

PROJ = Projection(116.4, 39.9)


def _station(sid, x, y):
    lon, lat = PROJ.inverse(ProjectedPoint(x, y))
    return BaseStation(sid, lon, lat)


def _poi(pid, x, y, category):
    lon, lat = PROJ.inverse(ProjectedPoint(x, y))
    return POI(pid, lon, lat, category)


@pytest.fixture
def station_index():
    return StationIndex([_station("A", 0, 0), _station("B", 2000, 0)], PROJ)


@pytest.fixture
def uniform_profiles(category_map):
    return build_temporal_profiles([], category_map)


def _flat_profiles(**overrides):
    probs = {a: np.full(144, 1 / 144) for a in INFERABLE_TYPES}
    for name, (slot, value) in overrides.items():
        probs[ActivityType.parse(name)][slot] = value
    return TemporalProfile(probs=probs)


# ---------------------------
# Temporal profiles
# ---------------------------
def test_profiles_without_checkins_are_uniform(uniform_profiles):
    for a in INFERABLE_TYPES:
        assert uniform_profiles.probs[a] == pytest.approx(np.full(144, 1 / 144))
        assert uniform_profiles.counts[a] == 0


@pytest.mark.parametrize("n", [1, 10, 250])
def test_profile_peaks_with_add_one_smoothing(category_map, at, monday, n):
    checkins = [CheckIn(f"u{i}", at(monday, 12, 3), "Restaurant") for i in range(n)]
    profiles = build_temporal_profiles(checkins, category_map)
    drink = profiles.probs[ActivityType.DRINK_EAT]
    assert drink[72] == pytest.approx((n + 1) / (n + 144))
    assert drink[0] == pytest.approx(1 / (n + 144))
    assert drink.sum() == pytest.approx(1.0)
    assert profiles.counts[ActivityType.DRINK_EAT] == n


def test_profile_slot_of(uniform_profiles, at, monday):
    assert uniform_profiles.slot_of(at(monday, 0), 8.0) == 0
    assert uniform_profiles.slot_of(at(monday, 12, 9), 8.0) == 72
    assert uniform_profiles.slot_of(at(monday, 23, 59), 8.0) == 143


def test_profiles_csv(tmp_path, category_map, at, monday):
    profiles = build_temporal_profiles([CheckIn("u", at(monday, 8), "Gym")], category_map)
    path = tmp_path / "profiles.csv"
    profiles.to_csv(str(path))
    loaded = TemporalProfile.from_csv(str(path))
    assert loaded.n_slots == 144
    for a in INFERABLE_TYPES:
        np.testing.assert_array_equal(loaded.probs[a], profiles.probs[a])


# ---------------------------
# Candidates and mixtures
# ---------------------------
def test_candidate_pois_buffer_and_voronoi(station_index):
    near = _poi("near", 0, 100, "Restaurant")
    far = _poi("far", 0, 1200, "Restaurant")
    other_cell = _poi("other", 1200, 0, "Restaurant")
    pois = [near, far, other_cell]
    assert candidate_pois("A", pois, station_index) == [near]
    assert candidate_pois(BaseStation("B", 0, 0), pois, station_index) == [other_cell]


def test_candidate_table_matches_per_station_scan(station_index, category_map):
    rng = np.random.default_rng(3)
    pois = [
        _poi(f"p{i}", float(x), float(y), "Supermarket" if i % 2 else "Park")
        for i, (x, y) in enumerate(rng.uniform(-1500, 3500, size=(200, 2)))
    ]
    table = CandidateTable.build(pois, station_index, category_map)
    for sid in ("A", "B"):
        assert list(table.candidates(sid)) == candidate_pois(sid, pois, station_index)
    assert table.mixture("missing").is_empty


def test_type_mixture_shares(category_map):
    mixture = type_mixture([_poi("a", 0, 0, "Restaurant"), _poi("b", 0, 0, "Supermarket")], category_map)
    assert dict(mixture.proportions) == {ActivityType.DRINK_EAT: 0.5, ActivityType.SHOPPING: 0.5}
    assert type_mixture([ActivityType.EDUCATION]).proportions == {ActivityType.EDUCATION: 1.0}
    assert type_mixture([ActivityType.HOME, ActivityType.WORK]).is_empty


def test_type_mixture_counts_match_counter():
    rng = np.random.default_rng(11)
    types = list(ActivityType)
    for _ in range(50):
        drawn = [types[i] for i in rng.integers(len(types), size=int(rng.integers(1, 40)))]
        kept = Counter(a for a in drawn if a in INFERABLE_TYPES)
        mixture = type_mixture(drawn)
        assert mixture.n_candidates == sum(kept.values())
        for a in INFERABLE_TYPES:
            expected = kept[a] / mixture.n_candidates if mixture.n_candidates else 0.0
            assert mixture.proportions.get(a, 0.0) == pytest.approx(expected)


# ---------------------------
# Posterior
# ---------------------------
def test_posterior_two_types():
    profiles = _flat_profiles(DrinkEat=(72, 0.02), Shopping=(72, 0.01))
    mixture = type_mixture([ActivityType.DRINK_EAT, ActivityType.SHOPPING])
    post = posterior(mixture, 72, profiles)
    assert post.probs[ActivityType.DRINK_EAT] == pytest.approx(2 / 3)
    assert post.probs[ActivityType.SHOPPING] == pytest.approx(1 / 3)
    assert post.argmax is ActivityType.DRINK_EAT


def test_posterior_tie_goes_to_declaration_order(uniform_profiles):
    mixture = type_mixture([ActivityType.EDUCATION, ActivityType.SHOPPING])
    assert posterior(mixture, 10, uniform_profiles).argmax is ActivityType.SHOPPING


def test_posterior_matches_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        probs = {a: rng.dirichlet(np.ones(144)) for a in INFERABLE_TYPES}
        profiles = TemporalProfile(probs=probs)
        drawn = [INFERABLE_TYPES[i] for i in rng.integers(len(INFERABLE_TYPES), size=int(rng.integers(1, 12)))]
        mixture = type_mixture(drawn)
        slot = int(rng.integers(144))

        weights = {a: float(probs[a][slot]) * (drawn.count(a) / len(drawn)) for a in INFERABLE_TYPES}
        total = sum(weights.values())
        post = posterior(mixture, slot, profiles)
        for a in INFERABLE_TYPES:
            assert abs(post.probs[a] - weights[a] / total) <= 1e-12
        assert sum(post.probs.values()) == pytest.approx(1.0, abs=1e-12)
        assert post.argmax is max(INFERABLE_TYPES, key=lambda a: weights[a])


def _random_instance(rng):
    probs = {a: rng.dirichlet(np.ones(144)) for a in INFERABLE_TYPES}
    drawn = [INFERABLE_TYPES[i] for i in rng.integers(len(INFERABLE_TYPES), size=int(rng.integers(1, 12)))]
    return probs, type_mixture(drawn), int(rng.integers(144))


def test_posterior_argmax_ignores_slot_scaling():
    rng = np.random.default_rng(31)
    for _ in range(300):
        probs, mixture, slot = _random_instance(rng)
        scaled = {a: v.copy() for a, v in probs.items()}
        factor = float(rng.uniform(0.01, 100.0))
        for v in scaled.values():
            v[slot] *= factor
        before = posterior(mixture, slot, TemporalProfile(probs=probs))
        after = posterior(mixture, slot, TemporalProfile(probs=scaled))
        assert after.argmax is before.argmax


def test_posterior_grows_with_own_profile():
    rng = np.random.default_rng(37)
    for _ in range(300):
        probs, mixture, slot = _random_instance(rng)
        target = INFERABLE_TYPES[int(rng.integers(len(INFERABLE_TYPES)))]
        raised = {a: v.copy() for a, v in probs.items()}
        raised[target][slot] *= float(rng.uniform(1.1, 5.0))
        before = posterior(mixture, slot, TemporalProfile(probs=probs))
        after = posterior(mixture, slot, TemporalProfile(probs=raised))
        assert after.probs[target] >= before.probs[target]


def test_posterior_rejects_bad_input(uniform_profiles):
    with pytest.raises(InferenceError):
        posterior(type_mixture([]), 0, uniform_profiles)
    with pytest.raises(ValueError):
        posterior(type_mixture([ActivityType.OTHER]), 144, uniform_profiles)
    empty_slot = {a: np.ones(144) for a in INFERABLE_TYPES}
    empty_slot[ActivityType.OTHER][5] = 0.0
    with pytest.raises(InferenceError):
        posterior(type_mixture([ActivityType.OTHER]), 5, TemporalProfile(probs=empty_slot))


def test_zero_profile_from_csv_raises(tmp_path, category_map):
    path = str(tmp_path / "profiles.csv")
    build_temporal_profiles([], category_map).to_csv(path)
    frame = pd.read_csv(path, index_col="activity_type")
    frame.loc[ActivityType.SHOPPING.value] = 0.0
    frame.to_csv(path)
    profiles = TemporalProfile.from_csv(path)
    with pytest.raises(InferenceError):
        posterior(type_mixture([ActivityType.SHOPPING]), 60, profiles)


# ---------------------------
# Activity inference
# ---------------------------
@pytest.fixture
def education_table():
    lone = _poi("school", 0, 50, "School")
    return CandidateTable(by_station={"A": (lone,)}, mixtures={"A": type_mixture([ActivityType.EDUCATION])})


def test_infer_activity(make_stay, at, monday, uniform_profiles, education_table):
    home = make_stay(at(monday, 0), at(monday, 7), station_id="A", label=PlaceLabel.HOME)
    work = make_stay(at(monday, 9), at(monday, 17), station_id="Z", label=PlaceLabel.WORK)
    school = make_stay(at(monday, 9), at(monday, 12), station_id="A", label=PlaceLabel.OTHER)
    nowhere = make_stay(at(monday, 9), at(monday, 12), station_id="Z", label=PlaceLabel.OTHER)
    passby = make_stay(at(monday, 9), at(monday, 9, 5), station_id="A", kind=StayKind.PASS_BY)

    assert infer_activity(home, uniform_profiles, education_table) is ActivityType.HOME
    assert infer_activity(work, uniform_profiles, education_table) is ActivityType.WORK
    assert infer_activity(school, uniform_profiles, education_table) is ActivityType.EDUCATION
    assert infer_activity(nowhere, uniform_profiles, education_table) is ActivityType.OTHER
    assert infer_activity(passby, uniform_profiles, education_table) is None


def test_infer_chain_rewires_trips(make_stay, make_chain, at, monday, uniform_profiles, education_table):
    home = make_stay(at(monday, 0), at(monday, 8), station_id="Z", label=PlaceLabel.HOME)
    school = make_stay(at(monday, 9), at(monday, 12), x=900.0, place_id=1, station_id="A", label=PlaceLabel.OTHER)
    chain = make_chain([home, school], trips=[Trip(home, school)])
    inferred = infer_chain(chain, uniform_profiles, education_table)
    assert [s.activity for s in inferred.stays] == [ActivityType.HOME, ActivityType.EDUCATION]
    assert inferred.trips[0].origin is inferred.stays[0]
    assert inferred.trips[0].destination is inferred.stays[1]


def test_inferred_arrival_distribution(make_stay, make_chain, at, monday):
    stays = [
        make_stay(at(monday, 0), at(monday, 8), label=PlaceLabel.HOME, activity=ActivityType.HOME),
        make_stay(at(monday, 12), at(monday, 13), place_id=1, activity=ActivityType.DRINK_EAT),
    ]
    frame = inferred_arrival_distribution([make_chain(stays)])
    assert frame.shape == (len(ActivityType), 144)
    assert frame.loc["DrinkEat", "slot_72"] == 1.0
    assert frame.loc["Home", "slot_0"] == 1.0
    assert frame.loc["Education"].sum() == 0.0


# ---------------------------
# Professions
# ---------------------------
@pytest.fixture
def profession_map():
    return ProfessionMap.load(resolve_data_path("data/profession_map.csv"))


def test_profession_majority_and_fallbacks(profession_map):
    sales = [_poi(f"s{i}", 0, 0, "Supermarket") for i in range(3)]
    assert profession_from_candidates(sales, profession_map) == "Sales"
    assert profession_from_candidates([], profession_map) == OTHER_PROFESSION
    assert profession_from_candidates([_poi("x", 0, 0, "Nowhere in the map")], profession_map) == OTHER_PROFESSION
    tie = [_poi("a", 0, 0, "Supermarket"), _poi("b", 0, 0, "Hospital")]
    assert profession_from_candidates(tie, profession_map) == OTHER_PROFESSION


def test_infer_profession_from_work_station(profession_map):
    table = CandidateTable(by_station={"A": (_poi("h", 0, 0, "Hospital"),)}, mixtures={})
    assert infer_profession("A", table, profession_map) == "Healthcare"
    assert infer_profession(None, table, profession_map) == OTHER_PROFESSION
    assert infer_profession("B", table, profession_map) == OTHER_PROFESSION


def test_profession_distribution():
    shares = profession_distribution({"u1": "Sales", "u2": "Sales", "u3": "Other", "u4": "Healthcare"})
    assert shares["Sales"] == 0.5
    assert shares.sum() == pytest.approx(1.0)
    assert profession_distribution({}).empty

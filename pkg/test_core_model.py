import math
from datetime import date

import numpy as np
import pytest

from services.core_model import (
    ACTIVITY_ORDER,
    INFERABLE_TYPES,
    ActivityType,
    PlaceLabel,
    ProjectedPoint,
    Projection,
    StayKind,
    Trip,
    TripPurpose,
    chain_from_dict,
    chain_to_dict,
    day_start_epoch,
    euclidean_distance,
    is_weekend,
    local_day,
    parse_timestamp,
    project,
    seconds_of_day,
    unproject,
)
from services.errors import CoordinateError

ORIGIN = (121.47, 31.23)


def haversine(lon1, lat1, lon2, lat2):
    r = 6_371_000.0
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * r * math.asin(math.sqrt(a))


def test_taxonomy_has_nine_types_and_seven_inferable():
    assert len(ACTIVITY_ORDER) == 9
    assert len(INFERABLE_TYPES) == 7
    assert ActivityType.HOME not in INFERABLE_TYPES
    assert ActivityType.WORK not in INFERABLE_TYPES
    assert ActivityType.OTHER in INFERABLE_TYPES


def test_activity_type_parse_is_lenient():
    assert ActivityType.parse("DrinkEat") is ActivityType.DRINK_EAT
    assert ActivityType.parse("drink_eat") is ActivityType.DRINK_EAT
    assert ActivityType.parse("Drink & Eat") is ActivityType.DRINK_EAT
    with pytest.raises(ValueError):
        ActivityType.parse("Nightclubbing")


def test_origin_projects_to_origin():
    p = project(*ORIGIN, ORIGIN)
    assert p.x == pytest.approx(0.0, abs=1e-9)
    assert p.y == pytest.approx(0.0, abs=1e-9)


def test_one_millidegree_north_is_111_metres():
    p = project(ORIGIN[0], ORIGIN[1] + 0.001, ORIGIN)
    assert p.y == pytest.approx(6_371_000.0 * math.pi / 180.0 * 0.001, abs=1e-6)
    assert p.y == pytest.approx(111.19, abs=0.01)


def test_projection_round_trip_under_one_metre():
    rng = np.random.default_rng(1)
    for _ in range(200):
        lon = ORIGIN[0] + rng.uniform(-0.9, 0.9)
        lat = ORIGIN[1] + rng.uniform(-0.8, 0.8)
        p = project(lon, lat, ORIGIN)
        back = project(*unproject(p, ORIGIN), ORIGIN)
        assert euclidean_distance(p, back) < 1.0


def test_euclidean_distance_basics():
    a = ProjectedPoint(0.0, 0.0)
    assert euclidean_distance(a, a) == 0.0
    assert euclidean_distance(a, ProjectedPoint(3.0, 4.0)) == 5.0


def test_euclidean_matches_haversine_near_centroid():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        pts = []
        for _ in range(2):
            r = 25_000 * math.sqrt(rng.random())
            a = 2 * math.pi * rng.random()
            pts.append(unproject(ProjectedPoint(r * math.cos(a), r * math.sin(a)), ORIGIN))
        (lon1, lat1), (lon2, lat2) = pts
        d_h = haversine(lon1, lat1, lon2, lat2)
        if d_h < 1.0:
            continue
        d_e = euclidean_distance(project(lon1, lat1, ORIGIN), project(lon2, lat2, ORIGIN))
        assert abs(d_e - d_h) / d_h < 0.005
    # one kilometre apart: within a metre
    p = unproject(ProjectedPoint(1000.0 / math.sqrt(2), 1000.0 / math.sqrt(2)), ORIGIN)
    assert abs(haversine(*ORIGIN, *p) - 1000.0) < 1.0


def test_invalid_coordinates_raise():
    with pytest.raises(CoordinateError):
        project(181.0, 0.0, ORIGIN)
    with pytest.raises(CoordinateError):
        project(0.0, -90.5, ORIGIN)
    with pytest.raises(CoordinateError):
        project(float("nan"), 0.0, ORIGIN)


def test_projection_from_stations_uses_centroid():
    from services.core_model import BaseStation

    proj = Projection.from_stations([BaseStation("a", 121.0, 31.0), BaseStation("b", 122.0, 32.0)])
    assert proj.origin == (121.5, 31.5)
    xy = proj.project_arrays([121.5, 122.0], [31.5, 31.5])
    assert xy.shape == (2, 2)
    assert xy[0].tolist() == pytest.approx([0.0, 0.0])
    assert xy[1, 0] == pytest.approx(proj.project(122.0, 31.5).x)


def test_local_time_helpers():
    start = day_start_epoch(date(2014, 1, 6), 8.0)
    assert start == 1388937600
    assert local_day(start, 8.0) == date(2014, 1, 6)
    assert local_day(start - 1, 8.0) == date(2014, 1, 5)
    assert seconds_of_day(start + 3600, 8.0) == 3600
    assert parse_timestamp("2014-01-06T08:00:00", 8.0) == start + 8 * 3600
    assert parse_timestamp("2014-01-06T00:00:00Z", 8.0) == start + 8 * 3600
    assert parse_timestamp(str(start), 8.0) == start
    assert not is_weekend(date(2014, 1, 10))
    assert is_weekend(date(2014, 1, 11))


def test_stay_invariants(make_stay, at, monday):
    with pytest.raises(ValueError):
        make_stay(at(monday, 10), at(monday, 9))
    with pytest.raises(ValueError):
        make_stay(at(monday, 10), at(monday, 10, 5), activity=ActivityType.SHOPPING)
    stay = make_stay(at(monday, 10), at(monday, 10, 10))
    assert stay.kind is StayKind.STAY
    assert stay.duration == 600


def test_chain_json_round_trip(make_stay, make_chain, at, monday):
    home = make_stay(at(monday, 0), at(monday, 8), place_id=0, label=PlaceLabel.HOME, activity=ActivityType.HOME)
    work = make_stay(at(monday, 9), at(monday, 17), x=3000.0, place_id=1, label=PlaceLabel.WORK, activity=ActivityType.WORK)
    chain = make_chain([home, work], trips=[Trip(home, work, TripPurpose.HBW)])
    back = chain_from_dict(chain_to_dict(chain))
    assert back == chain
    assert back.trips[0].origin is back.stays[0]
    assert back.trips[0].departure == home.departure


def test_category_map_lookup_and_unknown_reporting(category_map):
    assert category_map.lookup("Restaurant") is ActivityType.DRINK_EAT
    assert category_map.lookup("  restaurant ") is ActivityType.DRINK_EAT
    assert category_map.lookup("Office") is ActivityType.WORK
    assert category_map.lookup("Housing estate") is ActivityType.HOME
    assert category_map.lookup("Moon base") is ActivityType.OTHER
    assert category_map.unknown == {"Moon base": 1}
    assert "Restaurant" in category_map.raw_categories(ActivityType.DRINK_EAT)

# conftest.py: shared pytest fixtures.

from datetime import date

import pytest

from services.core_model import (
    ActivityChain,
    CategoryMap,
    PlaceLabel,
    ProjectedPoint,
    StayKind,
    StayPoint,
    day_start_epoch,
)
from services.helpers import resolve_data_path

OFFSET = 8.0
MONDAY = date(2014, 1, 6)


@pytest.fixture
def off():
    return OFFSET


@pytest.fixture
def monday():
    return MONDAY


@pytest.fixture
def at():
    """Epoch seconds of a local wall-clock time: at(day, hour, minute=0)."""

    def _at(day: date, hour: float, minute: float = 0) -> int:
        return day_start_epoch(day, OFFSET) + int(round(hour * 3600 + minute * 60))

    return _at


@pytest.fixture
def make_stay():
    def _make(
        arrival: int,
        departure: int,
        x: float = 0.0,
        y: float = 0.0,
        place_id: int = 0,
        user_id: str = "u1",
        station_id: str = "S1",
        label: PlaceLabel = PlaceLabel.UNLABELED,
        activity=None,
        n_records: int = 1,
        kind: StayKind = None,
    ) -> StayPoint:
        if kind is None:
            kind = StayKind.STAY if departure - arrival >= 600 else StayKind.PASS_BY
        return StayPoint(
            user_id=user_id,
            center=ProjectedPoint(x, y),
            arrival=arrival,
            departure=departure,
            kind=kind,
            station_id=station_id,
            place_id=place_id,
            n_records=n_records,
            label=label,
            activity=activity,
        )

    return _make


@pytest.fixture
def make_chain():
    def _make(stays, day: date = MONDAY, user_id: str = "u1", trips=()) -> ActivityChain:
        return ActivityChain(user_id=user_id, day=day, stays=tuple(stays), trips=tuple(trips))

    return _make


@pytest.fixture
def category_map():
    return CategoryMap.load(resolve_data_path("data/category_map.csv"))

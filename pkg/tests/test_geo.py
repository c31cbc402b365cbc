import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kernelbank.exceptions import DataError, GapTooLarge, TooShort
from kernelbank.geo import (
    ChannelExtractor,
    RawTrip,
    Trajectory,
    count_stops,
    ecef_to_geodetic,
    enu_to_geodetic,
    extract_channels,
    geodetic_to_ecef,
    geodetic_to_enu,
    rank_trips,
    split_at_gaps,
)

ANN_ARBOR = (42.2808, -83.7430, 260.0)


def test_origin_maps_to_zero():
    x, y, z = geodetic_to_enu(*ANN_ARBOR, ANN_ARBOR)
    assert (float(x), float(y), float(z)) == pytest.approx((0, 0, 0), abs=1e-9)


def test_equatorial_arc():
    x, y, _ = geodetic_to_enu(0.0, 0.001, 0.0, (0.0, 0.0, 0.0))
    assert float(x) == pytest.approx(2 * math.pi * 6378137.0 / 360 * 0.001, abs=1e-3)
    assert abs(float(y)) < 0.01


def test_axes_point_east_and_north():
    x, y, _ = geodetic_to_enu(ANN_ARBOR[0] + 0.001, ANN_ARBOR[1], ANN_ARBOR[2], ANN_ARBOR)
    assert float(y) > 100 and abs(float(x)) < 1e-6
    x, y, _ = geodetic_to_enu(ANN_ARBOR[0], ANN_ARBOR[1] + 0.001, ANN_ARBOR[2], ANN_ARBOR)
    assert float(x) > 50 and abs(float(y)) < 0.01


def test_ecef_roundtrip():
    lat, lon, alt = ecef_to_geodetic(*geodetic_to_ecef(*ANN_ARBOR))
    assert (float(lat), float(lon), float(alt)) == pytest.approx(ANN_ARBOR, abs=1e-9)


@given(st.floats(-10_000, 10_000), st.floats(-10_000, 10_000), st.floats(-50, 50), st.floats(-80, 80), st.floats(-179, 179))
@settings(max_examples=100, deadline=None)
def test_enu_roundtrip(e, n, u, lat0, lon0):
    origin = (lat0, lon0, 100.0)
    lat, lon, alt = enu_to_geodetic(e, n, u, origin)
    x, y, z = geodetic_to_enu(lat, lon, alt, origin)
    assert float(x) == pytest.approx(e, abs=1e-6)
    assert float(y) == pytest.approx(n, abs=1e-6)
    assert float(z) == pytest.approx(u, abs=1e-6)


@given(st.floats(-60, 60), st.floats(-170, 170), st.floats(0, 2 * math.pi), st.floats(10, 1000))
@settings(max_examples=60, deadline=None)
def test_enu_is_local_isometry(lat0, lon0, bearing, dist):
    origin = (lat0, lon0, 0.0)
    lat, lon, alt = enu_to_geodetic(dist * math.cos(bearing), dist * math.sin(bearing), 0.0, origin)
    # straight-line ECEF distance is within ~1e-8 relative of the surface distance at 1 km
    a = np.array(geodetic_to_ecef(lat0, lon0, 0.0))
    b = np.array(geodetic_to_ecef(float(lat), float(lon), 0.0))
    chord = np.linalg.norm(a - b)
    x, y, _ = geodetic_to_enu(float(lat), float(lon), 0.0, origin)
    assert math.hypot(float(x), float(y)) == pytest.approx(chord, rel=1e-3)


def straight_raw(n=100, v=10.0, heading=0.0, trip_id="line"):
    t = np.arange(n) * 0.1
    return RawTrip(trip_id, t, x_enu=v * t * math.cos(heading), y_enu=v * t * math.sin(heading))


def test_straight_drive_channels():
    traj = extract_channels(straight_raw())
    np.testing.assert_allclose(traj.speed, 10.0, atol=1e-9)
    np.testing.assert_allclose(traj.heading_unwrapped, 0.0, atol=1e-9)
    assert traj.speed_derived


def test_full_circle_unwraps():
    t = np.arange(0, 20.01, 0.1)
    omega = 2 * math.pi / 20
    raw = RawTrip("circle", t, x_enu=30 * np.sin(omega * t), y_enu=30 * (1 - np.cos(omega * t)))
    traj = extract_channels(raw)
    assert traj.heading_unwrapped[-1] - traj.heading_unwrapped[0] == pytest.approx(2 * math.pi, abs=0.05)
    assert np.all(np.abs(np.diff(traj.heading_unwrapped)) < math.pi)


def test_geodetic_trip_is_projected():
    t = np.arange(40) * 0.1
    lat0, lon0, _ = ANN_ARBOR
    lat, lon, alt = enu_to_geodetic(10 * t, np.zeros_like(t), np.zeros_like(t), ANN_ARBOR)
    traj = extract_channels(RawTrip("geo", t, lat=lat, lon=lon, alt=alt))
    np.testing.assert_allclose(traj.x_enu, 10 * t, atol=1e-6)
    np.testing.assert_allclose(traj.speed, 10.0, atol=1e-5)


def test_extract_is_idempotent():
    traj = extract_channels(straight_raw(heading=2.0))
    assert extract_channels(traj) == traj


def test_too_short_and_gap():
    with pytest.raises(TooShort):
        extract_channels(straight_raw(n=19))
    raw = straight_raw(n=60)
    raw.t = raw.t.copy()
    raw.t[30:] += 2.0
    with pytest.raises(GapTooLarge):
        extract_channels(raw)


def test_latitude_out_of_range():
    t = np.arange(30) * 0.1
    with pytest.raises(DataError):
        extract_channels(RawTrip("bad", t, lat=np.full(30, 95.0), lon=np.zeros(30), alt=np.zeros(30)))


def test_split_at_gaps_drops_short_pieces():
    raw = straight_raw(n=100)
    t = raw.t.copy()
    t[40:] += 2.0
    t[90:] += 2.0
    raw.t = t
    segments, dropped = split_at_gaps(raw, min_len=20)
    assert [len(s) for s in segments] == [40, 50]
    assert dropped == 1
    assert [s.trip_id for s in segments] == ["line-part0", "line-part1"]


def test_channel_extractor_transformer():
    raw = straight_raw(n=100)
    t = raw.t.copy()
    t[50:] += 3.0
    raw.t = t
    ext = ChannelExtractor(tw=10)
    out = ext.fit_transform([raw])
    assert len(out) == 2 and ext.dropped_ == 0
    assert ext.get_params() == {"tw": 10, "max_gap": 0.5}


def test_trajectory_rejects_ragged_channels():
    with pytest.raises(DataError):
        Trajectory("x", np.arange(3.0), np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3))


def test_count_stops():
    t = np.arange(100) * 0.1
    speed = np.full(100, 5.0)
    speed[10:40] = 0.0  # 2.9 s stop
    speed[60:70] = 0.0  # 0.9 s, too short
    assert count_stops(t, speed) == 1


def _traj(trip_id, n):
    raw = straight_raw(n=n, trip_id=trip_id)
    return extract_channels(raw)


def test_rank_single_trip_scores_zero():
    (rank,) = rank_trips([_traj("a", 50)])
    assert rank.composite_score == 0.0


def test_rank_longer_trip_first():
    ranks = rank_trips([_traj("short", 50), _traj("long", 80)])
    assert [r.trip_id for r in ranks] == ["long", "short"]


def test_rank_is_order_independent():
    trips = [_traj(name, n) for name, n in (("a", 50), ("b", 80), ("c", 65), ("d", 65))]
    assert rank_trips(trips) == rank_trips(trips[::-1])
    assert [r.trip_id for r in rank_trips(trips)][1:3] == ["c", "d"]

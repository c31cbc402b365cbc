import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kernelbank import csvio
from kernelbank.bank import integrate_position
from kernelbank.exceptions import ConfigError
from kernelbank.geo import extract_channels
from kernelbank.synth import (
    Maneuver,
    ManeuverScript,
    Noise,
    Segment,
    Wander,
    build_profile,
    generate_corpus,
    generate_trip,
)

QUIET = Noise(0.0, 0.0, 0.0)


def script(segments, **kw):
    kw.setdefault("noise", QUIET)
    return ManeuverScript([Segment(Maneuver(k), d, p) for k, d, p in segments], **kw)


def test_cruise_distance():
    trip = generate_trip(script([("Cruise", 10.0, {"v": 15.0}), ("Cruise", 25.0, {})], v0=15.0))
    assert trip.x_enu[100] - trip.x_enu[0] == pytest.approx(150.0, abs=1e-9)
    np.testing.assert_allclose(trip.y_enu, 0.0, atol=1e-9)


def test_quarter_turn_geometry():
    s = script([("TurnArc", None, {"radius": 20.0, "angle": math.pi / 2}), ("Cruise", 30.0, {})], v0=10.0)
    profile = build_profile(s)
    end = profile.pieces[0].t1
    assert float(profile.heading(np.array([end]))[0]) == pytest.approx(math.pi / 2, abs=1e-9)
    x, y = profile.position(np.array([0.0, end]))
    assert math.hypot(x[1] - x[0], y[1] - y[0]) == pytest.approx(20 * math.sqrt(2), abs=1e-6)


def test_brake_to_stop_distance():
    s = script([("Cruise", 5.0, {}), ("Brake", None, {"decel": 4.0}), ("Stop", 25.0, {})], v0=20.0)
    trip = generate_trip(s)
    # 5 s cruise + v^2 / (2 a) braking distance
    assert trip.x_enu[-1] == pytest.approx(100.0 + 400.0 / 8.0, abs=1e-6)
    assert trip.speed.min() == 0.0


def test_lane_change_offset():
    s = script([("Cruise", 5.0, {}), ("LaneChange", 4.0, {"lateral": 3.5}), ("Cruise", 25.0, {})], v0=15.0)
    trip = generate_trip(s)
    assert trip.y_enu[-1] == pytest.approx(3.5, abs=1e-6)
    assert trip.heading_unwrapped[-1] == pytest.approx(0.0, abs=1e-9)


def test_ramped_accel_reaches_target():
    s = script([("Accel", 6.0, {"a": 2.0, "ramp_s": 1.0}), ("Cruise", 30.0, {})], v0=10.0)
    trip = generate_trip(s)
    assert trip.speed[-1] == pytest.approx(10.0 + 2.0 * 5.0, abs=1e-9)
    assert np.all(np.abs(np.diff(trip.speed)) <= 2.0 * 0.1 + 1e-9)


def test_short_script_rejected():
    with pytest.raises(ConfigError):
        generate_trip(script([("Cruise", 10.0, {})]))


def test_same_seed_same_csv(tmp_path):
    s = script([("Cruise", 35.0, {})], noise=Noise(), seed=7)
    a = csvio.write_trip_csv(generate_trip(s), tmp_path / "a.csv").read_bytes()
    b = csvio.write_trip_csv(generate_trip(s), tmp_path / "b.csv").read_bytes()
    assert a == b


def test_noise_is_seeded_and_independent():
    s = script([("Cruise", 35.0, {})], noise=Noise(), seed=7)
    clean = generate_trip(script([("Cruise", 35.0, {})], seed=7))
    noisy = generate_trip(s)
    dx, dy = noisy.x_enu - clean.x_enu, noisy.y_enu - clean.y_enu
    assert 0.03 < dx.std() < 0.07
    assert abs(np.corrcoef(dx, dy)[0, 1]) < 0.15


def test_script_json_roundtrip():
    s = script([("Cruise", 5.0, {"v": 12.0}), ("TurnArc", None, {"radius": 30.0, "angle": 1.0})], seed=3, wander=Wander(0.5, 0.01))
    again = ManeuverScript.from_json(s.to_json())
    assert again == s
    assert ManeuverScript.from_json('[{"kind": "Cruise", "duration_s": 31}]').segments[0].kind is Maneuver.CRUISE


def test_corpus_defaults():
    corpus = generate_corpus(26, seed=0)
    assert len(corpus) == 26
    assert sum(t.duration for t in corpus) >= 1500
    assert len({t.trip_id for t in corpus}) == 26


def test_corpus_single_and_repeatable():
    assert len(generate_corpus(1)) == 1
    assert generate_corpus(6, seed=3) == generate_corpus(6, seed=3)
    assert generate_corpus(6, seed=3) != generate_corpus(6, seed=4)


def test_first_trip_covers_every_maneuver():
    from kernelbank.synth import random_script

    rng = np.random.default_rng(np.random.SeedSequence(0).spawn(1)[0])
    s = random_script(rng, 1, all_kinds=True)
    assert {seg.kind for seg in s.segments} == set(Maneuver)


def test_noise_far_below_thresholds():
    assert Noise().pos_sigma_m * 4 <= 0.2


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_zero_noise_channels_recover_script(seed):
    rng = np.random.default_rng(seed)
    from kernelbank.synth import random_script

    s = random_script(rng, seed, noise=QUIET)
    trip = generate_trip(s)
    profile = build_profile(s)
    again = extract_channels(trip)
    np.testing.assert_allclose(again.speed, profile.speed(trip.t), atol=1e-6)
    np.testing.assert_allclose(again.heading_unwrapped, profile.heading(trip.t), atol=1e-6)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_true_channels_integrate_to_positions(seed):
    from kernelbank.synth import random_script

    trip = generate_trip(random_script(np.random.default_rng(seed), seed, noise=QUIET))
    worst = 0.0
    for i0 in range(0, len(trip) - 11, 7):
        sl = slice(i0 + 1, i0 + 11)
        x, y = integrate_position(
            trip.speed[sl], trip.heading_unwrapped[sl], trip.x_enu[i0], trip.y_enu[i0],
            initial=(trip.speed[i0], trip.heading_unwrapped[i0]),
        )
        worst = max(worst, float(np.hypot(x - trip.x_enu[sl], y - trip.y_enu[sl]).max()))
    assert worst < 0.02

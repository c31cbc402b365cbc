import math

import numpy as np
import pytest

from kernelbank import csvio
from kernelbank.exceptions import DataError, SchemaError
from kernelbank.geo import enu_to_geodetic
from kernelbank.synth import generate_corpus


@pytest.fixture(scope="module")
def trips():
    return generate_corpus(3, seed=4)


def test_pre_converted_roundtrip(tmp_path, trips):
    path = csvio.write_trip_csv(trips[0], tmp_path / "trip000.csv")
    raw = csvio.read_trip_csv(path)
    assert raw.trip_id == "trip000"
    np.testing.assert_array_equal(raw.x_enu, trips[0].x_enu)
    np.testing.assert_allclose(raw.heading, trips[0].heading_unwrapped, rtol=1e-15, atol=1e-15)


def test_cache_roundtrip_is_exact(tmp_path, trips):
    path = csvio.write_cache(trips, tmp_path / "corpus.csv")
    assert csvio.read_cache(path) == trips


def test_geodetic_layout_uses_compass_heading(tmp_path):
    t = np.arange(40) * 0.1
    origin = (42.3, -83.7, 250.0)
    lat, lon, alt = enu_to_geodetic(np.zeros_like(t), 12 * t, np.zeros_like(t), origin)
    lines = ["t,lat,lon,alt,speed,heading,yaw_rate"]
    for row in zip(t, lat, lon, alt):
        lines.append(",".join(repr(float(v)) for v in row) + ",12.0,0.0,0.0")  # due north
    path = tmp_path / "north.csv"
    path.write_text("\n".join(lines) + "\n")
    raw = csvio.read_trip_csv(path)
    np.testing.assert_allclose(raw.heading, math.pi / 2)


@pytest.mark.parametrize(
    "text, line",
    [
        ("a,b,c\n1,2,3\n", 1),
        ("t,x_enu,y_enu\n0.0,1,2\n0.1,1\n", 3),
        ("t,x_enu,y_enu\n0.0,1,2\n0.1,1,zz\n", 3),
        ("t,x_enu,y_enu,bogus\n0.0,1,2,3\n", 1),
        ("t,lat,lon,alt\n0.0,91,0,0\n0.1,0,0,0\n", 2),
        ("t,x_enu,y_enu\n0.0,1,2\n0.0,1,2\n", 3),
        ("t,x_enu,y_enu\n0.0,1,nan\n", 2),
    ],
)
def test_schema_errors_carry_file_and_line(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(SchemaError) as info:
        csvio.read_trip_csv(path)
    assert info.value.path == path
    assert info.value.line == line
    assert f"bad.csv:{line}" in str(info.value)


def test_non_10hz_rejected(tmp_path):
    path = tmp_path / "slow.csv"
    path.write_text("t,x_enu,y_enu\n" + "".join(f"{i},{i},0\n" for i in range(30)))
    with pytest.raises(SchemaError):
        csvio.read_trip_csv(path)


def test_load_dir_splits_gaps_with_warning(tmp_path, trips):
    traj = trips[0]
    csvio.write_trip_csv(traj, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    header, rows = lines[0], lines[1:]
    shifted = []
    for i, row in enumerate(rows):
        fields = row.split(",")
        if i >= 300:
            fields[0] = repr(float(fields[0]) + 2.0)
        shifted.append(",".join(fields))
    (tmp_path / "a.csv").write_text("\n".join([header, *shifted]) + "\n")
    loaded, warnings = csvio.load_trip_dir(tmp_path)
    assert [t.trip_id for t in loaded] == ["a-part0", "a-part1"]
    assert len(warnings) == 1 and "split" in warnings[0]


def test_load_dir_empty(tmp_path):
    with pytest.raises(DataError, match="no trips"):
        csvio.load_trip_dir(tmp_path)

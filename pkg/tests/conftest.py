import functools

import numpy as np

import pytest

from kernelbank.mbcsim import Cell, parse_scheme, run_cell
from kernelbank.synth import generate_corpus


@pytest.fixture(scope="session")
def seed0_corpus():
    return generate_corpus(26, seed=0)


@pytest.fixture(scope="session")
def seed0_cell(seed0_corpus):
    """Cached ``run_cell`` on the seed-0 corpus, keyed by scheme label."""

    @functools.cache
    def run(label, threshold=0.5, tw=10, shuffle_seed=None):
        return run_cell(seed0_corpus, Cell(*parse_scheme(label), threshold, tw, shuffle_seed))

    return run


ORIGIN = (42.28, -83.74, 250.0)


def _write_geodetic(traj, path):
    from kernelbank.geo import enu_to_geodetic

    lat, lon, alt = enu_to_geodetic(traj.x_enu, traj.y_enu, np.zeros(len(traj)), ORIGIN)
    bearing = np.mod(90.0 - np.rad2deg(traj.heading_unwrapped), 360.0)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,lat,lon,alt,speed,heading\n")
        for row in zip(traj.t, lat, lon, alt, traj.speed, bearing):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


@pytest.fixture
def geodetic_dir(tmp_path):
    """Factory writing trajectories as geodetic trip CSVs into a fresh directory."""

    def make(trajectories, name="spmd"):
        d = tmp_path / name
        d.mkdir()
        for traj in trajectories:
            _write_geodetic(traj, d / f"{traj.trip_id}.csv")
        return d

    return make

"""Trip CSV reading/writing and the normalized trajectory cache.

Two trip layouts are accepted, one file per trip with the file stem as the
trip id:

* geodetic: ``t,lat,lon,alt[,speed][,heading][,yaw_rate][,accel_lon]``.
  Angles are degrees; ``heading`` is a compass bearing (clockwise from
  north), ``yaw_rate`` is degrees per second.
* pre-converted: ``t,x_enu,y_enu[,speed][,heading]`` with ``heading`` in
  degrees counter-clockwise from east.

Internally everything is radians with heading counter-clockwise from east.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .exceptions import DataError, SchemaError, TooShort
from .geo import MAX_GAP_S, RawTrip, Trajectory, extract_channels, split_at_gaps

GEODETIC_REQUIRED = ("t", "lat", "lon", "alt")
GEODETIC_OPTIONAL = ("speed", "heading", "yaw_rate", "accel_lon")
ENU_REQUIRED = ("t", "x_enu", "y_enu")
ENU_OPTIONAL = ("speed", "heading")
CACHE_HEADER = ("trip_id", "t", "x_enu", "y_enu", "speed", "heading_unwrapped")
MEDIAN_DT_RANGE = (0.09, 0.11)


def fmt_float(value) -> str:
    """Shortest string that parses back to the identical double."""
    return repr(float(value))


def _layout(header, path):
    cols = tuple(h.strip() for h in header)
    if len(set(cols)) != len(cols):
        raise SchemaError("duplicate column names", path, 1)
    for required, optional, kind in (
        (GEODETIC_REQUIRED, GEODETIC_OPTIONAL, "geodetic"),
        (ENU_REQUIRED, ENU_OPTIONAL, "enu"),
    ):
        if cols[: len(required)] == required:
            extra = set(cols[len(required) :]) - set(optional)
            if extra:
                raise SchemaError(f"unknown columns {sorted(extra)}", path, 1)
            return kind, cols
    raise SchemaError(
        "header must start with 't,lat,lon,alt' or 't,x_enu,y_enu', got " + ",".join(cols), path, 1
    )


def read_trip_csv(path) -> RawTrip:
    """Parse one trip file into a :class:`RawTrip` (radians, ENU heading)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise SchemaError("missing header", path, 1)
        kind, cols = _layout(header, path)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(cols):
                raise SchemaError(f"expected {len(cols)} fields, got {len(row)}", path, lineno)
            try:
                values = [float(cell) for cell in row]
            except ValueError as exc:
                raise SchemaError(f"non-numeric field ({exc})", path, lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise SchemaError("non-finite value", path, lineno)
            rows.append(values)
    if not rows:
        raise SchemaError("no data rows", path, 2)
    data = np.asarray(rows, dtype=float)
    columns = {name: data[:, j] for j, name in enumerate(cols)}
    t = columns["t"]
    bad = np.flatnonzero(np.diff(t) <= 0)
    if bad.size:
        raise SchemaError("timestamps must be strictly increasing", path, int(bad[0]) + 3)
    if len(t) > 1:
        median_dt = float(np.median(np.diff(t)))
        lo, hi = MEDIAN_DT_RANGE
        if not lo <= median_dt <= hi:
            raise SchemaError(f"median sample spacing {median_dt:.4f} s is not ~10 Hz", path)

    heading = columns.get("heading")
    if kind == "geodetic":
        lat, lon = columns["lat"], columns["lon"]
        for name, col, limit in (("lat", lat, 90.0), ("lon", lon, 180.0)):
            out = np.flatnonzero(np.abs(col) > limit)
            if out.size:
                raise SchemaError(f"{name} out of range", path, int(out[0]) + 2)
        if heading is not None:
            heading = np.pi / 2 - np.deg2rad(heading)
        yaw = columns.get("yaw_rate")
        return RawTrip(
            trip_id=path.stem,
            t=t,
            lat=lat,
            lon=lon,
            alt=columns["alt"],
            speed=columns.get("speed"),
            heading=heading,
            yaw_rate=None if yaw is None else np.deg2rad(yaw),
            accel_lon=columns.get("accel_lon"),
        )
    return RawTrip(
        trip_id=path.stem,
        t=t,
        x_enu=columns["x_enu"],
        y_enu=columns["y_enu"],
        speed=columns.get("speed"),
        heading=None if heading is None else np.deg2rad(heading),
    )


def write_trip_csv(traj: Trajectory, path) -> Path:
    """Write ``traj`` in the pre-converted layout (heading in degrees)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ENU_REQUIRED + ENU_OPTIONAL)
        heading = np.rad2deg(traj.heading_unwrapped)
        for row in zip(traj.t, traj.x_enu, traj.y_enu, traj.speed, heading):
            writer.writerow([fmt_float(v) for v in row])
    return path


def load_trip_dir(directory, tw: int = 10, max_gap: float = MAX_GAP_S):
    """Read every ``*.csv`` trip under ``directory`` (sorted by name).

    Returns ``(trajectories, warnings)``. Trips are split at gaps larger than
    ``max_gap``; pieces too short to use are reported as warnings, never
    interpolated.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = sorted(directory.glob("*.csv"))
    if not files:
        raise DataError(f"{directory}: no trips")
    trajectories, warnings = [], []
    for path in files:
        raw = read_trip_csv(path)
        segments, dropped = split_at_gaps(raw, 2 * tw, max_gap)
        if len(segments) + dropped > 1:
            warnings.append(f"{path.name}: split at GPS gaps into {len(segments) + dropped} segments")
        if dropped:
            warnings.append(f"{path.name}: dropped {dropped} segment(s) shorter than {2 * tw} samples")
        for seg in segments:
            try:
                trajectories.append(extract_channels(seg, tw))
            except TooShort as exc:
                warnings.append(f"{path.name}: {exc}")
    if not trajectories:
        raise DataError(f"{directory}: no trips")
    return trajectories, warnings


def write_cache(trajectories, path) -> Path:
    """Store normalized trajectories losslessly in one CSV."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CACHE_HEADER)
        for traj in trajectories:
            for row in zip(traj.t, traj.x_enu, traj.y_enu, traj.speed, traj.heading_unwrapped):
                writer.writerow([traj.trip_id, *(fmt_float(v) for v in row)])
    return path


def read_cache(path) -> list[Trajectory]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CACHE_HEADER:
            raise SchemaError(f"expected header {','.join(CACHE_HEADER)}", path, 1)
        groups: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CACHE_HEADER):
                raise SchemaError(f"expected {len(CACHE_HEADER)} fields", path, lineno)
            try:
                groups.setdefault(row[0], []).append([float(v) for v in row[1:]])
            except ValueError:
                raise SchemaError("non-numeric field", path, lineno) from None
    if not groups:
        raise DataError(f"{path}: no trips")
    trips = []
    for trip_id, rows in groups.items():
        a = np.asarray(rows, dtype=float)
        trips.append(Trajectory(trip_id, a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4]))
    return trips

"""Trip ingestion geometry: WGS-84 <-> local ENU, channel extraction, trip ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DataError, GapTooLarge, TooShort

# WGS-84
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
WGS84_EP2 = WGS84_E2 / (1.0 - WGS84_E2)

MAX_GAP_S = 0.5
STOP_SPEED = 0.5
STOP_MIN_S = 2.0


# ---------------------------------------------------------------- geodesy


def geodetic_to_ecef(lat, lon, alt):
    """Degrees, degrees, meters -> ECEF meters."""
    lat = np.radians(lat)
    lon = np.radians(lon)
    sin_lat = np.sin(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    x = (n + alt) * np.cos(lat) * np.cos(lon)
    y = (n + alt) * np.cos(lat) * np.sin(lon)
    z = (n * (1.0 - WGS84_E2) + alt) * sin_lat
    return x, y, z


def ecef_to_geodetic(x, y, z, tol=1e-13, max_iter=20):
    """ECEF meters -> (lat deg, lon deg, alt m), iterating on latitude."""
    x, y, z = (np.asarray(v, dtype=float) for v in (x, y, z))
    lon = np.arctan2(y, x)
    p = np.hypot(x, y)
    # Bowring's initial guess, then fixed-point refinement
    theta = np.arctan2(z * WGS84_A, p * WGS84_B)
    lat = np.arctan2(z + WGS84_EP2 * WGS84_B * np.sin(theta) ** 3, p - WGS84_E2 * WGS84_A * np.cos(theta) ** 3)
    for _ in range(max_iter):
        sin_lat = np.sin(lat)
        n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
        alt = p / np.cos(lat) - n
        new_lat = np.arctan2(z, p * (1.0 - WGS84_E2 * n / (n + alt)))
        done = np.all(np.abs(new_lat - lat) < tol)
        lat = new_lat
        if done:
            break
    sin_lat = np.sin(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    alt = p / np.cos(lat) - n
    return np.degrees(lat), np.degrees(lon), alt


def _enu_rotation(lat0, lon0):
    phi, lam = math.radians(lat0), math.radians(lon0)
    sp, cp, sl, cl = math.sin(phi), math.cos(phi), math.sin(lam), math.cos(lam)
    return np.array(
        [
            [-sl, cl, 0.0],
            [-sp * cl, -sp * sl, cp],
            [cp * cl, cp * sl, sp],
        ]
    )


def geodetic_to_enu(lat, lon, alt, origin):
    """Geodetic point(s) to East-North-Up meters relative to ``origin``.

    ``origin`` is ``(lat0, lon0, alt0)`` in degrees/degrees/meters.
    """
    lat0, lon0, alt0 = origin
    x0, y0, z0 = geodetic_to_ecef(lat0, lon0, alt0)
    x, y, z = geodetic_to_ecef(np.asarray(lat, float), np.asarray(lon, float), np.asarray(alt, float))
    d = np.stack([np.asarray(x) - x0, np.asarray(y) - y0, np.asarray(z) - z0])
    e, n, u = np.tensordot(_enu_rotation(lat0, lon0), d, axes=1)
    return e, n, u


def enu_to_geodetic(e, n, u, origin):
    lat0, lon0, alt0 = origin
    x0, y0, z0 = geodetic_to_ecef(lat0, lon0, alt0)
    d = np.tensordot(_enu_rotation(lat0, lon0).T, np.stack([np.asarray(e, float), np.asarray(n, float), np.asarray(u, float)]), axes=1)
    return ecef_to_geodetic(d[0] + x0, d[1] + y0, d[2] + z0)


# ---------------------------------------------------------------- trips


@dataclass
class RawTrip:
    """Column-oriented trip log as read from disk.

    Either geodetic (``lat``/``lon``/``alt``) or pre-converted
    (``x_enu``/``y_enu``) positions must be present. Angles are radians,
    heading is measured counter-clockwise from east.
    """

    trip_id: str
    t: np.ndarray
    lat: np.ndarray | None = None
    lon: np.ndarray | None = None
    alt: np.ndarray | None = None
    x_enu: np.ndarray | None = None
    y_enu: np.ndarray | None = None
    speed: np.ndarray | None = None
    heading: np.ndarray | None = None
    yaw_rate: np.ndarray | None = None
    accel_lon: np.ndarray | None = None

    COLUMNS = ("t", "lat", "lon", "alt", "x_enu", "y_enu", "speed", "heading", "yaw_rate", "accel_lon")

    def __len__(self):
        return len(self.t)

    def slice(self, start, stop, trip_id=None) -> "RawTrip":
        kw = {}
        for name in self.COLUMNS:
            col = getattr(self, name)
            kw[name] = None if col is None else np.asarray(col)[start:stop]
        return RawTrip(trip_id=trip_id or self.trip_id, **kw)


@dataclass
class Trajectory:
    trip_id: str
    t: np.ndarray
    x_enu: np.ndarray
    y_enu: np.ndarray
    speed: np.ndarray
    heading_unwrapped: np.ndarray
    speed_derived: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("t", "x_enu", "y_enu", "speed", "heading_unwrapped"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=float))
        n = len(self.t)
        if any(len(getattr(self, c)) != n for c in ("x_enu", "y_enu", "speed", "heading_unwrapped")):
            raise DataError(f"trip {self.trip_id}: channel lengths differ")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise DataError(f"trip {self.trip_id}: timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self.t) else 0.0

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.trip_id == other.trip_id and all(
            np.array_equal(getattr(self, c), getattr(other, c))
            for c in ("t", "x_enu", "y_enu", "speed", "heading_unwrapped")
        )

    def to_raw(self) -> RawTrip:
        return RawTrip(
            trip_id=self.trip_id,
            t=self.t,
            x_enu=self.x_enu,
            y_enu=self.y_enu,
            speed=self.speed,
            heading=self.heading_unwrapped,
        )


def split_at_gaps(raw: RawTrip, min_len: int, max_gap: float = MAX_GAP_S):
    """Split ``raw`` wherever the sample spacing exceeds ``max_gap``.

    Returns ``(segments, dropped)``; segments shorter than ``min_len`` samples
    are dropped and counted. Segment ids get a ``-partN`` suffix when the trip
    was split.
    """
    t = np.asarray(raw.t, dtype=float)
    breaks = np.flatnonzero(np.diff(t) > max_gap) + 1
    bounds = np.concatenate([[0], breaks, [len(t)]])
    if len(bounds) == 2:
        pieces = [(0, len(t), raw.trip_id)]
    else:
        pieces = [(a, b, f"{raw.trip_id}-part{i}") for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:]))]
    segments, dropped = [], 0
    for a, b, tid in pieces:
        if b - a < min_len:
            dropped += 1
            continue
        segments.append(raw.slice(a, b, tid))
    return segments, dropped


def extract_channels(raw, tw: int = 10) -> Trajectory:
    """Turn a raw trip into an ENU trajectory with speed and unwrapped heading.

    Geodetic positions are projected onto the ENU plane anchored at the first
    sample. Missing speed/heading channels are derived from positions by
    central differences. Accepts an existing :class:`Trajectory`, in which
    case the result equals the input.
    """
    if isinstance(raw, Trajectory):
        raw = raw.to_raw()
    t = np.asarray(raw.t, dtype=float)
    if len(t) < 2 * tw:
        raise TooShort(f"trip {raw.trip_id}: {len(t)} samples < {2 * tw}")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise DataError(f"trip {raw.trip_id}: timestamps must be strictly increasing")
    if np.any(dt > MAX_GAP_S):
        raise GapTooLarge(f"trip {raw.trip_id}: gap of {dt.max():.3f} s; split with split_at_gaps first")

    if raw.x_enu is not None and raw.y_enu is not None:
        x = np.asarray(raw.x_enu, dtype=float)
        y = np.asarray(raw.y_enu, dtype=float)
    elif raw.lat is not None and raw.lon is not None:
        alt = np.zeros_like(t) if raw.alt is None else np.asarray(raw.alt, dtype=float)
        lat = np.asarray(raw.lat, dtype=float)
        lon = np.asarray(raw.lon, dtype=float)
        if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
            raise DataError(f"trip {raw.trip_id}: latitude/longitude out of range")
        x, y, _ = geodetic_to_enu(lat, lon, alt, (lat[0], lon[0], alt[0]))
    else:
        raise DataError(f"trip {raw.trip_id}: no position columns")

    derived = raw.speed is None or raw.heading is None
    if derived:
        vx = np.gradient(x, t)
        vy = np.gradient(y, t)
    if raw.speed is not None:
        speed = np.asarray(raw.speed, dtype=float)
    else:
        speed = np.hypot(vx, vy)
    if raw.heading is not None:
        heading = np.asarray(raw.heading, dtype=float)
    else:
        heading = np.arctan2(vy, vx)
    heading = np.unwrap(heading)
    return Trajectory(raw.trip_id, t, x, y, speed, heading, speed_derived=raw.speed is None)


class ChannelExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer: raw trips -> list of trajectories (split at gaps)."""

    def __init__(self, tw=10, max_gap=MAX_GAP_S):
        self.tw = tw
        self.max_gap = max_gap

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        out = []
        self.dropped_ = 0
        for raw in X:
            segments, dropped = split_at_gaps(raw, 2 * self.tw, self.max_gap)
            self.dropped_ += dropped
            out.extend(extract_channels(seg, self.tw) for seg in segments)
        return out


# ---------------------------------------------------------------- ranking


@dataclass(frozen=True)
class TripRank:
    trip_id: str
    duration_s: float
    stop_count: int
    std_heading: float
    std_accel: float
    std_yaw: float
    composite_score: float = 0.0


RANK_CRITERIA = ("duration_s", "stop_count", "std_heading", "std_accel", "std_yaw")


def count_stops(t, speed, threshold=STOP_SPEED, min_duration=STOP_MIN_S) -> int:
    stopped = np.asarray(speed) < threshold
    count, start = 0, None
    for i, flag in enumerate(stopped):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            count += t[i - 1] - t[start] >= min_duration - 1e-9
            start = None
    if start is not None:
        count += t[-1] - t[start] >= min_duration - 1e-9
    return int(count)


def trip_features(traj: Trajectory) -> TripRank:
    t = traj.t
    accel = np.gradient(traj.speed, t)
    yaw = np.gradient(traj.heading_unwrapped, t)
    return TripRank(
        trip_id=traj.trip_id,
        duration_s=traj.duration,
        stop_count=count_stops(t, traj.speed),
        std_heading=float(np.std(traj.heading_unwrapped)),
        std_accel=float(np.std(accel)),
        std_yaw=float(np.std(yaw)),
    )


def rank_trips(trips) -> list[TripRank]:
    """Rank trips by the sum of per-criterion z-scores, best first.

    Criteria with zero spread across the collection contribute 0. Ties break
    on ``trip_id``.
    """
    # canonical order first so column sums do not depend on input order
    feats = sorted((trip_features(tr) for tr in trips), key=lambda f: f.trip_id)
    if not feats:
        raise DataError("rank_trips needs at least one trip")
    table = np.array([[getattr(f, c) for c in RANK_CRITERIA] for f in feats], dtype=float)
    mu = table.mean(axis=0)
    sd = table.std(axis=0)
    z = np.divide(table - mu, sd, out=np.zeros_like(table), where=sd > 1e-12)
    scores = z.sum(axis=1)
    ranked = [
        TripRank(**{**f.__dict__, "composite_score": float(s)}) for f, s in zip(feats, scores)
    ]
    ranked.sort(key=lambda r: (-r.composite_score, r.trip_id))
    return ranked

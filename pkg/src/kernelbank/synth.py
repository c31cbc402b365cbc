"""Scripted synthetic 10 Hz trips, a redistributable stand-in for naturalistic logs.

Each script is a list of maneuver segments. Speed is piecewise linear and
heading is built from constant-rate arcs and smooth lane-change bumps, so
positions can be integrated to near machine precision with Gauss-Legendre
quadrature. Noise is added per channel after integration.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from .exceptions import ConfigError
from .geo import Trajectory

DT = 0.1
MIN_SCRIPT_S = 30.0
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


class Maneuver(str, Enum):
    CRUISE = "Cruise"
    ACCEL = "Accel"
    BRAKE = "Brake"
    TURN_ARC = "TurnArc"
    LANE_CHANGE = "LaneChange"
    STOP = "Stop"


@dataclass
class Segment:
    kind: Maneuver
    duration_s: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = Maneuver(self.kind)


@dataclass
class Noise:
    pos_sigma_m: float = 0.05
    speed_sigma_mps: float = 0.05
    heading_sigma_rad: float = 0.005


@dataclass
class Wander:
    """Smooth driver modulation superimposed on the scripted maneuvers.

    Each channel gets a sum of sinusoids with the given total amplitude and
    periods drawn from ``period_s``. Speed modulation fades out below about
    5 m/s so a stopped vehicle stays put.
    """

    speed_amp_mps: float = 0.0
    heading_amp_rad: float = 0.0
    period_s: tuple = (4.0, 15.0)
    n_terms: int = 3
    seed: int = 0

    def __post_init__(self):
        self.period_s = tuple(float(p) for p in self.period_s)


@dataclass
class ManeuverScript:
    segments: list
    noise: Noise = field(default_factory=Noise)
    seed: int = 0
    v0: float = 15.0
    heading0: float = 0.0
    trip_id: str | None = None
    wander: Wander | None = None

    def __post_init__(self):
        self.segments = [s if isinstance(s, Segment) else Segment(**s) for s in self.segments]
        if isinstance(self.noise, dict):
            self.noise = Noise(**self.noise)
        if isinstance(self.wander, dict):
            self.wander = Wander(**self.wander)

    def to_json(self) -> str:
        data = asdict(self)
        for seg in data["segments"]:
            seg["kind"] = Maneuver(seg["kind"]).value
        return json.dumps(data, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ManeuverScript":
        data = json.loads(text)
        if isinstance(data, list):
            data = {"segments": data}
        return cls(**data)


@dataclass(frozen=True)
class _Piece:
    """Quadratic speed and heading polynomials in local time, plus a lane-change bump."""

    t0: float
    t1: float
    v_in: float
    accel: float
    jerk: float
    heading_in: float
    omega: float
    yaw_accel: float
    bump: float = 0.0
    bump_len: float = 1.0

    def speed(self, tau):
        return np.maximum(self.v_in + self.accel * tau + 0.5 * self.jerk * tau * tau, 0.0)

    def heading(self, tau):
        h = self.heading_in + self.omega * tau + 0.5 * self.yaw_accel * tau * tau
        if self.bump:
            h = h + self.bump * np.sin(np.pi * tau / self.bump_len) ** 2
        return h

    def stop_time(self):
        """Local time at which speed first reaches zero inside the piece, if any."""
        a, b, c = 0.5 * self.jerk, self.accel, self.v_in
        if abs(a) < 1e-15:
            roots = [-c / b] if b < 0 else []
        else:
            disc = b * b - 4 * a * c
            roots = [] if disc < 0 else [(-b - math.sqrt(disc)) / (2 * a), (-b + math.sqrt(disc)) / (2 * a)]
        roots = [r for r in roots if 1e-12 < r < self.t1 - self.t0]
        return min(roots) if roots else None


class Profile:
    """Continuous-time speed/heading/position of a script (noise-free)."""

    def __init__(self, pieces, breakpoints, wander=None):
        self.pieces = pieces
        self.starts = np.array([p.t0 for p in pieces])
        self.end = pieces[-1].t1
        self.breakpoints = np.array(sorted(set(breakpoints)))
        self._wander = None
        if wander is not None and (wander.speed_amp_mps > 0 or wander.heading_amp_rad > 0):
            rng = np.random.default_rng(wander.seed)
            k = wander.n_terms
            freqs = 2 * np.pi / rng.uniform(*wander.period_s, size=(2, k))
            phases = rng.uniform(0, 2 * np.pi, size=(2, k))
            amps = np.array([[wander.speed_amp_mps], [wander.heading_amp_rad]]) * rng.dirichlet(np.ones(k), size=2)
            self._wander = (freqs, phases, amps)

    def _eval(self, t, which):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.starts, t, side="right") - 1, 0, len(self.pieces) - 1)
        out = np.empty_like(t)
        for i in np.unique(idx):
            mask = idx == i
            piece = self.pieces[i]
            out[mask] = getattr(piece, which)(t[mask] - piece.t0)
        return out

    def _modulation(self, t, row):
        freqs, phases, amps = self._wander
        return np.sin(np.multiply.outer(t, freqs[row]) + phases[row]) @ amps[row]

    def speed(self, t):
        base = self._eval(t, "speed")
        if self._wander is None:
            return base
        gate = base * base / (base * base + 25.0)
        return np.maximum(base + gate * self._modulation(np.asarray(t, dtype=float), 0), 0.0)

    def heading(self, t):
        base = self._eval(t, "heading")
        if self._wander is None:
            return base
        return base + self._modulation(np.asarray(t, dtype=float), 1)

    def position(self, t):
        """Exact (to quadrature precision) position at sorted times ``t``, starting from (0, 0) at t=0."""
        t = np.asarray(t, dtype=float)
        grid = np.union1d(t, self.breakpoints[(self.breakpoints > 0) & (self.breakpoints < t.max())])
        grid = np.union1d([0.0], grid)
        a, b = grid[:-1], grid[1:]
        half = 0.5 * (b - a)
        mid = 0.5 * (a + b)
        nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        v = self.speed(nodes.ravel()).reshape(nodes.shape)
        h = self.heading(nodes.ravel()).reshape(nodes.shape)
        dx = (v * np.cos(h)) @ _GL_WEIGHTS * half
        dy = (v * np.sin(h)) @ _GL_WEIGHTS * half
        x = np.concatenate([[0.0], np.cumsum(dx)])
        y = np.concatenate([[0.0], np.cumsum(dy)])
        pos = np.searchsorted(grid, t)
        return x[pos], y[pos]


def _lane_change_amplitude(v, duration, lateral):
    """Heading bump amplitude giving ``lateral`` meters of sideways travel."""
    tau = np.linspace(0.0, duration, 2001)

    def lateral_of(amp):
        return v * trapezoid(np.sin(amp * np.sin(np.pi * tau / duration) ** 2), tau)

    target = abs(lateral)
    if target == 0:
        return 0.0
    hi = 0.5 * math.pi
    if lateral_of(hi) < target:
        raise ConfigError(f"lane change of {lateral} m impossible at {v} m/s over {duration} s")
    amp = brentq(lambda a: lateral_of(a) - target, 0.0, hi, xtol=1e-14)
    return math.copysign(amp, lateral)


def _ramped(total, ramp, level):
    """Split a maneuver of length ``total`` into ramp-up / hold / ramp-down pieces
    of a rate that ramps linearly between 0 and its peak.

    The integral of the rate is always ``level * (total - ramp)``; when
    ``total < 2 * ramp`` the profile is a triangle with a scaled peak.
    Returns ``[(duration, rate_at_start, rate_slope), ...]``.
    """
    if ramp <= 0:
        return [(total, level, 0.0)]
    if total <= ramp:
        raise ConfigError(f"maneuver of {total} s cannot contain a {ramp} s ramp")
    if 2 * ramp > total:
        half = 0.5 * total
        peak = 2.0 * level * (total - ramp) / total
        return [(half, 0.0, peak / half), (half, peak, -peak / half)]
    hold = total - 2 * ramp
    parts = [(ramp, 0.0, level / ramp)]
    if hold > 1e-12:
        parts.append((hold, level, 0.0))
    parts.append((ramp, level, -level / ramp))
    return parts


def build_profile(script: ManeuverScript) -> Profile:
    """Continuous-time kinematics of a script.

    Accel/Brake accept ``ramp_s`` (linear build-up and release of the
    acceleration, i.e. bounded jerk) and TurnArc accepts ``transition_s``
    (clothoid-style yaw-rate ramps). Both default to 0: instantaneous onset.
    With ramps the net speed change is ``a * (duration - ramp_s)`` and the
    net heading change of a turn stays ``angle``.
    """
    pieces, breaks = [], [0.0]
    t, v, h = 0.0, float(script.v0), float(script.heading0)

    def push(duration, accel=0.0, jerk=0.0, omega=0.0, yaw_accel=0.0, bump=0.0, bump_len=1.0):
        nonlocal t, v, h
        piece = _Piece(t, t + duration, v, accel, jerk, h, omega, yaw_accel, bump, bump_len)
        pieces.append(piece)
        stop = piece.stop_time()
        if stop is not None:
            breaks.append(t + stop)
        v = float(piece.speed(duration))
        h = float(piece.heading(duration))
        t += duration
        breaks.append(t)

    for seg in script.segments:
        p = seg.params
        duration = seg.duration_s
        kind = seg.kind
        if kind is Maneuver.CRUISE:
            v = float(p.get("v", v))
        elif kind is Maneuver.STOP:
            v = 0.0
        if kind in (Maneuver.ACCEL, Maneuver.BRAKE):
            ramp = float(p.get("ramp_s", 0.0))
            if kind is Maneuver.ACCEL:
                level = float(p.get("a", 1.5))
            else:
                level = -abs(float(p.get("decel", 3.0)))
                if duration is None:
                    duration = v / -level + ramp
            _check_duration(kind, duration)
            for d, rate, slope in _ramped(duration, ramp, level):
                push(d, accel=rate, jerk=slope)
        elif kind is Maneuver.TURN_ARC:
            radius = float(p["radius"])
            if v <= 0:
                raise ConfigError("TurnArc needs a moving vehicle")
            transition = float(p.get("transition_s", 0.0))
            if "angle" in p:
                angle = float(p["angle"])
                duration = radius * abs(angle) / v + transition
                omega = math.copysign(v / radius, angle)
            else:
                _check_duration(kind, duration)
                omega = math.copysign(v / radius, float(p.get("direction", 1.0)))
            for d, rate, slope in _ramped(duration, transition, omega):
                push(d, omega=rate, yaw_accel=slope)
        elif kind is Maneuver.LANE_CHANGE:
            _check_duration(kind, duration)
            push(duration, bump=_lane_change_amplitude(v, duration, float(p.get("lateral", 3.5))), bump_len=duration)
        else:
            _check_duration(kind, duration)
            push(duration)
    return Profile(pieces, breaks, script.wander)


def _check_duration(kind, duration):
    if duration is None or duration <= 0:
        raise ConfigError(f"segment {kind.value} needs a positive duration")


def generate_trip(script: ManeuverScript) -> Trajectory:
    """Sample a script at 10 Hz and add per-channel Gaussian noise."""
    profile = build_profile(script)
    total = profile.end
    if total < MIN_SCRIPT_S - 1e-9:
        raise ConfigError(f"script lasts {total:.1f} s; at least {MIN_SCRIPT_S:.0f} s required")
    n = int(math.floor(total / DT + 1e-9)) + 1
    t = np.round(np.arange(n) * DT, 10)
    x, y = profile.position(t)
    speed = profile.speed(t)
    heading = profile.heading(t)
    rng = np.random.default_rng(script.seed)
    noise = script.noise
    x = x + rng.normal(0.0, noise.pos_sigma_m, n) if noise.pos_sigma_m > 0 else x
    y = y + rng.normal(0.0, noise.pos_sigma_m, n) if noise.pos_sigma_m > 0 else y
    if noise.speed_sigma_mps > 0:
        speed = np.maximum(speed + rng.normal(0.0, noise.speed_sigma_mps, n), 0.0)
    if noise.heading_sigma_rad > 0:
        heading = heading + rng.normal(0.0, noise.heading_sigma_rad, n)
    trip_id = script.trip_id or f"synth-{script.seed}"
    return Trajectory(trip_id, t, x, y, speed, heading)


# ---------------------------------------------------------------- corpora

MAX_LAT_ACCEL = 3.0
RAMP_RANGE_S = (0.5, 1.5)
DEFAULT_WANDER = (0.0, 0.0)  # speed m/s, heading rad; off by default
TRANSITION_RANGE_S = (1.0, 2.0)


def _seg(kind, duration=None, **params):
    return Segment(Maneuver(kind), None if duration is None else float(duration), params)


def random_script(
    rng: np.random.Generator, seed: int, target_s: float = 65.0, noise=None, all_kinds=False, wander=None
):
    """Random urban/highway script within the default maneuver envelopes.

    Cruise 10-30 m/s, braking up to 6 m/s^2, turn radii 10-100 m and 3.5 m
    lane changes over 3-5 s. Turns are preceded by a brake when the current
    speed would exceed 3 m/s^2 of lateral acceleration.
    """
    v = float(rng.uniform(10.0, 30.0))
    if wander is None and any(DEFAULT_WANDER):
        wander = Wander(DEFAULT_WANDER[0], DEFAULT_WANDER[1], seed=(seed + 1) % 2**32)
    script = ManeuverScript(
        [], noise=noise or Noise(), seed=seed, v0=v, heading0=float(rng.uniform(-np.pi, np.pi)), wander=wander
    )
    segs = script.segments
    elapsed = 0.0
    kinds = ["Cruise", "Accel", "Brake", "TurnArc", "LaneChange", "Stop"]
    queue = list(rng.permutation(kinds)) if all_kinds else []

    def brake_to(target):
        nonlocal v, elapsed
        if v - target <= 0.05:
            return
        decel = float(rng.uniform(1.5, 6.0))
        ramp = float(rng.uniform(*RAMP_RANGE_S))
        duration = (v - target) / decel + ramp
        segs.append(_seg("Brake", duration, decel=decel, ramp_s=ramp))
        elapsed += duration
        v = target

    while elapsed < target_s or queue:
        kind = queue.pop(0) if queue else str(rng.choice(kinds, p=[0.3, 0.15, 0.12, 0.2, 0.15, 0.08]))
        if v < 1.0 and kind not in ("Accel", "Stop"):
            kind = "Accel"
        if kind == "Cruise":
            d = float(rng.uniform(3.0, 10.0))
            segs.append(_seg("Cruise", d))
        elif kind == "Accel":
            a = float(rng.uniform(0.8, 2.5))
            target = float(rng.uniform(max(v + 3.0, 10.0), 30.0)) if v < 27.0 else 30.0
            if target <= v:
                continue
            ramp = float(rng.uniform(*RAMP_RANGE_S))
            d = (target - v) / a + ramp
            segs.append(_seg("Accel", d, a=a, ramp_s=ramp))
            v = target
        elif kind == "Brake":
            brake_to(float(rng.uniform(max(v * 0.3, 3.0), max(v * 0.8, 3.5))))
            continue
        elif kind == "Stop":
            brake_to(0.0)
            d = float(rng.uniform(2.0, 6.0))
            segs.append(_seg("Stop", d))
            v = 0.0
        elif kind == "TurnArc":
            radius = float(rng.uniform(10.0, 100.0))
            brake_to(min(v, math.sqrt(MAX_LAT_ACCEL * radius)))
            angle = float(rng.uniform(np.pi / 6, np.pi / 2)) * rng.choice([-1.0, 1.0])
            transition = float(rng.uniform(*TRANSITION_RANGE_S))
            segs.append(_seg("TurnArc", None, radius=radius, angle=angle, transition_s=transition))
            d = radius * abs(angle) / v + transition
        elif kind == "LaneChange":
            if v < 8.0:
                d = (12.0 - v) / 2.0 + 1.0
                segs.append(_seg("Accel", d, a=2.0, ramp_s=1.0))
                elapsed += d
                v = 12.0
            d = float(rng.uniform(3.0, 5.0))
            segs.append(_seg("LaneChange", d, lateral=3.5 * float(rng.choice([-1.0, 1.0]))))
        elapsed += d
    if v < 1.0:
        segs.append(_seg("Accel", 6.0, a=2.0, ramp_s=1.0))
    segs.append(_seg("Cruise", 3.0))
    return script


def three_regime_script(rng, seed, noise=None, repeats=3):
    """Cruise / turn / brake pattern repeated ``repeats`` times."""
    v = 15.0
    segs = []
    for _ in range(repeats):
        segs.append(_seg("Cruise", float(rng.uniform(5.0, 8.0))))
        radius = float(rng.uniform(40.0, 80.0))
        angle = float(rng.uniform(0.5, 1.2)) * rng.choice([-1.0, 1.0])
        segs.append(_seg("TurnArc", None, radius=radius, angle=angle, transition_s=1.5))
        segs.append(_seg("Cruise", float(rng.uniform(3.0, 5.0))))
        decel = float(rng.uniform(2.0, 5.0))
        segs.append(_seg("Brake", 6.0 / decel + 1.0, decel=decel, ramp_s=1.0))
        segs.append(_seg("Accel", 4.0, a=2.0, ramp_s=1.0))
    segs.append(_seg("Cruise", 4.0))
    return ManeuverScript(segs, noise=noise or Noise(), seed=seed, v0=v, heading0=float(rng.uniform(-np.pi, np.pi)))


def constant_velocity_script(rng, seed, noise=None, duration=40.0):
    v = float(rng.uniform(10.0, 30.0))
    return ManeuverScript(
        [_seg("Cruise", duration)],
        noise=noise or Noise(0.0, 0.0, 0.0),
        seed=seed,
        v0=v,
        heading0=float(rng.uniform(-np.pi, np.pi)),
    )


MIXES = {
    "default": random_script,
    "three_regime": three_regime_script,
    "constant_velocity": constant_velocity_script,
}


def generate_corpus(n_trips: int, mix="default", seed: int = 0, noise: Noise | None = None) -> list[Trajectory]:
    """Deterministic corpus of ``n_trips`` trajectories.

    ``mix`` is a name from :data:`MIXES` or a callable ``(rng, seed, noise=...)
    -> ManeuverScript``. With the default mix the first trip contains every
    maneuver kind.
    """
    if n_trips < 1:
        raise ConfigError("n_trips must be >= 1")
    make = MIXES[mix] if isinstance(mix, str) else mix
    trips = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_trips)):
        trip_seed = int(child.generate_state(1)[0])
        rng = np.random.default_rng(child)
        kwargs = {"noise": noise}
        if make is random_script and i == 0:
            kwargs["all_kinds"] = True
        script = make(rng, trip_seed, **kwargs)
        script.trip_id = f"trip{i:03d}"
        trips.append(generate_trip(script))
    return trips

"""Error-driven model-based communication over a perfect channel.

The transmitter replays a trajectory while running a shadow copy of the
receiver. A packet goes out at the start of each trip, whenever the
receiver's predicted position drifts more than the threshold from the truth,
and when the current model's forecast horizon runs out. Each packet carries
the anchor state and either a bank entry id, a full new kernel, or a
constant-velocity tag; the receiver's estimate is a function of the packets
alone.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from joblib import Parallel, delayed

from .bank import (
    DEFAULT_HORIZON_S,
    DEFAULT_THRESHOLD,
    DEFAULT_TW,
    DT,
    KernelBank,
    RunMetrics,
    Scheme,
    SelectionConfig,
    Source,
    UpdateContext,
    apply_operator,
    build_bank,
    channel_windows,
    compute_pte,
    constant_velocity_path,
    integrate_position,
    select_or_create,
)
from .exceptions import ConfigError, Empty
from .gp import FitConfig, KernelSpec

ANCHOR_BYTES = 20  # x0, y0, v0, theta0, t_0 as float32
KERNEL_ID_BYTES = 4
NEW_KERNEL_BYTES = 2 * 5 * 8  # two channels, five float64 hyperparameters
WINDOW_VALUE_BYTES = 8  # windows ship as float64 so the receiver reproduces forecasts exactly
PAYLOAD_MODES = ("window", "reconstruct")
PACKET_LOG_HEADER = ("t", "kind", "kernel_id", "trigger_pte_m", "x0", "y0", "v0", "theta0")


class PacketKind(str, Enum):
    KERNEL_ID = "kernel_id"
    NEW_KERNEL = "new_kernel"
    CV = "cv"


_KIND_BY_SOURCE = {Source.BANK: PacketKind.KERNEL_ID, Source.NEW: PacketKind.NEW_KERNEL, Source.CV: PacketKind.CV}


def packet_bytes(kind: PacketKind, window_values: int = 0) -> int:
    base = {PacketKind.KERNEL_ID: KERNEL_ID_BYTES, PacketKind.NEW_KERNEL: NEW_KERNEL_BYTES, PacketKind.CV: 0}[kind]
    return ANCHOR_BYTES + base + WINDOW_VALUE_BYTES * window_values


@dataclass(frozen=True)
class PacketEvent:
    """One model update as seen on the air.

    ``trigger_pte_m`` is the receiver's error that caused the packet; it is
    NaN for the first packet of a trip. ``anchor`` is ``(x0, y0, v0, theta0,
    t_0)`` with ``t_0 == t``.
    """

    t: float
    trip_id: str
    kind: PacketKind
    kernel_id: int | None
    trigger_pte_m: float
    anchor: tuple[float, float, float, float, float]
    specs: tuple[KernelSpec, KernelSpec] | None = None
    window: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    @property
    def payload_bytes(self) -> int:
        n = 0 if self.window is None else sum(len(w) for w in self.window)
        return packet_bytes(self.kind, n)

    def to_record(self) -> dict:
        return {
            "t": self.t,
            "trip_id": self.trip_id,
            "kind": self.kind.value,
            "kernel_id": self.kernel_id,
            "trigger_pte_m": None if math.isnan(self.trigger_pte_m) else self.trigger_pte_m,
            "anchor": list(self.anchor),
            "specs": None if self.specs is None else [s.to_dict() for s in self.specs],
            "window": None if self.window is None else [list(w) for w in self.window],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PacketEvent":
        trigger = rec.get("trigger_pte_m")
        return cls(
            t=float(rec["t"]),
            trip_id=str(rec["trip_id"]),
            kind=PacketKind(rec["kind"]),
            kernel_id=None if rec.get("kernel_id") is None else int(rec["kernel_id"]),
            trigger_pte_m=math.nan if trigger is None else float(trigger),
            anchor=tuple(float(v) for v in rec["anchor"]),
            specs=None if rec.get("specs") is None else tuple(KernelSpec.from_dict(d) for d in rec["specs"]),
            window=None if rec.get("window") is None else tuple(tuple(float(v) for v in w) for w in rec["window"]),
        )


@dataclass
class ChannelMetrics:
    packets: int
    duration_s: float
    packets_per_s: float
    mean_inter_packet_s: float
    payload_bytes_total: int
    max_receiver_pte_m: float

    def to_dict(self) -> dict:
        return {
            "packets": self.packets,
            "duration_s": self.duration_s,
            "packets_per_s": self.packets_per_s,
            "mean_inter_packet_s": self.mean_inter_packet_s,
            "payload_bytes_total": self.payload_bytes_total,
            "max_receiver_pte_m": self.max_receiver_pte_m,
        }

    @classmethod
    def from_run(cls, metrics: RunMetrics, duration_s: float, tw: int, payload_mode: str = "window"):
        """Channel cost implied by a :func:`build_bank` run with growth enabled."""
        if not metrics.selections:
            raise Empty("run has no selections")
        total, max_pte, seen_trips = 0, 0.0, set()
        for sel in metrics.selections:
            kind = _KIND_BY_SOURCE[sel.source]
            ship = payload_mode == "window" or kind is PacketKind.NEW_KERNEL or sel.trip_id not in seen_trips
            seen_trips.add(sel.trip_id)
            total += packet_bytes(kind, 2 * tw if ship else 0)
            max_pte = max(max_pte, float(sel.pte_trace[:, 1].max()))
        persist = [s.persistency_s for s in metrics.selections]
        return cls(
            len(persist), duration_s, len(persist) / duration_s, float(np.mean(persist)), total, max_pte
        )


# ---------------------------------------------------------------- receiver


def _channel_forecast(scheme, ops, windows, anchor, steps, dt):
    """Per-channel forecasts and the implied positions, ``steps`` ahead."""
    a = apply_operator(ops[0], windows[0])[:steps]
    b = apply_operator(ops[1], windows[1])[:steps]
    if scheme is Scheme.DIRECT:
        return (a, b), (a, b)
    x, y = integrate_position(a, b, anchor[0], anchor[1], dt, initial=(anchor[2], anchor[3]))
    return (a, b), (x, y)


class Receiver:
    """Rebuilds position estimates from packets only.

    Holds its own copy of the bank; ``NewKernel`` packets append to it. In
    ``reconstruct`` payload mode the receiver keeps its own per-sample
    channel history so packets without a window can be conditioned on the
    receiver's past estimates.
    """

    def __init__(self, bank: KernelBank, horizon_steps: int, payload_mode: str = "window", dt: float = DT):
        if payload_mode not in PAYLOAD_MODES:
            raise ConfigError(f"payload_mode must be one of {PAYLOAD_MODES}")
        self.bank = bank
        self.scheme = bank.scheme
        self.tw = bank.tw
        self.horizon_steps = int(horizon_steps)
        self.payload_mode = payload_mode
        self.dt = dt
        self.trip_id = None
        self.t_0 = None
        self.path = None
        self._history: dict[int, tuple[float, float]] = {}

    def _index(self, t):
        return int(round(t / self.dt))

    def _anchor_channels(self, anchor):
        return (anchor[0], anchor[1]) if self.scheme is Scheme.DIRECT else (anchor[2], anchor[3])

    def window_from_history(self, trip_id, t_0, anchor):
        """Window the receiver would use without a shipped one, or None."""
        if trip_id != self.trip_id:
            return None
        i0 = self._index(t_0)
        rows = []
        for i in range(i0 - self.tw + 1, i0):
            if i not in self._history:
                return None
            rows.append(self._history[i])
        rows.append(self._anchor_channels(anchor))
        a, b = zip(*rows)
        return np.array(a), np.array(b)

    def receive(self, packet: PacketEvent):
        if packet.trip_id != self.trip_id:
            self.trip_id = packet.trip_id
            self._history = {}
        anchor = packet.anchor
        if packet.kind is PacketKind.NEW_KERNEL:
            entry = self.bank.add(packet.specs, (packet.trip_id, packet.t))
            if entry.id != packet.kernel_id:
                raise ConfigError(f"receiver bank out of sync: new entry {entry.id} != {packet.kernel_id}")
        steps = self.horizon_steps
        if packet.window is not None:
            windows = tuple(np.array(w) for w in packet.window)
        else:
            windows = self.window_from_history(packet.trip_id, packet.t, anchor)
        if packet.kind is PacketKind.CV:
            x, y = constant_velocity_path(anchor, steps, self.dt)
            if self.scheme is Scheme.DIRECT:
                channels = (x, y)
            else:
                channels = (np.full(steps, anchor[2]), np.full(steps, anchor[3]))
        else:
            if windows is None:
                raise ConfigError("packet carries no window and the receiver has no history for it")
            ops = self.bank.operators(packet.kernel_id, steps, self.dt)
            channels, (x, y) = _channel_forecast(self.scheme, ops, windows, anchor, steps, self.dt)
        self.t_0 = packet.t
        self.path = (x, y)
        if self.payload_mode == "reconstruct":
            i0 = self._index(packet.t)
            if windows is not None:
                for j, pair in enumerate(zip(*windows)):
                    self._history[i0 - self.tw + 1 + j] = (float(pair[0]), float(pair[1]))
            else:
                self._history[i0] = self._anchor_channels(anchor)
            for k in range(steps):
                self._history[i0 + 1 + k] = (float(channels[0][k]), float(channels[1][k]))

    def estimate(self, k: int):
        """Estimated position ``k`` steps (1-based) after the last packet."""
        if self.path is None:
            raise Empty("no packet received yet")
        return float(self.path[0][k - 1]), float(self.path[1][k - 1])


def reconstruct_estimates(packets, bank: KernelBank, trip_times, horizon_steps, payload_mode="window", dt=DT):
    """Standalone receiver: estimates at every sample after each trip's first packet.

    ``trip_times`` maps trip id to its sample times. Returns rows
    ``(trip_id, t, x_est, y_est)`` in packet order.
    """
    receiver = Receiver(bank, horizon_steps, payload_mode, dt)
    by_trip: dict[str, list[PacketEvent]] = {}
    for p in packets:
        by_trip.setdefault(p.trip_id, []).append(p)
    rows = []
    for trip_id, trip_packets in by_trip.items():
        t = np.asarray(trip_times[trip_id], dtype=float)
        starts = [int(np.flatnonzero(t == p.t)[0]) for p in trip_packets]
        ends = starts[1:] + [len(t) - 1]
        for p, i0, i1 in zip(trip_packets, starts, ends):
            receiver.receive(p)
            for i in range(i0 + 1, i1 + 1):
                x, y = receiver.estimate(i - i0)
                rows.append((trip_id, float(t[i]), x, y))
    return rows


# ---------------------------------------------------------------- transmitter


class Transmitter:
    """Drives a shadow receiver along trajectories and decides when to send.

    ``bank`` is used as the transmitter's bank (grown in place when ``grow``);
    the shadow receiver starts from a copy of it. After :meth:`run` the
    receiver's estimates are available in :attr:`estimates` as rows
    ``(trip_id, t, x_est, y_est, pte)``.
    """

    def __init__(
        self,
        bank: KernelBank,
        threshold: float = DEFAULT_THRESHOLD,
        horizon_cap_s: float = DEFAULT_HORIZON_S,
        reuse_eval: str = "fixed_1s",
        fit_config: FitConfig | None = None,
        grow: bool = True,
        payload_mode: str = "window",
    ):
        self.bank = bank
        self.cfg = SelectionConfig(threshold, bank.tw, horizon_cap_s, reuse_eval, fit=fit_config or FitConfig())
        self.grow = grow
        self.receiver = Receiver(bank.copy(), self.cfg.horizon_steps, payload_mode, self.cfg.dt)
        self.payload_mode = payload_mode
        self.packets: list[PacketEvent] = []
        self.persistency: list[float] = []
        self.estimates: list[tuple] = []
        self.duration_s = 0.0

    def _context(self, traj, i0):
        tw, cfg = self.cfg.tw, self.cfg
        truth = channel_windows(traj, i0, tw, self.bank.scheme)
        steps = min(cfg.horizon_steps, len(traj) - 1 - i0)
        anchor = (float(traj.x_enu[i0]), float(traj.y_enu[i0]), float(traj.speed[i0]), float(traj.heading_unwrapped[i0]))
        windows, shipped = truth, True
        if self.payload_mode == "reconstruct":
            own = self.receiver.window_from_history(traj.trip_id, float(traj.t[i0]), anchor)
            if own is not None:
                windows, shipped = own, False
        ctx = UpdateContext(
            self.bank.scheme,
            traj.trip_id,
            float(traj.t[i0]),
            windows,
            anchor,
            traj.x_enu[i0 + 1 : i0 + 1 + steps],
            traj.y_enu[i0 + 1 : i0 + 1 + steps],
            fit_windows=truth,
        )
        return ctx, shipped

    def _packet(self, ctx, selection, shipped, trigger):
        kind = _KIND_BY_SOURCE[selection.source]
        specs = None
        window = ctx.windows
        if kind is PacketKind.NEW_KERNEL:
            specs = self.bank.entries[selection.entry_id].channel_specs
            window, shipped = ctx.fit_windows, True
        return PacketEvent(
            t=ctx.t_0,
            trip_id=ctx.trip_id,
            kind=kind,
            kernel_id=selection.entry_id,
            trigger_pte_m=trigger,
            anchor=(*ctx.anchor, ctx.t_0),
            specs=specs,
            window=tuple(tuple(float(v) for v in w) for w in window) if shipped else None,
        )

    def run(self, traj) -> list[PacketEvent]:
        """Simulate one trip; returns the packets it produced."""
        cfg, rx = self.cfg, self.receiver
        n = len(traj)
        i0 = cfg.tw
        trigger = math.nan
        sent = []
        while i0 < n - 1:
            ctx, shipped = self._context(traj, i0)
            selection, _ = select_or_create(self.bank, ctx, cfg, grow=self.grow)
            packet = self._packet(ctx, selection, shipped, trigger)
            rx.receive(packet)
            sent.append(packet)
            k = 0
            while True:
                k += 1
                i = i0 + k
                x, y = rx.estimate(k)
                pte = float(compute_pte(x, y, traj.x_enu[i], traj.y_enu[i]))
                self.estimates.append((traj.trip_id, float(traj.t[i]), x, y, pte))
                if pte > cfg.threshold or k == cfg.horizon_steps or i == n - 1:
                    break
            self.persistency.append(k * cfg.dt)
            trigger = pte
            i0 = i
        self.packets.extend(sent)
        self.duration_s += traj.duration
        return sent

    def metrics(self) -> ChannelMetrics:
        if not self.packets:
            raise Empty("no packets sent")
        pte = max(row[4] for row in self.estimates)
        return ChannelMetrics(
            len(self.packets),
            self.duration_s,
            len(self.packets) / self.duration_s,
            float(np.mean(self.persistency)),
            int(sum(p.payload_bytes for p in self.packets)),
            float(pte),
        )


def simulate_link(
    traj,
    bank: KernelBank,
    threshold: float = DEFAULT_THRESHOLD,
    grow: bool = True,
    payload_mode: str = "window",
    horizon_cap_s: float = DEFAULT_HORIZON_S,
    reuse_eval: str = "fixed_1s",
    fit_config: FitConfig | None = None,
):
    """Simulate one trip (or a list of trips, sharing ``bank``).

    Returns ``(packets, channel_metrics)``.
    """
    tx = Transmitter(bank, threshold, horizon_cap_s, reuse_eval, fit_config, grow, payload_mode)
    for t in [traj] if not isinstance(traj, (list, tuple)) else traj:
        tx.run(t)
    return tx.packets, tx.metrics()


def max_step_drift(estimates) -> float:
    """Largest PTE increase between consecutive samples of one model's interval."""
    drift = 0.0
    prev = None
    for trip_id, _, _, _, pte in estimates:
        if prev is not None and prev[0] == trip_id:
            drift = max(drift, pte - prev[1])
        prev = (trip_id, pte)
    return drift


# ---------------------------------------------------------------- logs


def packet_log_csv(packets) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PACKET_LOG_HEADER)
    for p in packets:
        writer.writerow(
            [
                repr(p.t),
                p.kind.value,
                "" if p.kernel_id is None else p.kernel_id,
                "" if math.isnan(p.trigger_pte_m) else repr(p.trigger_pte_m),
                *(repr(v) for v in p.anchor[:4]),
            ]
        )
    return buf.getvalue()


def read_packet_log_csv(text) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != PACKET_LOG_HEADER:
        raise ConfigError(f"unexpected packet log header {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append(
            {
                "t": float(rec["t"]),
                "kind": PacketKind(rec["kind"]),
                "kernel_id": int(rec["kernel_id"]) if rec["kernel_id"] else None,
                "trigger_pte_m": float(rec["trigger_pte_m"]) if rec["trigger_pte_m"] else math.nan,
                **{k: float(rec[k]) for k in ("x0", "y0", "v0", "theta0")},
            }
        )
    return rows


def packets_to_jsonl(packets) -> str:
    return "".join(json.dumps(p.to_record()) + "\n" for p in packets)


def packets_from_jsonl(text) -> list[PacketEvent]:
    return [PacketEvent.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------- sweeps

SCHEME_LABELS = {
    "direct": (Scheme.DIRECT, False),
    "direct-hybrid": (Scheme.DIRECT, True),
    "indirect": (Scheme.INDIRECT, False),
    "indirect-hybrid": (Scheme.INDIRECT, True),
}


def parse_scheme(label):
    if isinstance(label, tuple):
        return Scheme(label[0]), bool(label[1])
    try:
        return SCHEME_LABELS[label]
    except KeyError:
        raise ConfigError(f"unknown scheme {label!r}; expected one of {sorted(SCHEME_LABELS)}") from None


def scheme_label(scheme, hybrid) -> str:
    return Scheme(scheme).value + ("-hybrid" if hybrid else "")


def shuffled(corpus, seed):
    """Trip order used by a sweep cell; ``None`` keeps the corpus order."""
    corpus = list(corpus)
    if seed is None:
        return corpus
    order = np.random.default_rng(seed).permutation(len(corpus))
    return [corpus[i] for i in order]


def ratio_quartile_means(metrics: RunMetrics):
    """Mean generation ratio over the first and last quarter of data time."""
    t = metrics.column("data_time_s")
    r = metrics.column("gen_ratio")
    if t.size == 0:
        raise Empty("no events")
    span = t.max()
    return float(r[t <= span / 4].mean()), float(r[t >= 3 * span / 4].mean())


@dataclass(frozen=True)
class Cell:
    scheme: Scheme
    hybrid: bool
    threshold: float
    tw: int
    shuffle_seed: int | None = None

    @property
    def label(self) -> str:
        return scheme_label(self.scheme, self.hybrid)


@dataclass
class CellResult:
    cell: Cell
    bank: KernelBank
    metrics: RunMetrics
    channel: ChannelMetrics
    summary: dict = field(default_factory=dict)


SUMMARY_FIELDS = (
    "scheme",
    "threshold_m",
    "tw",
    "shuffle_seed",
    "bank_size",
    "updates",
    "mean_mp_s",
    "final_gen_ratio",
    "ratio_q1_mean",
    "ratio_q4_mean",
    "packets_per_s",
    "payload_bytes_total",
    "max_receiver_pte_m",
)


def run_cell(corpus, cell: Cell, horizon_cap_s=DEFAULT_HORIZON_S, reuse_eval="fixed_1s", fit_config=None, payload_mode="window"):
    trips = shuffled(corpus, cell.shuffle_seed)
    bank, metrics = build_bank(
        trips, cell.scheme, cell.hybrid, cell.threshold, cell.tw, horizon_cap_s, reuse_eval, fit_config
    )
    duration = float(sum(t.duration for t in trips))
    channel = ChannelMetrics.from_run(metrics, duration, cell.tw, payload_mode)
    q1, q4 = ratio_quartile_means(metrics)
    summary = {
        "scheme": cell.label,
        "threshold_m": cell.threshold,
        "tw": cell.tw,
        "shuffle_seed": "" if cell.shuffle_seed is None else cell.shuffle_seed,
        "bank_size": len(bank),
        "updates": len(metrics),
        "mean_mp_s": float(metrics.column("persistency_s").mean()),
        "final_gen_ratio": metrics.rows[-1]["gen_ratio"],
        "ratio_q1_mean": q1,
        "ratio_q4_mean": q4,
        "packets_per_s": channel.packets_per_s,
        "payload_bytes_total": channel.payload_bytes_total,
        "max_receiver_pte_m": channel.max_receiver_pte_m,
    }
    return CellResult(cell, bank, metrics, channel, summary)


def sweep(
    corpus,
    schemes=("direct", "direct-hybrid", "indirect", "indirect-hybrid"),
    thresholds=(0.2, 0.3, 0.4, 0.5),
    tws=(DEFAULT_TW,),
    shuffle_seeds=(None,),
    horizon_cap_s=DEFAULT_HORIZON_S,
    reuse_eval="fixed_1s",
    fit_config=None,
    n_jobs=1,
):
    """Full factorial over schemes x thresholds x tws x shuffle seeds.

    Cells run independently (in parallel when ``n_jobs != 1``); results come
    back in factorial order regardless.
    """
    corpus = list(corpus)
    if not corpus:
        raise ConfigError("sweep needs a nonempty corpus")
    cells = [
        Cell(*parse_scheme(s), float(th), int(tw), seed)
        for s in schemes
        for th in thresholds
        for tw in tws
        for seed in shuffle_seeds
    ]
    jobs = (delayed(run_cell)(corpus, c, horizon_cap_s, reuse_eval, fit_config) for c in cells)
    return Parallel(n_jobs=n_jobs)(jobs)

"""Kernel-bank construction: direct and indirect model generation.

A bank is an append-only list of entries, each holding one fitted
:class:`~kernelbank.gp.KernelSpec` per channel (x/y for the direct scheme,
speed/heading for the indirect scheme). At every model-update instant all
entries (plus a constant-velocity model in hybrid mode) are conditioned on
the latest training window and scored by position tracking error (PTE);
a new entry is fitted only when none of them passes.

All models operate on the nominal 10 Hz grid relative to the update time:
window samples sit at ``-(tw-1)*dt .. 0`` and forecasts at ``dt, 2*dt, ...``.
That makes each entry's posterior-mean operator a constant matrix, computed
once when the entry is created.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import cho_solve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, Empty, InsufficientHistory
from .gp import (
    FitConfig,
    KernelSpec,
    TrainingWindow,
    cholesky_jitter,
    fit_hyperparameters,
    kernel_matrix,
    STD_FLOOR,
)

DT = 0.1
DEFAULT_THRESHOLD = 0.5
DEFAULT_TW = 10
DEFAULT_HORIZON_S = 10.0
REUSE_EVAL_MODES = ("first_step", "fixed_1s")


class Scheme(str, Enum):
    DIRECT = "direct"
    INDIRECT = "indirect"

    @property
    def channels(self) -> tuple[str, str]:
        return ("x", "y") if self is Scheme.DIRECT else ("speed", "heading")


class Source(str, Enum):
    BANK = "bank"
    CV = "cv"
    NEW = "new"


# ---------------------------------------------------------------- geometry


def compute_pte(x_pred, y_pred, x_true, y_true):
    """Euclidean position tracking error; broadcasts over arrays."""
    return np.hypot(np.subtract(x_pred, x_true), np.subtract(y_pred, y_true))


def integrate_position(speed_pred, heading_pred, x0, y0, dt=DT, initial=None):
    """Trapezoidal dead reckoning of predicted speed/heading.

    ``speed_pred[..., k]`` and ``heading_pred[..., k]`` are forecasts at
    ``t_0 + (k + 1) * dt``. ``initial`` is the ``(speed, heading)`` observed at
    ``t_0``; it defaults to the first forecast. Returns ``(x, y)`` with
    ``x[..., k]`` the position at ``t_0 + (k + 1) * dt``.
    """
    speed = np.asarray(speed_pred, dtype=float)
    heading = np.asarray(heading_pred, dtype=float)
    if initial is None:
        v0, h0 = speed[..., :1], heading[..., :1]
    else:
        v0 = np.full(speed.shape[:-1] + (1,), float(initial[0]))
        h0 = np.full(speed.shape[:-1] + (1,), float(initial[1]))
    fx = np.concatenate([v0 * np.cos(h0), speed * np.cos(heading)], axis=-1)
    fy = np.concatenate([v0 * np.sin(h0), speed * np.sin(heading)], axis=-1)
    x = x0 + np.cumsum(0.5 * dt * (fx[..., :-1] + fx[..., 1:]), axis=-1)
    y = y0 + np.cumsum(0.5 * dt * (fy[..., :-1] + fy[..., 1:]), axis=-1)
    return x, y


def constant_velocity_path(anchor, steps, dt=DT):
    """Positions ``k = 1..steps`` steps ahead under constant speed and heading."""
    x0, y0, v0, h0 = anchor[:4]
    tau = dt * np.arange(1, steps + 1)
    return x0 + v0 * math.cos(h0) * tau, y0 + v0 * math.sin(h0) * tau


# ---------------------------------------------------------------- operators


def window_times(tw, dt=DT):
    """Relative times of a training window, re-based to start at 0."""
    return dt * np.arange(tw)


def forecast_times(tw, steps, dt=DT):
    return dt * (tw - 1 + np.arange(1, steps + 1))


def mean_operator(spec: KernelSpec, tw: int, steps: int, dt: float = DT) -> np.ndarray:
    """Matrix ``A`` with ``A @ z`` = standardized posterior mean at the forecast times."""
    tt = window_times(tw, dt)
    K = kernel_matrix(spec, tt, tt)
    K[np.diag_indices(tw)] += spec.noise_variance
    L = cholesky_jitter(K)
    K_star = kernel_matrix(spec, tt, forecast_times(tw, steps, dt))
    # A = K_star^T K^{-1}
    return cho_solve((L, True), K_star, check_finite=False).T


def _standardize_rows(values):
    values = np.asarray(values, dtype=float)
    mean = values.mean(axis=-1, keepdims=True)
    std = np.maximum(values.std(axis=-1, keepdims=True), STD_FLOOR)
    return (values - mean) / std, mean, std


def apply_operator(A, window_values):
    """Forecast one channel from a window with a precomputed operator.

    ``A`` is (steps, tw) or (E, steps, tw); result is (steps,) or (E, steps).
    """
    z, mean, std = _standardize_rows(window_values)
    if A.ndim == 2:
        return (A @ z) * std + mean
    return np.einsum("eqn,n->eq", A, z) * std + mean


# ---------------------------------------------------------------- bank types


@dataclass
class BankEntry:
    id: int
    scheme: Scheme
    channel_specs: tuple[KernelSpec, KernelSpec]
    created_at: tuple[str, float]
    use_count: int = 1
    total_persistency_s: float = 0.0

    def to_records(self) -> list[dict]:
        return [
            {
                "id": self.id,
                "scheme": self.scheme.value,
                "channel": channel,
                "spec": spec.to_dict(),
                "created_at": {"trip_id": self.created_at[0], "t_0": self.created_at[1]},
                "use_count": self.use_count,
                "total_persistency_s": self.total_persistency_s,
            }
            for channel, spec in zip(self.scheme.channels, self.channel_specs)
        ]


class KernelBank:
    """Append-only bank of per-channel kernel pairs with usage statistics."""

    def __init__(self, scheme, hybrid=False, pte_threshold_m=DEFAULT_THRESHOLD, tw=DEFAULT_TW, entries=()):
        self.scheme = Scheme(scheme)
        self.hybrid = bool(hybrid)
        self.pte_threshold_m = float(pte_threshold_m)
        self.tw = int(tw)
        self.entries: list[BankEntry] = []
        self._ops: dict = {}
        for entry in entries:
            self._check_entry(entry, len(self.entries))
            self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def _check_entry(self, entry, expected_id):
        if entry.scheme is not self.scheme:
            raise ConfigError(f"{entry.scheme.value} entry cannot join a {self.scheme.value} bank")
        if entry.id != expected_id:
            raise ConfigError(f"entry ids must be dense from 0; got {entry.id}, expected {expected_id}")

    def add(self, specs, created_at) -> BankEntry:
        entry = BankEntry(len(self.entries), self.scheme, tuple(specs), (str(created_at[0]), float(created_at[1])))
        self.entries.append(entry)
        return entry

    def operators(self, entry_id: int, steps: int, dt: float = DT):
        """Per-channel forecast operators for one entry, cached by horizon."""
        key = (entry_id, steps, dt)
        ops = self._ops.get(key)
        if ops is None:
            specs = self.entries[entry_id].channel_specs
            ops = tuple(mean_operator(s, self.tw, steps, dt) for s in specs)
            self._ops[key] = ops
        return ops

    def stacked_operators(self, steps: int, dt: float = DT):
        key = ("stack", len(self.entries), steps, dt)
        ops = self._ops.get(key)
        if ops is None:
            per = [self.operators(e.id, steps, dt) for e in self.entries]
            ops = tuple(np.stack([p[c] for p in per]) for c in range(2))
            self._ops = {k: v for k, v in self._ops.items() if k[0] != "stack"}
            self._ops[key] = ops
        return ops

    def copy(self) -> "KernelBank":
        clone = KernelBank(self.scheme, self.hybrid, self.pte_threshold_m, self.tw)
        for e in self.entries:
            clone.entries.append(
                BankEntry(e.id, e.scheme, e.channel_specs, e.created_at, e.use_count, e.total_persistency_s)
            )
        return clone

    def to_json(self) -> str:
        records = [rec for entry in self.entries for rec in entry.to_records()]
        return json.dumps(records, indent=1)

    @classmethod
    def from_json(cls, text, hybrid=False, pte_threshold_m=DEFAULT_THRESHOLD, tw=DEFAULT_TW) -> "KernelBank":
        records = json.loads(text)
        by_id: dict[int, dict] = {}
        scheme = None
        for rec in records:
            rec_scheme = Scheme(rec["scheme"])
            if scheme is None:
                scheme = rec_scheme
            elif rec_scheme is not scheme:
                raise ConfigError("bank file mixes schemes")
            by_id.setdefault(int(rec["id"]), {})[rec["channel"]] = rec
        if scheme is None:
            raise ConfigError("bank file is empty; pass the scheme explicitly")
        entries = []
        for entry_id in sorted(by_id):
            recs = by_id[entry_id]
            if set(recs) != set(scheme.channels):
                raise ConfigError(f"entry {entry_id}: channels {sorted(recs)} != {list(scheme.channels)}")
            first = recs[scheme.channels[0]]
            entries.append(
                BankEntry(
                    entry_id,
                    scheme,
                    tuple(KernelSpec.from_dict(recs[c]["spec"]) for c in scheme.channels),
                    (first["created_at"]["trip_id"], float(first["created_at"]["t_0"])),
                    int(first["use_count"]),
                    float(first["total_persistency_s"]),
                )
            )
        return cls(scheme, hybrid, pte_threshold_m, tw, entries)


@dataclass
class ModelSelection:
    source: Source
    entry_id: int | None
    trip_id: str
    t_0: float
    persistency_s: float
    steps: int
    pte_trace: np.ndarray  # (steps, 2): time, PTE
    violated: bool

    @property
    def label(self) -> str:
        if self.source is Source.CV:
            return "cv"
        return f"{self.source.value}:{self.entry_id}"


@dataclass
class UpdateContext:
    """Everything a model update at ``t_0`` may look at.

    ``windows`` holds the per-channel values the candidates are conditioned
    on; ``fit_windows`` the true values a new kernel is fitted on (the same
    arrays unless a receiver reconstructs its own window).
    """

    scheme: Scheme
    trip_id: str
    t_0: float
    windows: tuple[np.ndarray, np.ndarray]
    anchor: tuple[float, float, float, float]
    truth_x: np.ndarray
    truth_y: np.ndarray
    fit_windows: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def steps(self) -> int:
        return len(self.truth_x)


def channel_windows(traj, i0, tw, scheme):
    lo = i0 - tw + 1
    if lo < 0:
        raise InsufficientHistory(f"trip {traj.trip_id}: need {tw} samples up to index {i0}")
    sl = slice(lo, i0 + 1)
    if Scheme(scheme) is Scheme.DIRECT:
        return traj.x_enu[sl].copy(), traj.y_enu[sl].copy()
    return traj.speed[sl].copy(), traj.heading_unwrapped[sl].copy()


def make_context(traj, i0, scheme, tw, horizon_steps) -> UpdateContext:
    scheme = Scheme(scheme)
    n = len(traj)
    if i0 >= n - 1:
        raise InsufficientHistory(f"trip {traj.trip_id}: no samples after index {i0}")
    windows = channel_windows(traj, i0, tw, scheme)
    steps = min(horizon_steps, n - 1 - i0)
    anchor = (
        float(traj.x_enu[i0]),
        float(traj.y_enu[i0]),
        float(traj.speed[i0]),
        float(traj.heading_unwrapped[i0]),
    )
    return UpdateContext(
        scheme,
        traj.trip_id,
        float(traj.t[i0]),
        windows,
        anchor,
        traj.x_enu[i0 + 1 : i0 + 1 + steps],
        traj.y_enu[i0 + 1 : i0 + 1 + steps],
    )


def forecast_path(scheme, ops, windows, anchor, steps, dt=DT):
    """Predicted (x, y) from channel operators ``ops`` and window values.

    Works for a single entry (2-D operators) or a stack (3-D). Forecasts are
    computed over the operators' full horizon and truncated to ``steps``, so a
    given entry yields bit-identical predictions regardless of how much of
    the trip remains.
    """
    scheme = Scheme(scheme)
    a = apply_operator(ops[0], windows[0])
    b = apply_operator(ops[1], windows[1])
    if scheme is Scheme.DIRECT:
        return a[..., :steps], b[..., :steps]
    x, y = integrate_position(a, b, anchor[0], anchor[1], dt, initial=(anchor[2], anchor[3]))
    return x[..., :steps], y[..., :steps]


def first_violation(pte, threshold):
    """Steps the model stays in use: index (1-based) of the first PTE > threshold,
    or the full length when none exceeds it."""
    over = pte > threshold
    if pte.ndim == 1:
        hit = np.flatnonzero(over)
        return (int(hit[0]) + 1, True) if hit.size else (len(pte), False)
    any_over = over.any(axis=1)
    steps = np.where(any_over, over.argmax(axis=1) + 1, pte.shape[1])
    return steps, any_over


# ---------------------------------------------------------------- selection


@dataclass
class SelectionConfig:
    threshold: float = DEFAULT_THRESHOLD
    tw: int = DEFAULT_TW
    horizon_cap_s: float = DEFAULT_HORIZON_S
    reuse_eval: str = "fixed_1s"
    dt: float = DT
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if not self.threshold > 0:
            raise ConfigError("threshold must be > 0")
        if self.tw < 3:
            raise ConfigError("tw must be >= 3")
        if self.reuse_eval not in REUSE_EVAL_MODES:
            raise ConfigError(f"reuse_eval must be one of {REUSE_EVAL_MODES}")
        if not self.horizon_cap_s >= self.dt:
            raise ConfigError("horizon_cap_s must cover at least one step")

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon_cap_s / self.dt))

    @property
    def screen_steps(self) -> int:
        return 1 if self.reuse_eval == "first_step" else int(round(1.0 / self.dt))


def _selection(source, entry_id, ctx, x, y, cfg):
    pte = compute_pte(x, y, ctx.truth_x, ctx.truth_y)
    steps, violated = first_violation(pte, cfg.threshold)
    times = ctx.t_0 + cfg.dt * np.arange(1, steps + 1)
    return ModelSelection(
        source,
        entry_id,
        ctx.trip_id,
        ctx.t_0,
        steps * cfg.dt,
        int(steps),
        np.column_stack([times, pte[:steps]]),
        bool(violated),
    )


def candidate_scores(bank: KernelBank, ctx: UpdateContext, cfg: SelectionConfig):
    """PTE screen metric and persistency (in steps) for every candidate.

    Returns ``(labels, screen, steps)`` where labels are entry ids and
    ``None`` for the constant-velocity model (listed first when hybrid).
    """
    horizon = cfg.horizon_steps
    labels, screens, persist = [], [], []
    n_screen = min(cfg.screen_steps, ctx.steps)
    if bank.hybrid:
        x, y = constant_velocity_path(ctx.anchor, ctx.steps, cfg.dt)
        pte = compute_pte(x, y, ctx.truth_x, ctx.truth_y)
        labels.append(None)
        screens.append(pte[:n_screen].max())
        persist.append(first_violation(pte, cfg.threshold)[0])
    if len(bank):
        ops = bank.stacked_operators(horizon, cfg.dt)
        x, y = forecast_path(bank.scheme, ops, ctx.windows, ctx.anchor, ctx.steps, cfg.dt)
        pte = compute_pte(x, y, ctx.truth_x[None, :], ctx.truth_y[None, :])
        labels.extend(range(len(bank)))
        screens.extend(pte[:, :n_screen].max(axis=1))
        persist.extend(first_violation(pte, cfg.threshold)[0])
    return labels, np.asarray(screens, dtype=float), np.asarray(persist, dtype=int)


def evaluate_candidate(bank, label, ctx, cfg, windows=None) -> ModelSelection:
    """Single-candidate evaluation; the authoritative path for a chosen model."""
    if label is None:
        x, y = constant_velocity_path(ctx.anchor, ctx.steps, cfg.dt)
        return _selection(Source.CV, None, ctx, x, y, cfg)
    ops = bank.operators(label, cfg.horizon_steps, cfg.dt)
    x, y = forecast_path(bank.scheme, ops, windows or ctx.windows, ctx.anchor, ctx.steps, cfg.dt)
    return _selection(Source.BANK, label, ctx, x, y, cfg)


def select_or_create(bank: KernelBank, ctx: UpdateContext, cfg: SelectionConfig, grow: bool = True):
    """Pick the model used from ``ctx.t_0`` on, fitting a new entry if needed.

    Candidates pass when their screen PTE (first step, or the first second
    with ``reuse_eval='fixed_1s'``) is below the threshold; among those the
    longest persistency wins, ties going to the constant-velocity model and
    then to the lowest entry id. Returns ``(selection, created)``.
    """
    if ctx.steps < 1:
        raise InsufficientHistory("no future samples to evaluate")
    labels, screen, persist = candidate_scores(bank, ctx, cfg)
    passing = np.flatnonzero(screen < cfg.threshold) if len(labels) else np.array([], dtype=int)
    created = False
    if passing.size:
        # first index of the maximum keeps CV (listed first) and low ids ahead on ties
        best = passing[np.argmax(persist[passing])]
        selection = evaluate_candidate(bank, labels[best], ctx, cfg)
    elif grow:
        fit_windows = ctx.fit_windows or ctx.windows
        tt = window_times(cfg.tw, cfg.dt)
        specs = tuple(fit_hyperparameters(TrainingWindow(tt, w), cfg.fit) for w in fit_windows)
        entry = bank.add(specs, (ctx.trip_id, ctx.t_0))
        selection = evaluate_candidate(bank, entry.id, ctx, cfg, windows=fit_windows)
        selection.source = Source.NEW
        created = True
    elif len(labels):
        best = int(np.argmin(screen))
        selection = evaluate_candidate(bank, labels[best], ctx, cfg)
    else:
        raise ConfigError("frozen bank has no candidates (empty and not hybrid)")
    if selection.entry_id is not None:
        entry = bank.entries[selection.entry_id]
        if not created:
            entry.use_count += 1
        entry.total_persistency_s += selection.persistency_s
    return selection, created


# ---------------------------------------------------------------- build loop


METRICS_HEADER = (
    "event_idx",
    "data_time_s",
    "trip_id",
    "source",
    "persistency_s",
    "bank_size",
    "update_count",
    "gen_ratio",
)


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    selections: list = field(default_factory=list)

    def record(self, data_time, selection, bank_size):
        update_count = len(self.rows) + 1
        self.rows.append(
            {
                "event_idx": len(self.rows),
                "data_time_s": float(data_time),
                "trip_id": selection.trip_id,
                "source": selection.label,
                "persistency_s": float(selection.persistency_s),
                "bank_size": int(bank_size),
                "update_count": update_count,
                "gen_ratio": bank_size / update_count,
            }
        )
        self.selections.append(selection)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in self.rows:
            writer.writerow([_fmt(row[k]) for k in METRICS_HEADER])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text) -> "RunMetrics":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ConfigError(f"unexpected metrics header {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append(
                {
                    "event_idx": int(rec["event_idx"]),
                    "data_time_s": float(rec["data_time_s"]),
                    "trip_id": rec["trip_id"],
                    "source": rec["source"],
                    "persistency_s": float(rec["persistency_s"]),
                    "bank_size": int(rec["bank_size"]),
                    "update_count": int(rec["update_count"]),
                    "gen_ratio": float(rec["gen_ratio"]),
                }
            )
        return cls(rows=rows)


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def first_update_index(tw):
    return tw


def build_bank(
    trips,
    scheme,
    hybrid=False,
    threshold=DEFAULT_THRESHOLD,
    tw=DEFAULT_TW,
    horizon_cap_s=DEFAULT_HORIZON_S,
    reuse_eval="fixed_1s",
    fit_config=None,
    bank=None,
    grow=True,
):
    """Run model generation over ``trips`` in order with one shared bank.

    Returns ``(bank, metrics)``. ``bank`` may be a pre-populated bank to
    continue from; with ``grow=False`` it is used frozen.
    """
    cfg = SelectionConfig(threshold, tw, horizon_cap_s, reuse_eval, fit=fit_config or FitConfig())
    if bank is None:
        bank = KernelBank(scheme, hybrid, threshold, tw)
    elif bank.scheme is not Scheme(scheme):
        raise ConfigError("initial bank scheme does not match")
    trips = list(trips)
    if not trips:
        raise ConfigError("build_bank needs at least one trip")
    metrics = RunMetrics()
    elapsed = 0.0
    for traj in trips:
        for selection, t_event in iter_trip_selections(bank, traj, cfg, grow):
            metrics.record(elapsed + (t_event - traj.t[0]), selection, len(bank))
        elapsed += traj.duration
    return bank, metrics


def iter_trip_selections(bank, traj, cfg, grow=True):
    """Yield ``(selection, t_0)`` for each model update along one trip."""
    i0 = first_update_index(cfg.tw)
    n = len(traj)
    while i0 < n - 1:
        ctx = make_context(traj, i0, bank.scheme, cfg.tw, cfg.horizon_steps)
        selection, _ = select_or_create(bank, ctx, cfg, grow=grow)
        yield selection, ctx.t_0
        i0 += selection.steps


def persistency_stats(metrics: RunMetrics, bins=None):
    """Mean model persistency (s) and a histogram over all selections."""
    values = metrics.column("persistency_s") if metrics.rows else np.array([])
    if values.size == 0:
        raise Empty("no model selections recorded")
    if bins is None:
        bins = np.arange(0.0, values.max() + 0.2, 0.1)
    counts, edges = np.histogram(values, bins=bins)
    return {"mean_s": float(values.mean()), "count": int(values.size), "histogram": (counts, edges)}


# ---------------------------------------------------------------- estimator


class KernelBankBuilder(BaseEstimator):
    """Estimator facade over :func:`build_bank`.

    ``fit(trips)`` runs model generation and stores ``bank_`` and
    ``metrics_``; ``transform(trips)`` replays trips against the fitted bank
    frozen and returns their selections.
    """

    def __init__(
        self,
        scheme="indirect",
        hybrid=True,
        threshold=DEFAULT_THRESHOLD,
        tw=DEFAULT_TW,
        horizon_cap_s=DEFAULT_HORIZON_S,
        reuse_eval="fixed_1s",
        n_restarts=4,
        max_iter=200,
        random_state=0,
    ):
        self.scheme = scheme
        self.hybrid = hybrid
        self.threshold = threshold
        self.tw = tw
        self.horizon_cap_s = horizon_cap_s
        self.reuse_eval = reuse_eval
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.random_state = random_state

    def _fit_config(self):
        return FitConfig(n_restarts=self.n_restarts, max_iter=self.max_iter, seed=self.random_state)

    def fit(self, X, y=None):
        self.bank_, self.metrics_ = build_bank(
            X,
            self.scheme,
            self.hybrid,
            self.threshold,
            self.tw,
            self.horizon_cap_s,
            self.reuse_eval,
            self._fit_config(),
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "bank_")
        bank = self.bank_.copy()
        _, metrics = build_bank(
            X,
            self.scheme,
            self.hybrid,
            self.threshold,
            self.tw,
            self.horizon_cap_s,
            self.reuse_eval,
            self._fit_config(),
            bank=bank,
            grow=False,
        )
        return metrics.selections

    def score(self, X, y=None):
        """Mean persistency (s) of the frozen bank on ``X``."""
        selections = self.transform(X)
        return float(np.mean([s.persistency_s for s in selections]))

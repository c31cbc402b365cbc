"""Exact Gaussian-process regression with a compound RBF + linear kernel.

The kernel is

    k(t, t') = rbf_variance * exp(-(t - t')**2 / (2 * rbf_lengthscale**2))
               + lin_variance * (t - lin_offset) * (t' - lin_offset)

and observations carry i.i.d. Gaussian noise of variance ``noise_variance``.

Windows are standardized (zero mean, unit std with a 1e-6 floor) and
re-based so their first timestamp is zero before fitting or prediction.
That makes a fitted :class:`KernelSpec` independent of where the window
sat in the trip and of the channel's units, so it can be reused on any
other window.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_times, check_times_values
from .exceptions import CholeskyFailure, FitDegenerate

__all__ = [
    "KernelSpec",
    "TrainingWindow",
    "Posterior",
    "FitConfig",
    "GPRegressor",
    "kernel_eval",
    "kernel_matrix",
    "gram_matrix",
    "cholesky_jitter",
    "posterior_predict",
    "log_marginal_likelihood",
    "lml_gradient",
    "fit_hyperparameters",
    "standardize",
    "stack_specs",
    "batch_posterior_mean",
]

STD_FLOOR = 1e-6
JITTER_START = 1e-10
JITTER_MAX = 1e-4
LOG2PI = math.log(2.0 * math.pi)

SPEC_FIELDS = ("rbf_variance", "rbf_lengthscale", "lin_variance", "lin_offset", "noise_variance")
# Optimized hyperparameters, in the order used by gradients and log-parameter vectors.
HYPER_FIELDS = ("rbf_variance", "rbf_lengthscale", "lin_variance", "noise_variance")


@dataclass(frozen=True)
class KernelSpec:
    """Hyperparameters of one compound kernel plus its noise variance."""

    rbf_variance: float
    rbf_lengthscale: float
    lin_variance: float
    lin_offset: float
    noise_variance: float

    def __post_init__(self):
        for name in SPEC_FIELDS:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        for name in HYPER_FIELDS:
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)!r}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in SPEC_FIELDS])

    @classmethod
    def from_array(cls, arr) -> "KernelSpec":
        return cls(*(float(v) for v in arr))

    def to_dict(self) -> dict:
        # repr() of a float is the shortest string that round-trips exactly
        return {name: float(getattr(self, name)) for name in SPEC_FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "KernelSpec":
        return cls(**{name: float(data[name]) for name in SPEC_FIELDS})


@dataclass(frozen=True)
class TrainingWindow:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times, values = check_times_values(self.times, self.values)
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.shape[0]


@dataclass(frozen=True)
class Posterior:
    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class FitConfig:
    """Multi-start bounded optimizer settings for :func:`fit_hyperparameters`."""

    n_restarts: int = 4
    max_iter: int = 200
    variance_bounds: tuple = (1e-6, 1e3)
    lengthscale_bounds: tuple = (0.05, 100.0)
    noise_bounds: tuple = (1e-6, 1.0)
    seed: int = 0
    initial: dict = field(
        default_factory=lambda: {
            "rbf_variance": 1.0,
            "rbf_lengthscale": 1.0,
            "lin_variance": 1.0,
            "noise_variance": 1e-2,
        }
    )

    def log_bounds(self) -> np.ndarray:
        lo_hi = [self.variance_bounds, self.lengthscale_bounds, self.variance_bounds, self.noise_bounds]
        return np.log(np.array(lo_hi, dtype=float))

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("variance_bounds", "lengthscale_bounds", "noise_bounds"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        data = dict(data)
        for key in ("variance_bounds", "lengthscale_bounds", "noise_bounds"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


# ---------------------------------------------------------------- kernels


def kernel_eval(spec: KernelSpec, t1: float, t2: float) -> float:
    lag = t1 - t2
    rbf = spec.rbf_variance * math.exp(-(lag * lag) / (2.0 * spec.rbf_lengthscale**2))
    lin = spec.lin_variance * ((t1 - spec.lin_offset) * (t2 - spec.lin_offset))
    return rbf + lin


def kernel_matrix(spec: KernelSpec, t1, t2) -> np.ndarray:
    """Cross-covariance matrix ``K[i, j] = k(t1[i], t2[j])`` (no noise)."""
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    lag = t1[:, None] - t2[None, :]
    rbf = spec.rbf_variance * np.exp(-(lag * lag) / (2.0 * spec.rbf_lengthscale**2))
    lin = spec.lin_variance * np.outer(t1 - spec.lin_offset, t2 - spec.lin_offset)
    return rbf + lin


def gram_matrix(spec: KernelSpec, times, with_noise: bool = True) -> np.ndarray:
    times = check_times(times, strictly_increasing=False)
    K = kernel_matrix(spec, times, times)
    if with_noise:
        K[np.diag_indices_from(K)] += spec.noise_variance
    return K


def cholesky_jitter(K: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``K``, escalating diagonal jitter on failure.

    Jitter starts at 1e-10 and grows tenfold up to 1e-4.
    """
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise CholeskyFailure(f"covariance not positive definite after jitter {JITTER_MAX:g}")


def _cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = solve_triangular(L, b, lower=True, check_finite=False)
    return solve_triangular(L.T, z, lower=False, check_finite=False)


# ---------------------------------------------------------------- inference


def standardize(values) -> tuple[np.ndarray, float, float]:
    """Return ``(z, mean, std)`` with ``z = (values - mean) / std``; std floored at 1e-6."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    std = max(float(values.std()), STD_FLOOR)
    return (values - mean) / std, mean, std


def posterior_predict(
    spec: KernelSpec,
    train: TrainingWindow,
    query_times,
    standardize_window: bool = True,
) -> Posterior:
    """Condition on ``train`` and return the latent posterior at ``query_times``.

    With ``standardize_window`` (the default) the window is re-based to start
    at t=0 and standardized; mean and variance are mapped back to the
    original units.
    """
    query = check_times(query_times, strictly_increasing=False)
    t_train = train.times
    if standardize_window:
        origin = t_train[0]
        t_train = t_train - origin
        query = query - origin
        y, mean, scale = standardize(train.values)
    else:
        y, mean, scale = train.values, 0.0, 1.0

    L = cholesky_jitter(gram_matrix(spec, t_train, with_noise=True))
    alpha = _cho_solve(L, y)
    K_star = kernel_matrix(spec, t_train, query)
    mu = K_star.T @ alpha
    v = solve_triangular(L, K_star, lower=True, check_finite=False)
    prior_var = spec.rbf_variance + spec.lin_variance * (query - spec.lin_offset) ** 2
    var = np.maximum(prior_var - np.sum(v * v, axis=0), 0.0)
    return Posterior(mean=mu * scale + mean, variance=var * scale * scale)


def log_marginal_likelihood(spec: KernelSpec, train: TrainingWindow) -> float:
    """Log evidence of ``train.values`` at ``train.times`` exactly as given.

    No standardization or time re-basing is applied here; callers that want
    the window-normalized objective transform the window first.
    """
    L = cholesky_jitter(gram_matrix(spec, train.times, with_noise=True))
    y = train.values
    alpha = _cho_solve(L, y)
    n = y.shape[0]
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG2PI)


def _lml_terms(log_params: np.ndarray, t: np.ndarray, y: np.ndarray, lin_offset: float):
    """LML and its gradient with respect to the log hyperparameters."""
    rbf_var, ls, lin_var, noise = np.exp(log_params)
    lag2 = (t[:, None] - t[None, :]) ** 2
    k_rbf = rbf_var * np.exp(-lag2 / (2.0 * ls * ls))
    centered = t - lin_offset
    k_lin = lin_var * np.outer(centered, centered)
    n = t.shape[0]
    K = k_rbf + k_lin
    K[np.diag_indices(n)] += noise
    L = cholesky_jitter(K)
    alpha = _cho_solve(L, y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG2PI
    K_inv = _cho_solve(L, np.eye(n))
    W = np.outer(alpha, alpha) - K_inv
    grad = 0.5 * np.array(
        [
            np.sum(W * k_rbf),
            np.sum(W * (k_rbf * lag2 / (ls * ls))),
            np.sum(W * k_lin),
            noise * np.trace(W),
        ]
    )
    return float(lml), grad


def lml_gradient(spec: KernelSpec, train: TrainingWindow) -> np.ndarray:
    """Gradient of :func:`log_marginal_likelihood` w.r.t. log of
    (rbf_variance, rbf_lengthscale, lin_variance, noise_variance)."""
    log_params = np.log([getattr(spec, name) for name in HYPER_FIELDS])
    return _lml_terms(log_params, train.times, train.values, spec.lin_offset)[1]


def _normalized_window(train: TrainingWindow) -> TrainingWindow:
    y, _, _ = standardize(train.values)
    return TrainingWindow(train.times - train.times[0], y)


def fit_hyperparameters(train: TrainingWindow, config: FitConfig | None = None) -> KernelSpec:
    """Maximize the standardized-window log marginal likelihood.

    Runs L-BFGS-B on log-parameters from ``config.n_restarts`` starting points
    (the configured initial guess plus uniform draws in the log-box). The
    linear offset is pinned to the window start. Start points are a pure
    function of ``config.seed`` so equal windows always yield equal specs.
    """
    config = config or FitConfig()
    norm = _normalized_window(train)
    t, y = norm.times, norm.values
    bounds = config.log_bounds()

    init0 = np.log([config.initial[name] for name in HYPER_FIELDS])
    init0 = np.clip(init0, bounds[:, 0], bounds[:, 1])
    rng = np.random.default_rng(config.seed)
    starts = [init0]
    for _ in range(max(config.n_restarts, 1) - 1):
        starts.append(rng.uniform(bounds[:, 0], bounds[:, 1]))

    def objective(theta):
        try:
            lml, grad = _lml_terms(theta, t, y, 0.0)
        except CholeskyFailure:
            return 1e25, np.zeros_like(theta)
        return -lml, -grad

    best_theta, best_val = None, np.inf
    for x0 in starts:
        candidates = [x0]
        try:
            res = minimize(
                objective,
                x0,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": config.max_iter, "gtol": 1e-9, "ftol": 1e-12},
            )
            candidates.append(np.clip(res.x, bounds[:, 0], bounds[:, 1]))
        except (ValueError, FloatingPointError):
            pass
        for theta in candidates:
            val, _ = objective(theta)
            if val < best_val:
                best_theta, best_val = theta, val
    if best_theta is None or best_val >= 1e25:
        raise FitDegenerate("every restart failed to factorize the covariance")
    lin_bounds = np.array(
        [config.variance_bounds, config.lengthscale_bounds, config.variance_bounds, config.noise_bounds], dtype=float
    )
    rbf_var, ls, lin_var, noise = np.clip(np.exp(best_theta), lin_bounds[:, 0], lin_bounds[:, 1])
    return KernelSpec(rbf_var, ls, lin_var, 0.0, noise)


# ---------------------------------------------------------------- batched


def stack_specs(specs) -> np.ndarray:
    """Stack specs into an (E, 5) parameter array in :data:`SPEC_FIELDS` order."""
    if not specs:
        return np.empty((0, len(SPEC_FIELDS)))
    return np.array([s.as_array() for s in specs])


def batch_posterior_mean(params: np.ndarray, train_times, train_values, query_times) -> np.ndarray:
    """Posterior means for many specs conditioned on one window.

    ``params`` is an (E, 5) array from :func:`stack_specs`. Returns an (E, Q)
    array in the window's original units. Standardization and re-basing
    match :func:`posterior_predict`.
    """
    t = np.asarray(train_times, dtype=float)
    origin = t[0]
    t = t - origin
    q = np.asarray(query_times, dtype=float) - origin
    y, mean, scale = standardize(train_values)
    E = params.shape[0]
    if E == 0:
        return np.empty((0, q.shape[0]))
    rbf_var, ls, lin_var, offset, noise = (params[:, i][:, None, None] for i in range(5))

    def cov(a, b):
        lag = a[:, None] - b[None, :]
        rbf = rbf_var * np.exp(-(lag * lag)[None] / (2.0 * ls * ls))
        lin = lin_var * ((a[None, :, None] - offset) * (b[None, None, :] - offset))
        return rbf + lin

    K = cov(t, t)
    n = t.shape[0]
    K[:, np.arange(n), np.arange(n)] += noise[:, :, 0]
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        L = np.stack([cholesky_jitter(Ki) for Ki in K])
    # alpha = K^-1 y for every spec; tiny systems so solve via the factor
    z = np.linalg.solve(L, np.broadcast_to(y, (E, n))[..., None])
    alpha = np.linalg.solve(np.swapaxes(L, 1, 2), z)[..., 0]
    K_star = cov(t, q)
    mu = np.einsum("en,enq->eq", alpha, K_star)
    return mu * scale + mean


# ---------------------------------------------------------------- estimator


class GPRegressor(BaseEstimator, RegressorMixin):
    """Scikit-learn style wrapper around one standardized GP window.

    Parameters
    ----------
    kernel_spec : KernelSpec or None
        Fixed hyperparameters. When None, they are fitted by maximizing the
        log marginal likelihood.
    n_restarts, max_iter, random_state
        Forwarded to :class:`FitConfig`.
    """

    def __init__(self, kernel_spec=None, n_restarts=4, max_iter=200, random_state=0):
        self.kernel_spec = kernel_spec
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        times, values = check_times_values(_as_times(X), y)
        self.window_ = TrainingWindow(times, values)
        if self.kernel_spec is None:
            cfg = FitConfig(n_restarts=self.n_restarts, max_iter=self.max_iter, seed=self.random_state)
            self.kernel_spec_ = fit_hyperparameters(self.window_, cfg)
        else:
            self.kernel_spec_ = self.kernel_spec
        self.n_features_in_ = 1
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "kernel_spec_")
        post = posterior_predict(self.kernel_spec_, self.window_, _as_times(X))
        if return_std:
            return post.mean, np.sqrt(post.variance)
        return post.mean

    def log_marginal_likelihood(self):
        check_is_fitted(self, "kernel_spec_")
        return log_marginal_likelihood(self.kernel_spec_, _normalized_window(self.window_))


def _as_times(X) -> np.ndarray:
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValueError(f"expected a single time column, got shape {arr.shape}")
        arr = arr[:, 0]
    return arr

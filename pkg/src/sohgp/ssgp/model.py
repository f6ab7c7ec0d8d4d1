"""Battery-specific resistance model: WV aging state plus a static SE operating-point field.

The observation equation is

    V_t - V0(c_t) = I_t * (r(t) + f(u_t)) + e_t,

with r a Wiener-velocity process anchored at zero at beginning of life and f a
squared-exponential field over normalised operating points u = (I, T, c),
represented by its values at a k-means inducing set.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from . import kalman
from .inducing import InducingSet, choose_inducing_points
from .kernels import se_kernel

HP_NAMES = ("sigma_wv", "sigma_se", "l_I", "l_T", "l_c")
HALF_NORMAL_SCALE = 0.2
INVGAMMA_ALPHA = 1.0
INVGAMMA_BETA = 2.0


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    sigma_wv: float
    sigma_se: float
    l_I: float
    l_T: float
    l_c: float

    def __post_init__(self):
        if not all(v > 0 for v in self.as_array()):
            raise ValueError(f"hyperparameters must be strictly positive, got {self}")

    @property
    def lengths(self):
        return np.array([self.l_I, self.l_T, self.l_c])

    def as_array(self):
        return np.array([self.sigma_wv, self.sigma_se, self.l_I, self.l_T, self.l_c], dtype=float)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))


def log_half_normal(x, s):
    return 0.5 * math.log(2.0 / math.pi) - math.log(s) - x * x / (2.0 * s * s)


def log_inv_gamma(x, alpha=INVGAMMA_ALPHA, beta=INVGAMMA_BETA):
    return alpha * math.log(beta) - math.lgamma(alpha) - (alpha + 1.0) * math.log(x) - beta / x


def log_prior(hp):
    """Half-normal (chi, k=1) priors on the magnitudes, inverse-gamma on the length scales."""
    out = log_half_normal(hp.sigma_wv, HALF_NORMAL_SCALE) + log_half_normal(hp.sigma_se, HALF_NORMAL_SCALE)
    for l in hp.lengths:
        out += log_inv_gamma(l)
    return out


@dataclass
class BatteryData:
    """Conditioned observations of one battery, ready for fitting.

    ``t`` is normalised time since beginning of life, ``op`` the normalised
    (I, T, c) operating points, ``current`` the raw current in amperes and
    ``y`` the overpotential V - V0(c).
    """

    battery_id: str
    t: np.ndarray
    current: np.ndarray
    op: np.ndarray
    y: np.ndarray
    noise_var: np.ndarray
    segment: np.ndarray
    t_end: float

    def __len__(self):
        return self.t.shape[0]

    def thinned(self, stride):
        if stride <= 1:
            return self
        keep = np.zeros(len(self), dtype=bool)
        for s in np.unique(self.segment):
            idx = np.flatnonzero(self.segment == s)
            keep[idx[::stride]] = True
            keep[idx[-1]] = True
        return BatteryData(self.battery_id, self.t[keep], self.current[keep], self.op[keep],
                           self.y[keep], self.noise_var[keep], self.segment[keep], self.t_end)


@dataclass
class StateSpaceModel:
    """Discrete-time view of the additive GP prior for a fixed inducing set."""

    hp: Hyperparameters
    inducing: np.ndarray
    Kuu: np.ndarray
    chol: np.ndarray

    @property
    def n_static(self):
        return self.inducing.shape[0]

    @property
    def dim(self):
        return 2 + self.n_static

    @property
    def q(self):
        return self.hp.sigma_wv**2

    def prior(self):
        m0 = np.zeros(self.dim)
        P0 = np.zeros((self.dim, self.dim))
        P0[2:, 2:] = self.Kuu
        return m0, P0

    def interpolation(self, op):
        """Weights ``k(u, U) K(U,U)^-1`` and residual conditional variance at rows of ``op``."""
        Kxu = se_kernel(op, self.inducing, self.hp.sigma_se, self.hp.lengths)
        W = cho_solve((self.chol, True), Kxu.T).T
        resid = self.hp.sigma_se**2 - np.einsum("ij,ij->i", W, Kxu)
        return W, np.maximum(resid, 0.0)

    def observation(self, data):
        """Observation rows H (n, dim) and total noise variance r (n,)."""
        W, resid = self.interpolation(data.op)
        I = data.current
        H = np.zeros((len(data), self.dim))
        H[:, 0] = I
        H[:, 2:] = I[:, None] * W
        return H, data.noise_var + I * I * resid


def build_state_space(hp, inducing, jitter=1e-8):
    U = inducing.points if isinstance(inducing, InducingSet) else np.asarray(inducing, dtype=float)
    Kuu = se_kernel(U, U, hp.sigma_se, hp.lengths) + jitter * np.eye(U.shape[0])
    try:
        L = cholesky(Kuu, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("inducing-point covariance not positive definite") from exc
    return StateSpaceModel(hp, U, Kuu, L)


def time_steps(t):
    t = np.asarray(t, dtype=float)
    if t.shape[0] == 0:
        return t.copy()
    dt = np.diff(t, prepend=0.0)
    if np.any(dt < 0):
        raise ValueError("observation times must be non-decreasing and non-negative")
    return dt


def loglik_full(model, data):
    """Log-likelihood from the full-state Kalman filter."""
    H, r = model.observation(data)
    m0, P0 = model.prior()
    ll, bad = kalman.filter_loglik(time_steps(data.t), H, data.y, r, model.q, True, m0, P0)
    if bad >= 0:
        raise NumericalError(f"non-finite innovation variance at step {bad}")
    return ll


def whitened_rows(model, op):
    """Static-state rows in whitened coordinates: ``A = k(u, U) L^-T`` with ``K(U,U) = L L^T``.

    Also returns the residual conditional variance ``sigma^2 - |A|^2`` per row.
    """
    Kxu = se_kernel(op, model.inducing, model.hp.sigma_se, model.hp.lengths)
    return _whiten(model, Kxu)


def _whiten(model, Kxu):
    Linv = solve_triangular(model.chol, np.eye(model.n_static), lower=True)
    A = Kxu @ Linv.T
    resid = model.hp.sigma_se**2 - np.einsum("ij,ij->i", A, A)
    return A, np.maximum(resid, 0.0)


def loglik_augmented(model, data, A=None, resid=None):
    """Log-likelihood with the static states marginalised in closed form.

    Runs a two-state WV filter carrying the (whitened) static states as
    regression effects; equal to :func:`loglik_full` up to rounding.
    """
    if len(data) == 0:
        return 0.0
    if A is None:
        A, resid = whitened_rows(model, data.op)
    I = data.current
    G = I[:, None] * A
    Hw = np.zeros((len(data), 2))
    Hw[:, 0] = I
    r = data.noise_var + I * I * resid
    e, F, X = kalman.augmented_pass(time_steps(data.t), Hw, G, data.y, r, model.q)
    if not np.all(F > 0) or not np.all(np.isfinite(F)):
        bad = int(np.flatnonzero(~(F > 0) | ~np.isfinite(F))[0])
        raise NumericalError(f"non-finite innovation variance at step {bad}")
    Xs = X / F[:, None]
    # whitened static states have identity prior covariance
    C = np.eye(X.shape[1]) + Xs.T @ X
    beta = Xs.T @ e
    try:
        cf = cho_factor(C, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("collapsed static-state information matrix is singular") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    quad = beta @ cho_solve(cf, beta)
    return (-0.5 * np.sum(np.log(2.0 * np.pi * F) + e * e / F)
            + 0.5 * quad - 0.5 * logdet)


class Energy:
    """Negative unnormalised log posterior of the hyperparameters for one battery."""

    def __init__(self, data, inducing, jitter=1e-8):
        self.data = data
        self.inducing = inducing
        self.jitter = jitter
        self._cache_key = None
        self._cache = None
        self.evaluations = 0
        U = self.inducing_points
        # squared distances per input dimension, fixed for the fit
        self._sq = np.stack([(data.op[:, None, d] - U[None, :, d]) ** 2
                             for d in range(U.shape[1])]) if len(data) else None

    def _se_terms(self, hp):
        key = (hp.sigma_se, hp.l_I, hp.l_T, hp.l_c)
        if key != self._cache_key:
            model = build_state_space(hp, self.inducing, self.jitter)
            A = resid = None
            if self._sq is not None:
                z = np.einsum("dnm,d->nm", self._sq, 1.0 / hp.lengths**2)
                Kxu = hp.sigma_se**2 * np.exp(-0.5 * z)
                A, resid = _whiten(model, Kxu)
            self._cache_key = key
            self._cache = (model, A, resid)
        return self._cache

    def __call__(self, hp):
        if not isinstance(hp, Hyperparameters):
            hp = Hyperparameters.from_array(hp)
        self.evaluations += 1
        lp = log_prior(hp)
        if len(self.data) == 0:
            return -lp
        se_model, A, resid = self._se_terms(hp)
        model = StateSpaceModel(hp, se_model.inducing, se_model.Kuu, se_model.chol)
        return -loglik_augmented(model, self.data, A, resid) - lp

    @property
    def inducing_points(self):
        ind = self.inducing
        return ind.points if isinstance(ind, InducingSet) else np.asarray(ind)

    def log_space(self, theta):
        return self(np.exp(theta))

    def gradient_fd(self, theta, step=1e-4):
        """Central finite-difference gradient in log-hyperparameter space."""
        theta = np.asarray(theta, dtype=float)
        g = np.empty_like(theta)
        for i in range(theta.shape[0]):
            tp = theta.copy()
            tm = theta.copy()
            tp[i] += step
            tm[i] -= step
            g[i] = (self.log_space(tp) - self.log_space(tm)) / (2.0 * step)
        return g


def energy(hp, data, inducing, jitter=1e-8):
    if not isinstance(hp, Hyperparameters):
        hp = Hyperparameters.from_array(hp)
    return Energy(data, inducing, jitter)(hp)


@dataclass
class HealthModel:
    """Fitted per-battery model summarised at segment knots (last step of each segment)."""

    battery_id: str
    hp: Hyperparameters
    inducing: np.ndarray
    inducing_fallback: bool
    energy: float
    energy_initial: float
    converged: bool
    n_obs: int
    t_end: float
    knot_t: np.ndarray
    knot_segment: np.ndarray
    smooth_mean: np.ndarray
    smooth_var: np.ndarray
    smooth_wv_rows: np.ndarray
    static_cov: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    op_min: np.ndarray
    op_max: np.ndarray
    bol_op: np.ndarray
    bol_knot: int
    jitter: float = 1e-8
    _ss: object = field(default=None, init=False, repr=False, compare=False)

    @property
    def state_space(self):
        if self._ss is None:
            self._ss = build_state_space(self.hp, self.inducing, self.jitter)
        return self._ss

    def calibration_weights(self, point):
        W, resid = self.state_space.interpolation(np.atleast_2d(point))
        return W[0], float(resid[0])

    def to_dict(self):
        return {
            "battery_id": self.battery_id,
            "hyperparameters": dict(zip(HP_NAMES, self.hp.as_array().tolist())),
            "inducing_points": self.inducing.tolist(),
            "inducing_fallback": self.inducing_fallback,
            "energy": self.energy,
            "energy_initial": self.energy_initial,
            "converged": self.converged,
            "n_obs": self.n_obs,
            "t_end": self.t_end,
            "knot_t": self.knot_t.tolist(),
            "knot_segment": self.knot_segment.tolist(),
            "smoothed_mean": self.smooth_mean.tolist(),
            "smoothed_variance": self.smooth_var.tolist(),
            "smoothed_wv_rows": self.smooth_wv_rows.tolist(),
            "static_covariance": self.static_cov.tolist(),
            "filtered_mean": self.filt_mean.tolist(),
            "filtered_covariance": self.filt_cov.tolist(),
            "op_min": self.op_min.tolist(),
            "op_max": self.op_max.tolist(),
            "bol_op": self.bol_op.tolist(),
            "bol_knot": self.bol_knot,
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, d):
        a = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        hp = Hyperparameters(**d["hyperparameters"])
        return cls(d["battery_id"], hp, a("inducing_points"), d["inducing_fallback"], d["energy"],
                   d["energy_initial"], d["converged"], d["n_obs"], d["t_end"], a("knot_t"),
                   np.asarray(d["knot_segment"], dtype=int), a("smoothed_mean"),
                   a("smoothed_variance"), a("smoothed_wv_rows"), a("static_covariance"),
                   a("filtered_mean"), a("filtered_covariance"), a("op_min"), a("op_max"),
                   a("bol_op"), int(d["bol_knot"]), d.get("jitter", 1e-8))


def smooth(model, data):
    """Full-state filter + RTS pass. Returns the filtered and smoothed moments."""
    H, r = model.observation(data)
    m0, P0 = model.prior()
    dt = time_steps(data.t)
    ll, bad, mf, Pf = kalman.filter_store(dt, H, data.y, r, model.q, True, m0, P0)
    if bad >= 0:
        raise NumericalError(f"non-finite innovation variance at step {bad}")
    ms, vs, rows, bad = kalman.rts_smooth(dt, mf, Pf, model.q, True)
    if bad >= 0:
        raise NumericalError(f"smoother gain not finite at step {bad}")
    return ll, mf, Pf, ms, vs, rows


def fit_map(data, cfg=None, inducing=None):
    """MAP hyperparameters and smoothed state summaries for one battery."""
    from ..config import FitConfig

    cfg = cfg or FitConfig()
    if len(data) == 0:
        raise ValueError(f"battery {data.battery_id}: no qualifying observations")
    fit_data = data.thinned(cfg.stride)
    if inducing is None:
        inducing = choose_inducing_points(fit_data.op, cfg.n_inducing, cfg.kmeans_seed,
                                          cfg.kmeans_max_iter)
    E = Energy(fit_data, inducing, cfg.jitter)
    theta0 = np.log(np.asarray(cfg.initial, dtype=float))
    bounds = [(math.log(cfg.lower_bound), math.log(cfg.upper_bound))] * 5
    e0 = E.log_space(theta0)

    def fun(theta):
        return E.log_space(theta), E.gradient_fd(theta, cfg.fd_step)

    res = minimize(fun, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": cfg.maxiter})
    theta, e_best = res.x, float(res.fun)
    if not e_best <= e0:
        theta, e_best = theta0, e0
    converged = bool(res.success)
    if not converged:
        warnings.warn(f"battery {data.battery_id}: MAP optimiser stopped early ({res.message})")
    hp = Hyperparameters.from_array(np.exp(theta))
    return summarise(data, hp, inducing, e_best, e0, converged, cfg.jitter)


def summarise(data, hp, inducing, e_best=float("nan"), e0=float("nan"), converged=True,
              jitter=1e-8, bol_segments=10):
    """Run the smoother at fixed hyperparameters and collect the knot summaries."""
    if not isinstance(inducing, InducingSet):
        inducing = InducingSet(np.asarray(inducing, dtype=float))
    model = build_state_space(hp, inducing, jitter)
    _, mf, Pf, ms, vs, rows = smooth(model, data)
    seg = data.segment
    last = np.flatnonzero(np.append(seg[1:] != seg[:-1], True))
    firsts = np.flatnonzero(np.insert(seg[1:] != seg[:-1], 0, True))
    n_bol = min(bol_segments, len(firsts))
    bol_stop = last[n_bol - 1] + 1
    return HealthModel(
        battery_id=data.battery_id, hp=hp, inducing=inducing.points,
        inducing_fallback=inducing.fallback, energy=e_best, energy_initial=e0,
        converged=converged, n_obs=len(data), t_end=float(data.t_end),
        knot_t=data.t[last].copy(), knot_segment=seg[last].copy(),
        smooth_mean=ms[last].copy(), smooth_var=vs[last].copy(), smooth_wv_rows=rows[last].copy(),
        static_cov=Pf[-1][2:, 2:].copy(), filt_mean=mf[last].copy(), filt_cov=Pf[last].copy(),
        op_min=data.op.min(0), op_max=data.op.max(0), bol_op=data.op[:bol_stop].mean(0),
        bol_knot=n_bol - 1, jitter=jitter)

"""Population GP over beginning-of-life operating points and calibrated health trajectories."""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .soc import TIME_SCALE
from .ssgp.kernels import se_kernel
from .ssgp.model import NumericalError, log_half_normal, log_inv_gamma

# column order of normalised operating points everywhere in the package
OP_COLUMNS = ("I", "T", "c")
SECONDS_PER_DAY = 86400.0
POP_PARAM_NAMES = ("sigma_f", "sigma_n", "l_I", "l_T", "l_c")


def days_to_model_time(days, time_scale=TIME_SCALE):
    return np.asarray(days, dtype=float) * SECONDS_PER_DAY / time_scale


def model_time_to_days(t, time_scale=TIME_SCALE):
    return np.asarray(t, dtype=float) * time_scale / SECONDS_PER_DAY


def calibration_point():
    """Population mean operating point, i.e. the origin in normalised coordinates."""
    return np.zeros(len(OP_COLUMNS))


def _r0_moments(model, k, weights, resid):
    """Mean and variance of r(t_k) + f(u) from the smoothed knot summaries."""
    a = weights
    mean = model.smooth_mean[k, 0] + a @ model.smooth_mean[k, 2:]
    row = model.smooth_wv_rows[k, 0]
    var = row[0] + 2.0 * a @ row[2:] + a @ model.static_cov @ a + resid
    return float(mean), float(max(var, 0.0))


def battery_summary(model):
    """(beginning-of-life operating point, R0 mean, R0 variance) for the population GP."""
    w, resid = model.calibration_weights(model.bol_op)
    m, v = _r0_moments(model, model.bol_knot, w, resid)
    return model.bol_op.copy(), m, v


@dataclass
class PopulationGP:
    X: np.ndarray
    y: np.ndarray
    var_r: np.ndarray
    sigma_f: float
    sigma_n: float
    lengths: np.ndarray
    energy: float = float("nan")
    converged: bool = True
    battery_ids: tuple = ()
    _factor: object = field(default=None, init=False, repr=False, compare=False)

    def _noise(self):
        return self.sigma_n**2 + self.var_r

    def factor(self):
        if self._factor is None:
            K = se_kernel(self.X, self.X, self.sigma_f, self.lengths)
            K[np.diag_indices_from(K)] += self._noise()
            try:
                cf = cho_factor(K, lower=True)
            except np.linalg.LinAlgError:
                K[np.diag_indices_from(K)] += 1e-10 * self.sigma_f**2
                try:
                    cf = cho_factor(K, lower=True)
                except np.linalg.LinAlgError as exc:
                    raise NumericalError("population covariance singular after jitter") from exc
            self._factor = (cf, cho_solve(cf, self.y))
        return self._factor

    def predict(self, xs):
        """Posterior mean and latent variance at rows of ``xs`` (normalised)."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        cf, alpha = self.factor()
        Ks = se_kernel(xs, self.X, self.sigma_f, self.lengths)
        mean = Ks @ alpha
        v = cho_solve(cf, Ks.T)
        var = self.sigma_f**2 - np.einsum("ij,ji->i", Ks, v)
        return mean, np.maximum(var, 0.0)

    def to_dict(self):
        return {"battery_ids": list(self.battery_ids), "X": self.X.tolist(), "y": self.y.tolist(),
                "var_r": self.var_r.tolist(),
                "hyperparameters": dict(zip(POP_PARAM_NAMES, [self.sigma_f, self.sigma_n,
                                                              *self.lengths.tolist()])),
                "energy": self.energy, "converged": self.converged}

    @classmethod
    def from_dict(cls, d):
        hp = d["hyperparameters"]
        return cls(np.asarray(d["X"], float), np.asarray(d["y"], float),
                   np.asarray(d["var_r"], float), hp["sigma_f"], hp["sigma_n"],
                   np.array([hp["l_I"], hp["l_T"], hp["l_c"]]), d["energy"], d["converged"],
                   tuple(d["battery_ids"]))


def population_log_prior(sigma_f, sigma_n, lengths):
    return (log_half_normal(sigma_n, 0.1) + log_half_normal(sigma_f, 0.2)
            + sum(log_inv_gamma(l) for l in lengths))


def population_energy(theta, X, y, var_r):
    """Negative log posterior and its gradient with respect to log-parameters."""
    sf, sn, *ls = np.exp(theta)
    ls = np.asarray(ls)
    n = X.shape[0]
    K0 = se_kernel(X, X, sf, ls)
    K = K0.copy()
    K[np.diag_indices(n)] += sn**2 + var_r
    try:
        cf = cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        return np.inf, np.zeros_like(theta)
    alpha = cho_solve(cf, y)
    Kinv = cho_solve(cf, np.eye(n))
    nll = 0.5 * y @ alpha + np.sum(np.log(np.diag(cf[0]))) + 0.5 * n * math.log(2 * math.pi)
    inner = np.outer(alpha, alpha) - Kinv
    grads = [2.0 * K0]
    grads.append(2.0 * sn**2 * np.eye(n))
    for d in range(X.shape[1]):
        diff = (X[:, None, d] - X[None, :, d]) ** 2 / ls[d] ** 2
        grads.append(K0 * diff)
    # prior gradients w.r.t. log x (the MAP point is that of the prior on x itself)
    g_prior = np.empty(len(theta))
    g_prior[0] = -sf**2 / 0.2**2
    g_prior[1] = -sn**2 / 0.1**2
    for d in range(len(ls)):
        g_prior[2 + d] = -2.0 + 2.0 / ls[d]
    g = np.array([-0.5 * np.sum(inner * dK) for dK in grads]) - g_prior
    return nll - population_log_prior(sf, sn, ls), g


def fit_population_gp(X, y, var_r, battery_ids=(), initial=(0.2, 0.1, 1.0, 1.0, 1.0),
                      bounds=(1e-3, 1e3), maxiter=200):
    """MAP batch GP over per-battery beginning-of-life R0 estimates."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    var_r = np.asarray(var_r, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("population GP needs at least two batteries")
    if np.any(var_r < 0):
        raise ValueError("per-battery variances must be non-negative")
    theta0 = np.log(np.asarray(initial, dtype=float))
    lb = [(math.log(bounds[0]), math.log(bounds[1]))] * len(theta0)
    res = minimize(population_energy, theta0, args=(X, y, var_r), jac=True, method="L-BFGS-B",
                   bounds=lb, options={"maxiter": maxiter})
    sf, sn, *ls = np.exp(res.x)
    gp = PopulationGP(X, y, var_r, float(sf), float(sn), np.asarray(ls), float(res.fun),
                      bool(res.success), tuple(battery_ids))
    gp.factor()
    return gp


def fit_population(models, **kwargs):
    rows = [battery_summary(m) for m in models]
    X = np.array([r[0] for r in rows])
    return fit_population_gp(X, [r[1] for r in rows], [r[2] for r in rows],
                             battery_ids=[m.battery_id for m in models], **kwargs)


def population_slices(gp, moments, n_points=41):
    """One-dimensional population curves between the 5th and 95th percentile of each input.

    Returns ``{name: {"raw": grid, "normalised": grid, "mean": .., "sd": ..}}`` with
    the other inputs held at the population mean.
    """
    out = {}
    for j, name in enumerate(OP_COLUMNS):
        raw = np.linspace(moments.p05[name], moments.p95[name], n_points)
        z = (raw - moments.mean[name]) / moments.std[name]
        xs = np.zeros((n_points, len(OP_COLUMNS)))
        xs[:, j] = z
        mean, var = gp.predict(xs)
        out[name] = {"raw": raw, "normalised": z, "mean": mean, "sd": np.sqrt(var)}
    return out


def write_slices_csv(path, slices):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["input", "value", "normalised", "mean", "lower_2sd", "upper_2sd"])
        for name, s in slices.items():
            for r, z, m, sd in zip(s["raw"], s["normalised"], s["mean"], s["sd"]):
                w.writerow([name, f"{r:.6g}", f"{z:.6g}", f"{m:.6g}", f"{m - 2 * sd:.6g}",
                            f"{m + 2 * sd:.6g}"])


@dataclass
class HealthTrajectory:
    """R0 and dR0/dt at a fixed operating point; rates are per unit of model time."""

    battery_id: str
    t: np.ndarray
    r0_mean: np.ndarray
    r0_var: np.ndarray
    dr0_mean: np.ndarray
    dr0_var: np.ndarray
    point: np.ndarray
    out_of_range: bool
    horizons: dict = field(default_factory=dict)

    @property
    def t_days(self):
        return model_time_to_days(self.t)

    def to_dict(self):
        return {"battery_id": self.battery_id, "calibration_point": self.point.tolist(),
                "out_of_range": self.out_of_range, "t": self.t.tolist(),
                "r0_mean": self.r0_mean.tolist(), "r0_var": self.r0_var.tolist(),
                "dr0_mean": self.dr0_mean.tolist(), "dr0_var": self.dr0_var.tolist(),
                "horizons": {str(k): v for k, v in self.horizons.items()}}

    @classmethod
    def from_dict(cls, d):
        a = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(d["battery_id"], a("t"), a("r0_mean"), a("r0_var"), a("dr0_mean"),
                   a("dr0_var"), a("calibration_point"), d["out_of_range"],
                   {float(k) if "." in k else int(k): v for k, v in d["horizons"].items()})

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)


def calibrate_trajectory(model, point=None, max_distance=3.0, horizons_days=()):
    """Evaluate a fitted battery model at a fixed operating point over all knots."""
    point = calibration_point() if point is None else np.asarray(point, dtype=float)
    w, resid = model.calibration_weights(point)
    n = model.knot_t.shape[0]
    mean = np.empty(n)
    var = np.empty(n)
    for k in range(n):
        mean[k], var[k] = _r0_moments(model, k, w, resid)
    out = bool(np.any(point < model.op_min - max_distance) or np.any(point > model.op_max + max_distance))
    traj = HealthTrajectory(model.battery_id, model.knot_t.copy(), mean, var,
                            model.smooth_mean[:, 1].copy(),
                            np.maximum(model.smooth_wv_rows[:, 1, 1], 0.0), point, out)
    for h in horizons_days:
        r, rv, d, dv = extrapolate(model, h, point)
        traj.horizons[h] = {"r0_mean": r, "r0_var": rv, "dr0_mean": d, "dr0_var": dv}
    return traj


def predict_state(m, P, delta, q):
    """Kalman prediction of the full state over ``delta`` with no updates."""
    d = m.shape[0]
    A = np.eye(d)
    A[0, 1] = delta
    Q = np.zeros((d, d))
    Q[:2, :2] = q * np.array([[delta**3 / 3.0, delta**2 / 2.0], [delta**2 / 2.0, delta]])
    return A @ m, A @ P @ A.T + Q


def extrapolate(model, horizon_days, point=None, target=None):
    """R0 and dR0/dt moments at ``t_end - horizon`` from data observed up to that time.

    Returns ``(r0_mean, r0_var, dr0_mean, dr0_var)``. ``target`` overrides the
    target time (normalised) and is used for predictions past the cut-off.
    """
    point = calibration_point() if point is None else np.asarray(point, dtype=float)
    cutoff = model.t_end - float(days_to_model_time(horizon_days))
    t_target = cutoff if target is None else float(target)
    k = int(np.searchsorted(model.knot_t, cutoff, side="right")) - 1
    if k < 0:
        raise ValueError(f"horizon {horizon_days} d puts the target before the first observation")
    w, resid = model.calibration_weights(point)
    delta = t_target - model.knot_t[k]
    m, P = predict_state(model.filt_mean[k], model.filt_cov[k], delta, model.hp.sigma_wv**2)
    a = np.concatenate([[1.0, 0.0], w])
    return (float(a @ m), float(max(a @ P @ a + resid, 0.0)), float(m[1]), float(max(P[1, 1], 0.0)))


def calibration_dispersion(models, age, point=None):
    """Across-battery spread of R0 at a fixed age: single point vs. each battery's own point.

    Returns ``(sd_population_point, sd_own_point)``; the own point is each
    battery's beginning-of-life mean operating point.
    """
    point = calibration_point() if point is None else np.asarray(point, dtype=float)
    common, own = [], []
    for m in models:
        k = int(np.clip(np.searchsorted(m.knot_t, age, side="right") - 1, 0, len(m.knot_t) - 1))
        w, r = m.calibration_weights(point)
        common.append(_r0_moments(m, k, w, r)[0])
        w, r = m.calibration_weights(m.bol_op)
        own.append(_r0_moments(m, k, w, r)[0])
    return float(np.std(common)), float(np.std(own))

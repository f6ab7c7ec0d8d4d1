"""Binary Gaussian process classifier: logistic likelihood, Laplace approximation, ARD SE kernel."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import expit

HEALTHY, FAILED = 0, 1
LABELS = {"healthy": HEALTHY, "failed": FAILED}


class DegenerateTrainingError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


class RawInputs:
    """Feature matrix in physical units; normalised by a model's stored moments."""

    def __init__(self, values):
        self.values = np.atleast_2d(np.asarray(values, dtype=float))


class NormalizedInputs:
    """Feature matrix already in the model's normalised coordinates."""

    def __init__(self, values):
        self.values = np.atleast_2d(np.asarray(values, dtype=float))


@dataclass(frozen=True)
class InputMoments:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, raw):
        X = raw.values
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def apply(self, raw):
        if not isinstance(raw, RawInputs):
            raise TypeError("expected RawInputs")
        return NormalizedInputs((raw.values - self.mean) / self.std)


def ard_kernel(X, X2, sigma_f, lengths):
    d = (X[:, None, :] - X2[None, :, :]) / lengths
    return sigma_f**2 * np.exp(-0.5 * np.einsum("ijk,ijk->ij", d, d))


@dataclass
class LaplaceState:
    f: np.ndarray
    a: np.ndarray
    pi: np.ndarray
    sW: np.ndarray
    L: np.ndarray
    log_ml: float


def laplace_mode(K, y, tol=1e-10, max_iter=100):
    """Posterior mode of the latent function for labels ``y`` in {0, 1}."""
    n = K.shape[0]
    s = 2.0 * y - 1.0
    f = np.zeros(n)
    psi_old = -np.inf
    for _ in range(max_iter):
        pi = expit(f)
        W = pi * (1.0 - pi)
        sW = np.sqrt(W)
        B = np.eye(n) + sW[:, None] * K * sW[None, :]
        L = cholesky(B, lower=True)
        b = W * f + (y - pi)
        c = solve_triangular(L, sW * (K @ b), lower=True)
        a = b - sW * solve_triangular(L.T, c, lower=False)
        f = K @ a
        psi = -0.5 * a @ f - np.sum(np.logaddexp(0.0, -s * f))
        if abs(psi - psi_old) < tol:
            break
        psi_old = psi
    pi = expit(f)
    sW = np.sqrt(pi * (1.0 - pi))
    B = np.eye(n) + sW[:, None] * K * sW[None, :]
    L = cholesky(B, lower=True)
    log_ml = -0.5 * a @ f - np.sum(np.logaddexp(0.0, -s * f)) - np.sum(np.log(np.diag(L)))
    return LaplaceState(f, a, pi, sW, L, float(log_ml))


def neg_log_marginal(theta, X, y):
    """Negative approximate log marginal likelihood and gradient w.r.t. log(sigma_f, lengths)."""
    sf = math.exp(theta[0])
    ls = np.exp(theta[1:])
    K = ard_kernel(X, X, sf, ls)
    try:
        st = laplace_mode(K, y)
    except np.linalg.LinAlgError:
        return np.inf, np.zeros_like(theta)
    sW, L, pi = st.sW, st.L, st.pi
    R = sW[:, None] * cho_solve((L, True), np.diag(sW))
    C = solve_triangular(L, sW[:, None] * K, lower=True)
    # dW/df for the logistic likelihood (W = -d2 log p / df2)
    dW = pi * (1.0 - pi) * (1.0 - 2.0 * pi)
    s2 = -0.5 * (np.diag(K) - np.einsum("ij,ij->j", C, C)) * dW
    grad_lp = y - pi
    grads = [2.0 * K]
    for d in range(X.shape[1]):
        grads.append(K * (X[:, None, d] - X[None, :, d]) ** 2 / ls[d] ** 2)
    g = np.empty(len(theta))
    for j, Cj in enumerate(grads):
        s1 = 0.5 * st.a @ Cj @ st.a - 0.5 * np.sum(R * Cj)
        b = Cj @ grad_lp
        s3 = b - K @ (R @ b)
        g[j] = s1 + s2 @ s3
    return -st.log_ml, -g


@dataclass
class ClassifierModel:
    sigma_f: float
    lengths: np.ndarray
    X: np.ndarray
    y: np.ndarray
    moments: InputMoments
    log_ml: float
    feature_names: tuple = ()
    train_ids: tuple = ()
    _state: LaplaceState = None

    @property
    def inverse_lengths(self):
        return 1.0 / self.lengths

    def _laplace(self):
        if self._state is None:
            self._state = laplace_mode(ard_kernel(self.X, self.X, self.sigma_f, self.lengths), self.y)
        return self._state

    def latent(self, inputs):
        Z = self._as_normalized(inputs).values
        if Z.shape[1] != self.X.shape[1]:
            raise ValueError(f"expected {self.X.shape[1]} inputs, got {Z.shape[1]}")
        st = self._laplace()
        Ks = ard_kernel(Z, self.X, self.sigma_f, self.lengths)
        mean = Ks @ (self.y - st.pi)
        v = solve_triangular(st.L, st.sW[:, None] * Ks.T, lower=True)
        var = self.sigma_f**2 - np.einsum("ij,ij->j", v, v)
        return mean, np.maximum(var, 0.0)

    def _as_normalized(self, inputs):
        if isinstance(inputs, NormalizedInputs):
            return inputs
        if isinstance(inputs, RawInputs):
            return self.moments.apply(inputs)
        raise TypeError("inputs must be RawInputs or NormalizedInputs")

    def predict_proba(self, inputs):
        """Probability of failure (probit approximation of the averaged logistic)."""
        mean, var = self.latent(inputs)
        return expit(mean / np.sqrt(1.0 + math.pi * var / 8.0))

    def predict(self, inputs):
        # a probability of exactly 0.5 is classified healthy
        return (self.predict_proba(inputs) > 0.5).astype(int)

    def to_dict(self):
        return {"sigma_f": self.sigma_f, "lengths": self.lengths.tolist(),
                "feature_names": list(self.feature_names), "train_ids": list(self.train_ids),
                "log_marginal_likelihood": self.log_ml}


def train_classifier(raw, labels, feature_names=(), train_ids=(), restarts=3, seed=0,
                     bounds=(1e-2, 1e3), maxiter=200):
    """Fit (sigma_f, lengths) by maximising the Laplace marginal likelihood with seeded restarts."""
    if not isinstance(raw, RawInputs):
        raw = RawInputs(raw)
    y = np.asarray(labels, dtype=float)
    if y.shape[0] != raw.values.shape[0]:
        raise ValueError("labels and inputs differ in length")
    if np.unique(y).shape[0] < 2:
        raise DegenerateTrainingError("training set contains a single class")
    if not np.all(np.isfinite(raw.values)):
        raise ValueError("non-finite classifier inputs")
    moments = InputMoments.fit(raw)
    X = moments.apply(raw).values
    D = X.shape[1]
    rng = np.random.default_rng(seed)
    starts = [np.zeros(D + 1)]
    for _ in range(max(restarts, 1) - 1):
        starts.append(rng.uniform(math.log(0.1), math.log(10.0), D + 1))
    lb = [(math.log(bounds[0]), math.log(bounds[1]))] * (D + 1)
    best = None
    for th0 in starts:
        res = minimize(neg_log_marginal, th0, args=(X, y), jac=True, method="L-BFGS-B",
                       bounds=lb, options={"maxiter": maxiter})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise DegenerateTrainingError("marginal likelihood could not be evaluated")
    th = best.x
    return ClassifierModel(float(math.exp(th[0])), np.exp(th[1:]), X, y, moments, float(-best.fun),
                           tuple(feature_names), tuple(train_ids))


def confusion(y_true, y_pred):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int(np.sum((y_true == FAILED) & (y_pred == FAILED)))
    fn = int(np.sum((y_true == FAILED) & (y_pred == HEALTHY)))
    tn = int(np.sum((y_true == HEALTHY) & (y_pred == HEALTHY)))
    fp = int(np.sum((y_true == HEALTHY) & (y_pred == FAILED)))
    return tp, fn, tn, fp


def balanced_accuracy(tp, fn, tn, fp):
    if tp + fn == 0 or tn + fp == 0:
        raise UndefinedMetricError("balanced accuracy needs both classes in the test set")
    return 0.5 * (tp / (tp + fn) + tn / (tn + fp))

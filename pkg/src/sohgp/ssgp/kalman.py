"""Compiled Kalman filter / RTS smoother kernels for the additive WV + static-state model.

State layout: when ``has_wv`` is set, the first two states are the Wiener-velocity
pair (value, velocity) with dynamics dr = v dt, dv = dW (spectral density ``q``);
all remaining states are static (identity transition, no process noise).
Observations are scalar, y_k = h_k . x_k + e_k with e_k ~ N(0, r_k).

Time steps ``dt[k]`` are measured from the previous observation, with ``dt[0]``
measured from the prior's reference time (beginning of life).
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True)
def _predict_inplace(m, P, dt, q, has_wv):
    if not has_wv or dt == 0.0:
        return
    d = m.shape[0]
    m[0] += dt * m[1]
    for j in range(d):
        P[0, j] += dt * P[1, j]
    for i in range(d):
        P[i, 0] += dt * P[i, 1]
    P[0, 0] += q * dt * dt * dt / 3.0
    P[0, 1] += q * dt * dt / 2.0
    P[1, 0] += q * dt * dt / 2.0
    P[1, 1] += q * dt


@njit(cache=True)
def _update_inplace(m, P, h, y, r, ph):
    d = m.shape[0]
    pred = 0.0
    for i in range(d):
        pred += h[i] * m[i]
    v = y - pred
    S = r
    nonzero = False
    for i in range(d):
        if h[i] != 0.0:
            nonzero = True
            break
    if not nonzero:
        return v, S
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += P[i, j] * h[j]
        ph[i] = acc
    for i in range(d):
        S += h[i] * ph[i]
    for i in range(d):
        m[i] += ph[i] * v / S
    for i in range(d):
        pi = ph[i] / S
        for j in range(d):
            P[i, j] -= pi * ph[j]
    return v, S


@njit(cache=True)
def filter_loglik(dt, H, y, r, q, has_wv, m0, P0):
    """Prediction-error-decomposition log-likelihood, no storage."""
    n = y.shape[0]
    m = m0.copy()
    P = P0.copy()
    ph = np.empty(m.shape[0])
    ll = 0.0
    for k in range(n):
        _predict_inplace(m, P, dt[k], q, has_wv)
        v, S = _update_inplace(m, P, H[k], y[k], r[k], ph)
        if not (S > 0.0) or not np.isfinite(S):
            return np.nan, k
        ll -= 0.5 * (LOG_2PI + math.log(S) + v * v / S)
    return ll, -1


@njit(cache=True)
def filter_store(dt, H, y, r, q, has_wv, m0, P0):
    """Filter and keep every filtered mean and covariance."""
    n = y.shape[0]
    d = m0.shape[0]
    m = m0.copy()
    P = P0.copy()
    ph = np.empty(d)
    ms = np.empty((n, d))
    Ps = np.empty((n, d, d))
    ll = 0.0
    bad = -1
    for k in range(n):
        _predict_inplace(m, P, dt[k], q, has_wv)
        v, S = _update_inplace(m, P, H[k], y[k], r[k], ph)
        if not (S > 0.0) or not np.isfinite(S):
            bad = k
            break
        ll -= 0.5 * (LOG_2PI + math.log(S) + v * v / S)
        for i in range(d):
            for j in range(i + 1, d):
                a = 0.5 * (P[i, j] + P[j, i])
                P[i, j] = a
                P[j, i] = a
        ms[k] = m
        Ps[k] = P
    return ll, bad, ms, Ps


@njit(cache=True)
def rts_smooth(dt, ms, Ps, q, has_wv):
    """Rauch-Tung-Striebel backward pass.

    Returns smoothed means, smoothed marginal variances, the smoothed covariance
    rows of the two WV states (zeros when ``has_wv`` is false) and an error index
    (-1 on success).
    """
    n, d = ms.shape
    m_s = np.empty((n, d))
    var_s = np.empty((n, d))
    rows = np.zeros((n, 2, d))
    if n == 0:
        return m_s, var_s, rows, -1
    m_next = ms[n - 1].copy()
    P_next = Ps[n - 1].copy()
    m_s[n - 1] = m_next
    for i in range(d):
        var_s[n - 1, i] = P_next[i, i]
    if has_wv:
        rows[n - 1, 0] = P_next[0]
        rows[n - 1, 1] = P_next[1]
    scale = np.empty(d)
    for k in range(n - 2, -1, -1):
        m_pred = ms[k].copy()
        P_pred = Ps[k].copy()
        _predict_inplace(m_pred, P_pred, dt[k + 1], q, has_wv)
        # C = A P_f  (row operation only touches the value row)
        C = Ps[k].copy()
        if has_wv:
            for j in range(d):
                C[0, j] += dt[k + 1] * C[1, j]
        # equilibrate P_pred before solving P_pred G' = C
        for i in range(d):
            pii = P_pred[i, i]
            scale[i] = math.sqrt(pii) if pii > 0.0 else 1.0
        Rm = np.empty((d, d))
        B = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                Rm[i, j] = P_pred[i, j] / (scale[i] * scale[j])
                B[i, j] = C[i, j] / scale[i]
            if P_pred[i, i] <= 0.0:
                for j in range(d):
                    Rm[i, j] = 0.0
                    Rm[j, i] = 0.0
                    B[i, j] = 0.0
                Rm[i, i] = 1.0
            Rm[i, i] += 1e-13
        Z = np.linalg.solve(Rm, B)
        Gt = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                Gt[i, j] = Z[i, j] / scale[i]
        G = Gt.T.copy()
        if not np.all(np.isfinite(G)):
            return m_s, var_s, rows, k
        dm = m_next - m_pred
        m_cur = ms[k] + G @ dm
        D = P_next - P_pred
        P_cur = Ps[k] + G @ D @ Gt
        for i in range(d):
            for j in range(i + 1, d):
                a = 0.5 * (P_cur[i, j] + P_cur[j, i])
                P_cur[i, j] = a
                P_cur[j, i] = a
        m_s[k] = m_cur
        for i in range(d):
            var_s[k, i] = P_cur[i, i]
        if has_wv:
            rows[k, 0] = P_cur[0]
            rows[k, 1] = P_cur[1]
        m_next = m_cur
        P_next = P_cur
    return m_s, var_s, rows, -1


@njit(cache=True)
def augmented_pass(dt, Hw, G, y, r, q):
    """WV filter with the static states carried as regression effects.

    For each step returns the innovation ``e_k`` conditional on zero static
    states, its regression row ``x_k`` (innovation = e_k - x_k . s) and the
    innovation variance ``F_k``, which does not depend on the static states.
    """
    n, m = G.shape
    e = np.empty(n)
    F = np.empty(n)
    X = np.empty((n, m))
    a = np.zeros(2)
    Bm = np.zeros((2, m))
    P = np.zeros((2, 2))
    for k in range(n):
        h = dt[k]
        if h != 0.0:
            a[0] += h * a[1]
            for j in range(m):
                Bm[0, j] += h * Bm[1, j]
            P[0, 0] += 2.0 * h * P[0, 1] + h * h * P[1, 1] + q * h * h * h / 3.0
            P[0, 1] += h * P[1, 1] + q * h * h / 2.0
            P[1, 0] = P[0, 1]
            P[1, 1] += q * h
        c0 = Hw[k, 0]
        c1 = Hw[k, 1]
        pc0 = P[0, 0] * c0 + P[0, 1] * c1
        pc1 = P[1, 0] * c0 + P[1, 1] * c1
        S = c0 * pc0 + c1 * pc1 + r[k]
        ek = y[k] - c0 * a[0] - c1 * a[1]
        for j in range(m):
            X[k, j] = G[k, j] - c0 * Bm[0, j] - c1 * Bm[1, j]
        e[k] = ek
        F[k] = S
        if c0 != 0.0 or c1 != 0.0:
            k0 = pc0 / S
            k1 = pc1 / S
            a[0] += k0 * ek
            a[1] += k1 * ek
            for j in range(m):
                xj = X[k, j]
                Bm[0, j] += k0 * xj
                Bm[1, j] += k1 * xj
            P[0, 0] -= k0 * pc0
            P[0, 1] -= k0 * pc1
            P[1, 1] -= k1 * pc1
            P[1, 0] = P[0, 1]
    return e, F, X


@njit(cache=True)
def random_walk_filter(dt, I, y, r, q, m0, p0):
    """Scalar random-walk filter: R_k = R_{k-1} + N(0, q dt), y_k = I_k R_k + e_k."""
    n = y.shape[0]
    mf = np.empty(n)
    pf = np.empty(n)
    m = m0
    p = p0
    ll = 0.0
    for k in range(n):
        p += q * dt[k]
        c = I[k]
        S = c * c * p + r[k]
        v = y[k] - c * m
        ll -= 0.5 * (LOG_2PI + math.log(S) + v * v / S)
        if c != 0.0:
            g = p * c / S
            m += g * v
            p -= g * c * p
        mf[k] = m
        pf[k] = p
    return ll, mf, pf


@njit(cache=True)
def random_walk_smooth(dt, mf, pf, q):
    n = mf.shape[0]
    ms = mf.copy()
    ps = pf.copy()
    for k in range(n - 2, -1, -1):
        p_pred = pf[k] + q * dt[k + 1]
        if p_pred <= 0.0:
            continue
        g = pf[k] / p_pred
        ms[k] = mf[k] + g * (ms[k + 1] - mf[k])
        ps[k] = pf[k] + g * g * (ps[k + 1] - p_pred)
    return ms, ps

"""Compiled inner loop for the leverage-volatility filter.

Pure-python twins of these routines live in svleverage.py; the test suite
checks the two paths produce identical iterates. Everything here works on
the padded lag order (k >= 1), with the stacked optimisation vector
x = (h_t, h_{t-1}, ..., h_{t-k-1}) of length k+2.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _chol(a):
    """Lower Cholesky factor; ok=False when the matrix is not PD."""
    n = a.shape[0]
    low = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = a[i, j]
            for p in range(j):
                s -= low[i, p] * low[j, p]
            if i == j:
                if s <= 1e-300:
                    return low, False
                low[i, i] = math.sqrt(s)
            else:
                low[i, j] = s / low[j, j]
    return low, True


@njit(cache=True)
def _chol_solve(low, b):
    n = low.shape[0]
    x = np.empty(n)
    for i in range(n):
        s = b[i]
        for p in range(i):
            s -= low[i, p] * x[p]
        x[i] = s / low[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for p in range(i + 1, n):
            s -= low[p, i] * x[p]
        x[i] = s / low[i, i]
    return x


@njit(cache=True)
def _logdet_from_chol(low):
    s = 0.0
    for i in range(low.shape[0]):
        s += math.log(low[i, i])
    return 2.0 * s


@njit(cache=True)
def _obs_terms(mu, c, phi, seta, rho, x, ylags):
    """(mu_y, sig_y, w) at the stacked point x; w[j] = (y_{t-j}-mu)e^{-h_{t-j}/2}."""
    k = rho.shape[0] - 1
    d1 = 1.0
    for j in range(1, k + 1):
        d1 -= rho[j] * rho[j]
    w = np.zeros(k + 1)
    lev = 0.0
    for j in range(1, k + 1):
        w[j] = (ylags[j - 1] - mu) * math.exp(-x[j] / 2.0)
        lev += rho[j] * w[j]
    eh2 = math.exp(x[0] / 2.0)
    sig_y = eh2 * math.sqrt(1.0 - rho[0] * rho[0] / d1)
    mu_y = mu + rho[0] * eh2 / d1 * ((x[0] - c - phi * x[1]) / seta - lev)
    return mu_y, sig_y, w, d1


@njit(cache=True)
def _f_eval(mu, c, phi, seta, rho, x, y_t, ylags, expected):
    """Observation log-density and derivatives wrt a_t = x[:k+1]."""
    k = rho.shape[0] - 1
    dim = k + 1
    mu_y, sig_y, w, d1 = _obs_terms(mu, c, phi, seta, rho, x, ylags)
    r = y_t - mu_y
    val = -0.5 * math.log(2.0 * math.pi) - math.log(sig_y) - r * r / (2.0 * sig_y * sig_y)
    fac = rho[0] * math.exp(x[0] / 2.0) / d1
    b = np.zeros(dim)
    b[0] = fac / seta
    b[1] = fac * (-phi / seta + rho[1] * w[1] / 2.0)
    for j in range(2, dim):
        b[j] = fac * rho[j] * w[j] / 2.0
    dmu = b.copy()
    dmu[0] += (mu_y - mu) / 2.0
    df_dmu = r / sig_y ** 2
    df_dsig = r * r / sig_y ** 3 - 1.0 / sig_y
    grad = np.empty(dim)
    for i in range(dim):
        grad[i] = df_dmu * dmu[i]
    dsig0 = sig_y / 2.0
    grad[0] += df_dsig * dsig0
    hess = np.empty((dim, dim))
    d2f_dmu2 = -1.0 / sig_y ** 2
    for i in range(dim):
        for j in range(dim):
            hess[i, j] = d2f_dmu2 * dmu[i] * dmu[j]
    if expected:
        hess[0, 0] += -2.0 / sig_y ** 2 * dsig0 * dsig0
    else:
        d2f_dmusig = -2.0 * r / sig_y ** 3
        d2f_dsig2 = 1.0 / sig_y ** 2 - 3.0 * r * r / sig_y ** 4
        hess[0, 0] += d2f_dsig2 * dsig0 * dsig0
        for i in range(dim):
            hess[0, i] += d2f_dmusig * dsig0 * dmu[i]
            hess[i, 0] += d2f_dmusig * dmu[i] * dsig0
        # curvature of mu_y and sig_y themselves
        hess[0, 0] += df_dmu * ((mu_y - mu) / 4.0 + b[0]) + df_dsig * sig_y / 4.0
        for j in range(1, dim):
            hess[0, j] += df_dmu * b[j] / 2.0
            hess[j, 0] += df_dmu * b[j] / 2.0
            hess[j, j] += df_dmu * (-0.25 * fac * rho[j] * w[j])
    return val, grad, hess


@njit(cache=True)
def _g_eval(mu, c, phi, seta, rho, x, ylags):
    """Transition log-density of h_t and derivatives wrt a_t = x[:k+1]."""
    k = rho.shape[0] - 1
    dim = k + 1
    d1 = 1.0
    for j in range(1, k + 1):
        d1 -= rho[j] * rho[j]
    w = np.zeros(dim)
    lev = 0.0
    for j in range(1, k + 1):
        w[j] = (ylags[j - 1] - mu) * math.exp(-x[j] / 2.0)
        lev += rho[j] * w[j]
    sig_h2 = seta * seta * d1
    mu_h = c + phi * x[1] + seta * lev
    dh = x[0] - mu_h
    val = (-0.5 * math.log(2.0 * math.pi) - 0.5 * math.log(sig_h2)
           - dh * dh / (2.0 * sig_h2))
    ct = np.zeros(dim)
    ct[0] = -1.0
    ct[1] = phi - seta / 2.0 * rho[1] * w[1]
    for j in range(2, dim):
        ct[j] = -seta / 2.0 * rho[j] * w[j]
    grad = np.empty(dim)
    for i in range(dim):
        grad[i] = dh / sig_h2 * ct[i]
    hess = np.empty((dim, dim))
    for i in range(dim):
        for j in range(dim):
            hess[i, j] = -ct[i] * ct[j] / sig_h2
    for j in range(1, dim):
        hess[j, j] += dh / sig_h2 * (seta / 4.0) * rho[j] * w[j]
    return val, grad, hess


@njit(cache=True)
def _fg_value(mu, c, phi, seta, rho, x, y_t, ylags):
    """f + g without derivative work (damping-line evaluations)."""
    k = rho.shape[0] - 1
    d1 = 1.0
    for j in range(1, k + 1):
        d1 -= rho[j] * rho[j]
    lev = 0.0
    for j in range(1, k + 1):
        lev += rho[j] * (ylags[j - 1] - mu) * math.exp(-x[j] / 2.0)
    eh2 = math.exp(x[0] / 2.0)
    sig_y = eh2 * math.sqrt(1.0 - rho[0] * rho[0] / d1)
    mu_y = mu + rho[0] * eh2 / d1 * ((x[0] - c - phi * x[1]) / seta - lev)
    r = y_t - mu_y
    f_val = -0.5 * math.log(2.0 * math.pi) - math.log(sig_y) - r * r / (2.0 * sig_y * sig_y)
    sig_h2 = seta * seta * d1
    dh = x[0] - (c + phi * x[1] + seta * lev)
    g_val = (-0.5 * math.log(2.0 * math.pi) - 0.5 * math.log(sig_h2)
             - dh * dh / (2.0 * sig_h2))
    return f_val + g_val


@njit(cache=True)
def _joint_objective(mu, c, phi, seta, rho, x, y_t, ylags, a_prev, i_prev):
    val = _fg_value(mu, c, phi, seta, rho, x, y_t, ylags)
    pen = 0.0
    m = a_prev.shape[0]
    for i in range(m):
        for j in range(m):
            pen += (x[1 + i] - a_prev[i]) * i_prev[i, j] * (x[1 + j] - a_prev[j])
    return val - 0.5 * pen


@njit(cache=True)
def _fgh_eval(mu, c, phi, seta, rho, x, y_t, ylags, expected, grad, hess, w, b):
    """Fused f+g evaluation writing the combined gradient and Hessian of the
    two log-densities into caller-owned buffers (the filter hot loop).
    Returns (f_value, g_value); must agree with _f_eval plus _g_eval."""
    k = rho.shape[0] - 1
    dim = k + 1
    d1 = 1.0
    for j in range(1, k + 1):
        d1 -= rho[j] * rho[j]
    lev = 0.0
    w[0] = 0.0
    for j in range(1, k + 1):
        w[j] = (ylags[j - 1] - mu) * math.exp(-x[j] / 2.0)
        lev += rho[j] * w[j]
    eh2 = math.exp(x[0] / 2.0)
    sig_y = eh2 * math.sqrt(1.0 - rho[0] * rho[0] / d1)
    mu_y = mu + rho[0] * eh2 / d1 * ((x[0] - c - phi * x[1]) / seta - lev)
    r = y_t - mu_y
    f_val = -0.5 * math.log(2.0 * math.pi) - math.log(sig_y) - r * r / (2.0 * sig_y * sig_y)
    fac = rho[0] * eh2 / d1
    b[0] = fac / seta
    b[1] = fac * (-phi / seta + rho[1] * w[1] / 2.0)
    for j in range(2, dim):
        b[j] = fac * rho[j] * w[j] / 2.0
    dmu0 = b[0] + (mu_y - mu) / 2.0
    df_dmu = r / sig_y ** 2
    df_dsig = r * r / sig_y ** 3 - 1.0 / sig_y
    dsig0 = sig_y / 2.0
    grad[0] = df_dmu * dmu0 + df_dsig * dsig0
    for i in range(1, dim):
        grad[i] = df_dmu * b[i]
    d2f_dmu2 = -1.0 / sig_y ** 2
    hess[0, 0] = d2f_dmu2 * dmu0 * dmu0
    for i in range(1, dim):
        hess[0, i] = d2f_dmu2 * dmu0 * b[i]
        hess[i, 0] = hess[0, i]
        for j in range(1, dim):
            hess[i, j] = d2f_dmu2 * b[i] * b[j]
    if expected:
        hess[0, 0] += -2.0 / sig_y ** 2 * dsig0 * dsig0
    else:
        d2f_dmusig = -2.0 * r / sig_y ** 3
        d2f_dsig2 = 1.0 / sig_y ** 2 - 3.0 * r * r / sig_y ** 4
        hess[0, 0] += (d2f_dsig2 * dsig0 * dsig0
                       + 2.0 * d2f_dmusig * dsig0 * dmu0
                       + df_dmu * ((mu_y - mu) / 4.0 + b[0])
                       + df_dsig * sig_y / 4.0)
        for i in range(1, dim):
            hess[0, i] += d2f_dmusig * dsig0 * b[i] + df_dmu * b[i] / 2.0
            hess[i, 0] = hess[0, i]
            hess[i, i] += df_dmu * (-0.25 * fac * rho[i] * w[i])
    # transition part: reuse w; c_t vector lives in b after this point
    sig_h2 = seta * seta * d1
    mu_h = c + phi * x[1] + seta * lev
    dh = x[0] - mu_h
    g_val = (-0.5 * math.log(2.0 * math.pi) - 0.5 * math.log(sig_h2)
             - dh * dh / (2.0 * sig_h2))
    b[0] = -1.0
    b[1] = phi - seta / 2.0 * rho[1] * w[1]
    for j in range(2, dim):
        b[j] = -seta / 2.0 * rho[j] * w[j]
    for i in range(dim):
        grad[i] += dh / sig_h2 * b[i]
        for j in range(dim):
            hess[i, j] += -b[i] * b[j] / sig_h2
    for j in range(1, dim):
        hess[j, j] += dh / sig_h2 * (seta / 4.0) * rho[j] * w[j]
    return f_val, g_val


@njit(cache=True)
def sv_filter_kernel(mu, c, phi, seta, rho, y, tol, max_iter, damping):
    """Filter loop on the padded model (k >= 1).

    Returns (h_pred, h_upd, a_upd, dec, iters, conv, skip, ok). Warm-up
    steps (t <= k) carry NaN predictions and zero decomposition terms.
    """
    k = rho.shape[0] - 1
    dim = k + 1
    n = y.shape[0]
    m_st = c / (1.0 - phi)
    v_st = seta * seta / (1.0 - phi * phi)
    cov0 = np.empty((dim, dim))
    for i in range(dim):
        for j in range(dim):
            cov0[i, j] = v_st * phi ** abs(i - j)
    i_prev = np.linalg.inv(cov0)
    a_prev = np.full(dim, m_st)

    h_pred = np.full(n, np.nan)
    h_upd = np.full(n, np.nan)
    a_upd_out = np.full((n, dim), np.nan)
    dec = np.zeros(n)
    iters = np.zeros(n, dtype=np.int64)
    conv = np.zeros(n, dtype=np.bool_)
    skip = np.zeros(n, dtype=np.bool_)
    ok = True
    ylags = np.empty(k)
    big = np.empty((dim + 1, dim + 1))
    grad = np.empty(dim + 1)
    gbuf = np.empty(dim)
    hbuf = np.empty((dim, dim))
    wbuf = np.empty(dim)
    bbuf = np.empty(dim)
    a_pred = np.empty(dim)
    i_pred = np.empty((dim, dim))
    for t in range(k + 1, n):
        for j in range(k):
            ylags[j] = y[t - 1 - j]
        # prediction: argmax of the transition given the previous belief mean
        lev = 0.0
        for j in range(1, k + 1):
            lev += rho[j] * (ylags[j - 1] - mu) * math.exp(-a_prev[j - 1] / 2.0)
        x = np.empty(dim + 1)
        x[0] = c + phi * a_prev[0] + seta * lev
        for j in range(1, dim + 1):
            x[j] = a_prev[j - 1]
        for j in range(dim):
            a_pred[j] = x[j]
        if not np.isfinite(x[0]):
            ok = False
            break
        # predicted information: joint negative Hessian without the
        # observation term, Schur-reduced onto the current state block
        gv, gg, hg = _g_eval(mu, c, phi, seta, rho, x, ylags)
        for i in range(dim + 1):
            for j in range(dim + 1):
                big[i, j] = 0.0
        for i in range(dim):
            for j in range(dim):
                big[i, j] = -hg[i, j]
        for i in range(dim):
            for j in range(dim):
                big[1 + i, 1 + j] += i_prev[i, j]
        if big[dim, dim] <= 1e-300:
            ok = False
            break
        for i in range(dim):
            for j in range(dim):
                i_pred[i, j] = big[i, j] - big[i, dim] * big[dim, j] / big[dim, dim]
        low_pred, pd_ok = _chol(i_pred)
        if not pd_ok:
            ok = False
            break
        ld_pred = _logdet_from_chol(low_pred)

        cur = _joint_objective(mu, c, phi, seta, rho, x, y[t], ylags, a_prev, i_prev)
        skipped = False
        converged = False
        n_it = 0
        if not np.isfinite(cur):
            skipped = True
        else:
            for it in range(max_iter):
                n_it = it + 1
                accepted = False
                for attempt in range(2):
                    fv, gv = _fgh_eval(mu, c, phi, seta, rho, x, y[t], ylags,
                                       attempt == 1, gbuf, hbuf, wbuf, bbuf)
                    for i in range(dim):
                        grad[i] = gbuf[i]
                    grad[dim] = 0.0
                    for i in range(dim):
                        acc = 0.0
                        for j in range(dim):
                            acc += i_prev[i, j] * (x[1 + j] - a_prev[j])
                        grad[1 + i] -= acc
                    for i in range(dim + 1):
                        for j in range(dim + 1):
                            big[i, j] = 0.0
                    for i in range(dim):
                        for j in range(dim):
                            big[i, j] = -hbuf[i, j]
                    for i in range(dim):
                        for j in range(dim):
                            big[1 + i, 1 + j] += i_prev[i, j]
                    low, pd_ok = _chol(big)
                    if not pd_ok:
                        continue
                    step = _chol_solve(low, grad)
                    mx0 = 0.0
                    for i in range(dim + 1):
                        if abs(step[i]) > mx0:
                            mx0 = abs(step[i])
                    if mx0 < tol:
                        # quadratic basin: objective comparisons are noise
                        x = x + step
                        cur = _joint_objective(mu, c, phi, seta, rho, x, y[t],
                                               ylags, a_prev, i_prev)
                        accepted = True
                        break
                    for _ in range(damping + 1):
                        cand = x + step
                        vc = _joint_objective(mu, c, phi, seta, rho, cand, y[t],
                                              ylags, a_prev, i_prev)
                        if vc >= cur:
                            x = cand
                            cur = vc
                            accepted = True
                            break
                        step = step * 0.5
                    if accepted:
                        break
                if not accepted:
                    if it == 0:
                        skipped = True
                    break
                mx = 0.0
                for i in range(dim + 1):
                    if abs(step[i]) > mx:
                        mx = abs(step[i])
                if mx < tol:
                    converged = True
                    break
        if skipped:
            for j in range(dim):
                x[j] = a_pred[j]
            x[dim] = a_prev[k]
            for i in range(dim):
                for j in range(dim):
                    hbuf[i, j] = i_pred[i, j]  # reuse as I_upd
            ld_upd = ld_pred
            fit = _fg_value(mu, c, phi, seta, rho, x, y[t], ylags) \
                - _g_eval(mu, c, phi, seta, rho, x, ylags)[0]
            pen = 0.0
            i_upd = hbuf.copy()
        else:
            fit, gv = _fgh_eval(mu, c, phi, seta, rho, x, y[t], ylags, False,
                                gbuf, hbuf, wbuf, bbuf)
            for i in range(dim + 1):
                for j in range(dim + 1):
                    big[i, j] = 0.0
            for i in range(dim):
                for j in range(dim):
                    big[i, j] = -hbuf[i, j]
            for i in range(dim):
                for j in range(dim):
                    big[1 + i, 1 + j] += i_prev[i, j]
            if big[dim, dim] <= 1e-300:
                ok = False
                break
            i_upd = np.empty((dim, dim))
            for i in range(dim):
                for j in range(dim):
                    i_upd[i, j] = big[i, j] - big[i, dim] * big[dim, j] / big[dim, dim]
            low_upd, pd_ok = _chol(i_upd)
            if not pd_ok:
                ok = False
                break
            ld_upd = _logdet_from_chol(low_upd)
            pen = 0.0
            for i in range(dim):
                for j in range(dim):
                    pen += (x[i] - a_pred[i]) * i_pred[i, j] * (x[j] - a_pred[j])
            pen *= 0.5
        dec[t] = fit + 0.5 * ld_pred - 0.5 * ld_upd - pen
        if not np.isfinite(dec[t]):
            ok = False
            break
        h_pred[t] = a_pred[0]
        h_upd[t] = x[0]
        for i in range(dim):
            a_upd_out[t, i] = x[i]
        iters[t] = n_it
        conv[t] = converged
        skip[t] = skipped
        for i in range(dim):
            a_prev[i] = x[i]
        i_prev = i_upd
    return h_pred, h_upd, a_upd_out, dec, iters, conv, skip, ok

"""Compiled single-wafer objective used in the Newton inner loop.

Mirrors ``oscillator.residual_derivatives`` restricted to the six free
components; the tests check the two against each other.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def wafer_value(p, t, z, inv_var, mu, w):
    gamma, R, omega, y, phi, c, x = p[0], p[1], p[2], p[3], p[4], p[5], p[6]
    acc = 0.0
    for i in range(t.size):
        tau = t[i] - x
        r = z[i] - (R * math.exp(-0.5 * gamma * tau) * math.cos(omega * tau - phi) + c * tau + y)
        acc += r * r
    f = 0.5 * inv_var * acc
    for d in range(6):
        dd = p[d] - mu[d]
        f += 0.5 * w[d] * dd * dd
    return f


@njit(cache=True)
def wafer_fgh(p, t, z, inv_var, mu, w):
    gamma, R, omega, y, phi, c, x = p[0], p[1], p[2], p[3], p[4], p[5], p[6]
    JtJ = np.zeros((6, 6))
    Jtr = np.zeros(6)
    row = np.empty(6)
    acc = 0.0
    sf = stf = sttf = stg = sttg = 0.0
    ses = stec = stes = 0.0
    for i in range(t.size):
        tau = t[i] - x
        env = math.exp(-0.5 * gamma * tau)
        th = omega * tau - phi
        ec = env * math.cos(th)
        es = env * math.sin(th)
        f_ = R * ec
        g_ = R * es
        r = z[i] - (f_ + c * tau + y)
        acc += r * r
        row[0] = -0.5 * tau * f_
        row[1] = ec
        row[2] = -tau * g_
        row[3] = 1.0
        row[4] = g_
        row[5] = tau
        for a in range(6):
            Jtr[a] += row[a] * r
            for b in range(a, 6):
                JtJ[a, b] += row[a] * row[b]
        rt = r * tau
        rtt = rt * tau
        sf += r * f_
        stf += rt * f_
        sttf += rtt * f_
        stg += rt * g_
        sttg += rtt * g_
        ses += r * es
        stec += rt * ec
        stes += rt * es
    W = np.zeros((6, 6))
    W[0, 0] = 0.25 * sttf
    W[0, 1] = -0.5 * stec
    W[0, 2] = 0.5 * sttg
    W[0, 4] = -0.5 * stg
    W[1, 2] = -stes
    W[1, 4] = ses
    W[2, 2] = -sttf
    W[2, 4] = stf
    W[4, 4] = -sf
    f = 0.5 * inv_var * acc
    g = np.empty(6)
    H = np.empty((6, 6))
    for a in range(6):
        dd = p[a] - mu[a]
        f += 0.5 * w[a] * dd * dd
        g[a] = -inv_var * Jtr[a] + w[a] * dd
        for b in range(a, 6):
            h = inv_var * (JtJ[a, b] - W[a, b])
            H[a, b] = h
            H[b, a] = h
        H[a, a] += w[a]
    return f, g, H


@njit(cache=True)
def _chol_solve(A, b, L):
    n = b.size
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * b[k]
        b[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k, i] * b[k]
        b[i] = s / L[i, i]
    return True


@njit(cache=True)
def damped_direction(H, g, free, lam0):
    """Solve ``(H + lam I) d = -g`` on the free block, growing ``lam`` by 10 until positive definite."""
    n = g.size
    A = np.empty((n, n))
    L = np.zeros((n, n))
    scale = 1.0
    for i in range(n):
        if free[i] and abs(H[i, i]) > scale:
            scale = abs(H[i, i])
    lam = 0.0
    while lam <= 1e30 * scale:
        for i in range(n):
            for j in range(n):
                if free[i] and free[j]:
                    A[i, j] = H[i, j]
                else:
                    A[i, j] = 1.0 if i == j else 0.0
            if free[i]:
                A[i, i] += lam
        d = np.empty(n)
        for i in range(n):
            d[i] = -g[i] if free[i] else 0.0
        if _chol_solve(A, d, L):
            return d
        lam = lam0 if lam == 0.0 else lam * 10.0
    d = np.empty(n)
    for i in range(n):
        d[i] = -g[i] / scale if free[i] else 0.0
    return d

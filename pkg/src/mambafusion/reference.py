"""Naive scalar-loop oracles.

These deliberately share no code with :mod:`mambafusion.ssm`; every quantity
is computed entry by entry with Python floats so they can serve as
independent references for the vectorized paths.
"""

from __future__ import annotations

import math

import numpy as np


def naive_softplus(v: float) -> float:
    if v > 30.0:
        return v
    return math.log(1.0 + math.exp(v))


def naive_scan(A_bar, B_bar, C, X, h0=None):
    """Double loop over positions and (d, e) pairs. Unbatched: A_bar (L,D,E), C (L,E), X (L,D)."""
    L, D, E = np.shape(A_bar)
    h = [[0.0 if h0 is None else float(h0[d][e]) for e in range(E)] for d in range(D)]
    Y = np.zeros((L, D))
    for l in range(L):
        for d in range(D):
            acc = 0.0
            for e in range(E):
                h[d][e] = float(A_bar[l][d][e]) * h[d][e] + float(B_bar[l][d][e]) * float(X[l][d])
                acc += float(C[l][e]) * h[d][e]
            Y[l, d] = acc
    return Y, np.array(h)


def naive_discretize(delta, A, B):
    L, D = np.shape(delta)
    E = np.shape(A)[1]
    A_bar = np.zeros((L, D, E))
    B_bar = np.zeros((L, D, E))
    for l in range(L):
        for d in range(D):
            for e in range(E):
                A_bar[l, d, e] = math.exp(float(delta[l][d]) * float(A[d][e]))
                B_bar[l, d, e] = float(delta[l][d]) * float(B[l][e])
    return A_bar, B_bar


def _matvec(row, W, j):
    return sum(float(row[i]) * float(W[i][j]) for i in range(len(row)))


def naive_pgss(X, ths, W_Bx, W_Cx, W_dx, W_Bh, W_Ch, W_dh, dt_bias, A_log, h0=None):
    """Guided scan with B, C, delta materialized per position from X[l] and the flattened THS."""
    L, D = np.shape(X)
    E = np.shape(A_log)[1]
    g = [float(v) for v in np.asarray(ths).reshape(-1)] if ths is not None else None
    A = [[-math.exp(float(A_log[d][e])) for e in range(E)] for d in range(D)]
    B = np.zeros((L, E))
    C = np.zeros((L, E))
    delta = np.zeros((L, D))
    for l in range(L):
        for e in range(E):
            B[l, e] = _matvec(X[l], W_Bx, e) + (_matvec(g, W_Bh, e) if g is not None else 0.0)
            C[l, e] = _matvec(X[l], W_Cx, e) + (_matvec(g, W_Ch, e) if g is not None else 0.0)
        for d in range(D):
            pre = _matvec(X[l], W_dx, d) + (_matvec(g, W_dh, d) if g is not None else 0.0)
            delta[l, d] = naive_softplus(pre + float(dt_bias[d]))
    A_bar, B_bar = naive_discretize(delta, A, B)
    return naive_scan(A_bar, B_bar, C, X, h0)

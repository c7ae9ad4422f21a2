"""Selective state-space scan: discretization, sequential and chunked scans, backward.

Shapes (leading batch axes ``...`` are allowed everywhere):
    delta (..., L, D), A (D, E), B and C (..., L, E), X (..., L, D),
    A_bar and B_bar (..., L, D, E), hidden state (..., D, E).

A is diagonal per (d, e) pair, so every (d, e) entry is an independent scalar
recurrence h <- a*h + b*x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Module, Param, ShapeError, check_finite, make_rng, tally, uniform_init


@dataclass
class DiscretizedParams:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray
    delta: np.ndarray | None = None

    def __post_init__(self):
        if self.A_bar.shape != self.B_bar.shape:
            raise ShapeError("DiscretizedParams", self.A_bar.shape, self.B_bar.shape, "A_bar vs B_bar")
        if self.C.shape != self.A_bar.shape[:-2] + self.A_bar.shape[-1:]:
            raise ShapeError("DiscretizedParams", self.A_bar.shape, self.C.shape, "C must be (..., L, E)")

    @property
    def L(self) -> int:
        return self.A_bar.shape[-3]


@dataclass
class ScanResult:
    Y: np.ndarray
    final_state: np.ndarray
    all_states: np.ndarray | None = None


class SSMParams(Module):
    """Continuous parameters: A = -exp(A_log) of shape (D, E) and the step bias Param_Delta (D,)."""

    def __init__(self, d: int, e: int, rng: np.random.Generator | None = None, name: str = "ssm"):
        if d < 1 or e < 1:
            raise ValueError(f"SSMParams: D and E must be >= 1, got D={d}, E={e}")
        self.d, self.e = d, e
        # S4D-real style: A = -(1..E) per channel.
        self.A_log = Param(f"{name}.A_log", np.log(np.tile(np.arange(1, e + 1, dtype=float), (d, 1))))
        rng = rng if rng is not None else make_rng(0)
        # step bias so that softplus(bias) spans roughly [1e-3, 1e-1]
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d))
        self.dt_bias = Param(f"{name}.dt_bias", dt + np.log(-np.expm1(-dt)))

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log.value)

    def backward_A(self, dA: np.ndarray) -> None:
        self.A_log.grad += dA * self.A


def init_projection(rng: np.random.Generator, din: int, dout: int, name: str) -> Param:
    return Param(name, uniform_init(rng, (din, dout), din))


# --- discretization -------------------------------------------------------------


def discretize(delta: np.ndarray, A: np.ndarray, B: np.ndarray, strict: bool = True):
    """Zero-order hold for A (exp(delta*A)), Euler for B (delta*B)."""
    if delta.shape[-1] != A.shape[0]:
        raise ShapeError("discretize", delta.shape, A.shape, "delta D vs A D")
    if B.shape[-1] != A.shape[1] or B.shape[:-1] != delta.shape[:-1]:
        raise ShapeError("discretize", delta.shape, B.shape, "B must be (..., L, E)")
    if strict and not np.all(delta > 0):
        raise ValueError("discretize: delta must be strictly positive")
    dA = delta[..., :, None] * A
    A_bar = np.exp(dA)
    B_bar = delta[..., :, None] * B[..., None, :]
    tally("discretize", 2 * A_bar.size)
    return A_bar, B_bar


def discretize_backward(dA_bar, dB_bar, delta, A, B, A_bar):
    """Returns (d_delta, dA, dB)."""
    g = dA_bar * A_bar
    d_delta = (g * A).sum(-1) + (dB_bar * B[..., None, :]).sum(-1)
    dA = (g * delta[..., :, None]).reshape(-1, *A.shape).sum(0)
    dB = (dB_bar * delta[..., :, None]).sum(-2)
    return d_delta, dA, dB


# --- scans ----------------------------------------------------------------------


def _check_scan_shapes(dp: DiscretizedParams, X: np.ndarray, h0):
    if X.shape != dp.A_bar.shape[:-1]:
        raise ShapeError("selective_scan", dp.A_bar.shape, X.shape, "X must be (..., L, D)")
    if h0 is not None and h0.shape[-2:] != dp.A_bar.shape[-2:]:
        raise ShapeError("selective_scan", dp.A_bar.shape, h0.shape, "h0 must be (..., D, E)")


def _linear_recurrence(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """States h[l] = a[l]*h[l-1] + b[l] along axis -3."""
    states = np.empty(np.broadcast_shapes(a.shape, h0[..., None, :, :].shape))
    h = h0
    for l in range(a.shape[-3]):
        h = a[..., l, :, :] * h + b[..., l, :, :]
        states[..., l, :, :] = h
    return states


def selective_scan(
    dp: DiscretizedParams,
    X: np.ndarray,
    h0: np.ndarray | None = None,
    keep_states: bool = False,
    check: bool = True,
) -> ScanResult:
    """h[l] = A_bar[l]*h[l-1] + B_bar[l]*X[l];  Y[l,d] = sum_e C[l,e] h[l,d,e]."""
    _check_scan_shapes(dp, X, h0)
    if h0 is None:
        h0 = np.zeros(dp.A_bar.shape[:-3] + dp.A_bar.shape[-2:])
    states = _linear_recurrence(dp.A_bar, dp.B_bar * X[..., None], h0)
    Y = np.einsum("...lde,...le->...ld", states, dp.C)
    tally("scan", 3 * dp.A_bar.size)
    if check:
        check_finite(Y, "selective_scan output")
    final = states[..., -1, :, :].copy() if dp.L else h0.copy()
    return ScanResult(Y, final, states if keep_states else None)


def selective_scan_backward(dY, d_final, dp: DiscretizedParams, X, h0, states):
    """Reverse pass of the scan. Returns (dA_bar, dB_bar, dC, dX, dh0).

    ``states`` are the forward hidden states; ``d_final`` may be None.
    """
    if h0 is None:
        h0 = np.zeros(states.shape[:-3] + states.shape[-2:])
    L = states.shape[-3]
    # adjoint g[l] = dL/dh[l], running backwards: g[l] = dY[l] C[l] + A_bar[l+1] g[l+1] (+ d_final at L)
    inj = dY[..., :, :, None] * dp.C[..., :, None, :]
    g = np.empty_like(states)
    acc = np.zeros(states.shape[:-3] + states.shape[-2:]) if d_final is None else np.array(d_final, dtype=float)
    acc = np.broadcast_to(acc, g.shape[:-3] + g.shape[-2:]).copy()
    for l in range(L - 1, -1, -1):
        acc = acc + inj[..., l, :, :]
        g[..., l, :, :] = acc
        acc = acc * dp.A_bar[..., l, :, :]
    dh0 = acc
    prev = np.concatenate([np.broadcast_to(h0[..., None, :, :], states.shape[:-3] + (1,) + states.shape[-2:]), states[..., :-1, :, :]], axis=-3)
    dA_bar = g * prev
    dB_bar = g * X[..., None]
    dX = (g * dp.B_bar).sum(-1)
    dC = np.einsum("...ld,...lde->...le", dY, states)
    return dA_bar, dB_bar, dC, dX, dh0


def selective_scan_chunked(
    dp: DiscretizedParams,
    X: np.ndarray,
    h0: np.ndarray | None = None,
    chunk: int = 16,
    keep_states: bool = False,
) -> ScanResult:
    """Two-level scan using associativity of (a, b) o (a', b') = (a*a', a'*b + b').

    All chunks run their local recurrence from a zero state simultaneously, chunk
    summaries are composed left to right, then each chunk is corrected by its
    carried-in state times the local cumulative decay.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    _check_scan_shapes(dp, X, h0)
    batch, (L, D, E) = dp.A_bar.shape[:-3], dp.A_bar.shape[-3:]
    if h0 is None:
        h0 = np.zeros(batch + (D, E))
    if L == 0:
        return selective_scan(dp, X, h0, keep_states)
    n = -(-L // chunk)
    padn = n * chunk - L
    a, b = dp.A_bar, dp.B_bar * X[..., None]
    if padn:
        # identity elements: a=1, b=0
        widths = [(0, 0)] * len(batch) + [(0, padn), (0, 0), (0, 0)]
        a = np.pad(a, widths, constant_values=1.0)
        b = np.pad(b, widths, constant_values=0.0)
    a = a.reshape(batch + (n, chunk, D, E))
    b = b.reshape(batch + (n, chunk, D, E))
    local = _linear_recurrence(a, b, np.zeros(batch + (n, D, E)))
    decay = np.cumprod(a, axis=-3)
    carry = np.empty(batch + (n, D, E))
    h = h0
    for c in range(n):
        carry[..., c, :, :] = h
        h = decay[..., c, -1, :, :] * h + local[..., c, -1, :, :]
    states = (local + decay * carry[..., :, None, :, :]).reshape(batch + (n * chunk, D, E))[..., :L, :, :]
    Y = np.einsum("...lde,...le->...ld", states, dp.C)
    check_finite(Y, "selective_scan_chunked output")
    return ScanResult(Y, states[..., -1, :, :].copy(), states if keep_states else None)


def flops_of_scan(L: int, D: int, E: int) -> int:
    """Scan MACs: L*D*E for decay, L*D*E for input injection, L*D*E for output contraction."""
    return 3 * L * D * E

"""Finite-difference checks of every hand-written backward pass.

Each case builds random inputs from a seed, wraps them in Params so input
gradients are checked alongside weights, and reduces the outputs to a scalar
with fixed random cotangents.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fusion import PGSS, MFCSPLayer
from .numerics import (
    GradCheckReport, Param, conv2d, conv2d_backward, grad_check, linear, linear_backward, make_rng,
    silu, silu_backward, softplus, softplus_backward,
)
from .pan import MambaFusionPAN, MultiScaleFeatures, PanConfig, random_features
from .ssm import DiscretizedParams, discretize, discretize_backward, selective_scan, selective_scan_backward
from .text import MambaLayer, SGSSTextMambaBlock, TextMambaBlock

OP_TOL = 1e-5
END_TO_END_TOL = 1e-4


@dataclass
class Case:
    loss: Callable[[bool], float]
    params: list[Param]
    max_entries: int | None = None


def _dot(out, R):
    return float((out * R).sum())


def linear_case(seed: int) -> Case:
    rng = make_rng(seed)
    x = Param("x", rng.normal(size=(2, 5, 4)))
    W = Param("W", rng.normal(size=(4, 3)))
    b = Param("b", rng.normal(size=3))
    R = rng.normal(size=(2, 5, 3))

    def f(bw):
        y, c = linear(x.value, W, b)
        if bw:
            x.grad += linear_backward(R, c)
        return _dot(y, R)
    return Case(f, [x, W, b])


def conv_case(seed: int) -> Case:
    rng = make_rng(seed)
    k, stride = (3, 2) if seed % 2 else (3, 1)
    x = Param("x", rng.normal(size=(2, 3, 5, 6)))
    W = Param("W", rng.normal(size=(4, 3, k, k)))
    b = Param("b", rng.normal(size=4))
    y0, _ = conv2d(x.value, W, b, stride)
    R = rng.normal(size=y0.shape)

    def f(bw):
        y, c = conv2d(x.value, W, b, stride)
        if bw:
            x.grad += conv2d_backward(R, c)
        return _dot(y, R)
    return Case(f, [x, W, b])


def softplus_case(seed: int) -> Case:
    rng = make_rng(seed)
    x = Param("x", rng.normal(scale=3.0, size=(4, 5)))
    R = rng.normal(size=(4, 5))

    def f(bw):
        y, c = softplus(x.value)
        if bw:
            x.grad += softplus_backward(R, c)
        return _dot(y, R)
    return Case(f, [x])


def silu_case(seed: int) -> Case:
    rng = make_rng(seed)
    x = Param("x", rng.normal(scale=3.0, size=(4, 5)))
    R = rng.normal(size=(4, 5))

    def f(bw):
        y, c = silu(x.value)
        if bw:
            x.grad += silu_backward(R, c)
        return _dot(y, R)
    return Case(f, [x])


def discretize_case(seed: int) -> Case:
    rng = make_rng(seed)
    L, D, E = 5, 3, 4
    delta = Param("delta", rng.uniform(0.1, 1.0, size=(L, D)))
    A = Param("A", -rng.uniform(0.5, 2.0, size=(D, E)))
    B = Param("B", rng.normal(size=(L, E)))
    Ra, Rb = rng.normal(size=(2, L, D, E))

    def f(bw):
        A_bar, B_bar = discretize(delta.value, A.value, B.value)
        if bw:
            dd, dA, dB = discretize_backward(Ra, Rb, delta.value, A.value, B.value, A_bar)
            delta.grad += dd
            A.grad += dA
            B.grad += dB
        return _dot(A_bar, Ra) + _dot(B_bar, Rb)
    return Case(f, [delta, A, B])


def scan_case(seed: int) -> Case:
    rng = make_rng(seed)
    L, D, E = 7, 3, 4
    a = Param("A_bar", rng.uniform(0.2, 0.99, size=(2, L, D, E)))
    b = Param("B_bar", rng.normal(size=(2, L, D, E)))
    C = Param("C", rng.normal(size=(2, L, E)))
    X = Param("X", rng.normal(size=(2, L, D)))
    h0 = Param("h0", rng.normal(size=(2, D, E)))
    R, Rh = rng.normal(size=(2, L, D)), rng.normal(size=(2, D, E))

    def f(bw):
        dp = DiscretizedParams(a.value, b.value, C.value)
        res = selective_scan(dp, X.value, h0.value, keep_states=bw)
        if bw:
            grads = selective_scan_backward(R, Rh, dp, X.value, h0.value, res.all_states)
            for p, g in zip((a, b, C, X, h0), grads):
                p.grad += g
        return _dot(res.Y, R) + _dot(res.final_state, Rh)
    return Case(f, [a, b, C, X, h0])


def mamba_layer_case(seed: int) -> Case:
    rng = make_rng(seed)
    layer = MambaLayer(4, 3, rng, "layer")
    x = Param("x", rng.normal(size=(2, 5, 4)))
    h0 = Param("h0", rng.normal(size=(2, 4, 3)))
    R, Rh = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 4, 3))

    def f(bw):
        y, h, c = layer.forward(x.value, h0.value)
        if bw:
            dx, dh0 = layer.backward(R, Rh, c)
            x.grad += dx
            h0.grad += dh0
        return _dot(y, R) + _dot(h, Rh)
    return Case(f, layer.params() + [x, h0])


def text_block_case(seed: int) -> Case:
    rng = make_rng(seed)
    blk = TextMambaBlock(5, 3, 2, rng, "text")
    w = Param("w0", rng.normal(size=(4, 5)))
    R, Rt = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))

    def f(bw):
        x, ths, c = blk.forward(w.value)
        if bw:
            dw, _ = blk.backward(R, Rt, c)
            w.grad += dw
        return _dot(x, R) + _dot(ths, Rt)
    return Case(f, blk.params() + [w])


def sgss_case(seed: int) -> Case:
    rng = make_rng(seed)
    blk = SGSSTextMambaBlock(6, 3, 5, depth=2, rng=rng)
    w = Param("w", rng.normal(size=(2, 4, 6)))
    ihs = Param("ihs", rng.normal(size=(2, 5, 3)))
    R, Rt = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 6, 3))

    def f(bw):
        w1, ths, c = blk.forward(w.value, ihs.value)
        if bw:
            dw, di = blk.backward(R, Rt, c)
            w.grad += dw
            ihs.grad += di
        return _dot(w1, R) + _dot(ths, Rt)
    return Case(f, blk.params() + [w, ihs])


def pgss_case(seed: int) -> Case:
    rng = make_rng(seed)
    D, E, g = 4, 3, 6
    op = PGSS(D, E, g, rng)
    X = Param("X", rng.normal(size=(2, 7, D)))
    ths = Param("ths", rng.normal(size=(2, 2, 3)))  # (D_t, E_t) = (2, 3), so g = 6
    R, Ri = rng.normal(size=(2, 7, D)), rng.normal(size=(2, D, E))

    def f(bw):
        Y, ihs, c = op.forward(X.value, ths.value)
        if bw:
            dX, dT = op.backward(R, Ri, c)
            X.grad += dX
            ths.grad += dT
        return _dot(Y, R) + _dot(ihs, Ri)
    return Case(f, op.params() + [X, ths])


def csp_case(seed: int) -> Case:
    rng = make_rng(seed)
    csp = MFCSPLayer(4, 6, 3, 10, n_units=2, bidirectional=bool(seed % 2), rng=rng)
    x = Param("x", rng.normal(size=(2, 4, 3, 5)))
    t = Param("t", rng.normal(size=(2, 5, 2)))
    R, Ri = rng.normal(size=(2, 6, 3, 5)), rng.normal(size=(2, 3, 3))

    def f(bw):
        y, ihs, c = csp.forward(x.value, t.value)
        if bw:
            dx, dt = csp.backward(R, Ri, c)
            x.grad += dx
            t.grad += dt
        return _dot(y, R) + _dot(ihs, Ri)
    return Case(f, csp.params() + [x, t])


def tiny_pan_case(seed: int, max_entries: int | None = 5) -> Case:
    """MambaFusion-PAN with D_i=8, E=4 and a 16x16 P3 map, reduced against random cotangents."""
    cfg = PanConfig(channels=(8, 8, 8), text_dim=8, text_state=4, image_state=4, units=2, text_depth=2, seed=seed)
    neck = MambaFusionPAN(cfg)
    rng = make_rng([seed, 1])
    feats = random_features(cfg, 128, rng)
    w0 = Param("w0", rng.normal(size=(5, cfg.text_dim)))
    fp = [Param(n, m) for n, m in zip(("P3", "P4", "P5"), feats.levels)]
    R = [rng.normal(size=m.shape) for m in feats.levels] + [rng.normal(size=w0.shape)]

    def f(bw):
        out, c = neck.forward(MultiScaleFeatures(*[p.value for p in fp]), w0.value)
        loss = sum(_dot(o, r) for o, r in zip((out.P3, out.P4, out.P5, out.text), R))
        if bw:
            d, dw = neck.backward(*R, c)
            for p, g in zip(fp, d.levels):
                p.grad += g
            w0.grad += dw
        return loss
    return Case(f, neck.params() + fp + [w0], max_entries)


OP_CASES: dict[str, Callable[[int], Case]] = {
    "linear": linear_case,
    "conv2d": conv_case,
    "softplus": softplus_case,
    "silu": silu_case,
    "discretize": discretize_case,
    "selective_scan": scan_case,
    "mamba_layer": mamba_layer_case,
    "text_mamba_block": text_block_case,
    "sgss_text_mamba_block": sgss_case,
    "pgss": pgss_case,
    "mf_csplayer": csp_case,
}


def check_case(case: Case, tol: float, eps: float = 1e-6, seed: int = 0) -> GradCheckReport:
    return grad_check(case.loss, case.params, eps=eps, tol=tol, max_entries=case.max_entries, seed=seed)


def run_suite(seed: int = 0, tol: float = OP_TOL, end_to_end_tol: float = END_TO_END_TOL, eps: float = 1e-6):
    """Yields (name, report, seconds) for every op, then the end-to-end neck."""
    for name, make in OP_CASES.items():
        t = time.perf_counter()
        rep = check_case(make(seed), tol, eps, seed)
        yield name, rep, time.perf_counter() - t
    t = time.perf_counter()
    rep = check_case(tiny_pan_case(seed), end_to_end_tol, eps, seed)
    yield "mambafusion_pan", rep, time.perf_counter() - t

"""Text branch: phrase embedding stub, stacked Mamba layers, and the serial-guided block.

The serial-guided block turns an image hidden state (D_i x E_i) into E_i guidance
tokens, scans them first, and lets the carried hidden state condition the scan
over the text tokens. Only text positions are returned.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .numerics import (
    Module,
    Param,
    ShapeError,
    linear,
    linear_backward,
    make_rng,
    softplus,
    softplus_backward,
)
from .ssm import DiscretizedParams, SSMParams, discretize, discretize_backward, init_projection, selective_scan, selective_scan_backward


def embed_tokens(phrases: Sequence[Sequence[int]], table: Param):
    """One row per phrase: the mean of its token rows. Returns (w0, cache)."""
    if len(phrases) == 0:
        raise ValueError("embed_tokens: empty phrase list")
    V = table.shape[0]
    rows = []
    for p, ids in enumerate(phrases):
        if len(ids) == 0:
            raise ValueError(f"embed_tokens: phrase {p} has no tokens")
        for t in ids:
            if not 0 <= t < V:
                raise IndexError(f"embed_tokens: token id {t} out of vocabulary of size {V}")
        rows.append(table.value[list(ids)].mean(axis=0))
    return np.stack(rows), (phrases, table)


def embed_tokens_backward(dw0: np.ndarray, cache) -> None:
    phrases, table = cache
    for p, ids in enumerate(phrases):
        np.add.at(table.grad, list(ids), dw0[p] / len(ids))


class MambaLayer(Module):
    """x -> in-proj -> (delta, B, C) -> discretize -> scan -> out-proj, added back to x.

    Projections carry no bias, so a zero input maps to a zero output and state.
    """

    def __init__(self, d: int, e: int, rng: np.random.Generator, name: str = "mamba"):
        self.d, self.e = d, e
        self.W_in = init_projection(rng, d, d, f"{name}.W_in")
        self.W_dt = init_projection(rng, d, d, f"{name}.W_dt")
        self.W_B = init_projection(rng, d, e, f"{name}.W_B")
        self.W_C = init_projection(rng, d, e, f"{name}.W_C")
        self.W_out = init_projection(rng, d, d, f"{name}.W_out")
        self.ssm = SSMParams(d, e, rng, f"{name}.ssm")

    def forward(self, x: np.ndarray, h0: np.ndarray | None = None):
        if x.shape[-1] != self.d:
            raise ShapeError("MambaLayer", x.shape, (self.d,), "channel dim")
        u, c_in = linear(x, self.W_in)
        pre, c_dt = linear(u, self.W_dt)
        delta, c_sp = softplus(pre + self.ssm.dt_bias.value)
        B, c_B = linear(u, self.W_B)
        C, c_C = linear(u, self.W_C)
        A = self.ssm.A
        A_bar, B_bar = discretize(delta, A, B)
        dp = DiscretizedParams(A_bar, B_bar, C, delta)
        res = selective_scan(dp, u, h0, keep_states=True)
        y, c_out = linear(res.Y, self.W_out)
        cache = (c_in, c_dt, c_sp, c_B, c_C, c_out, dp, u, h0, res.all_states, A, B)
        return x + y, res.final_state, cache

    def backward(self, dout: np.ndarray, d_final: np.ndarray | None, cache):
        c_in, c_dt, c_sp, c_B, c_C, c_out, dp, u, h0, states, A, B = cache
        dY = linear_backward(dout, c_out)
        dA_bar, dB_bar, dC, du, dh0 = selective_scan_backward(dY, d_final, dp, u, h0, states)
        d_delta, dA, dB = discretize_backward(dA_bar, dB_bar, dp.delta, A, B, dp.A_bar)
        self.ssm.backward_A(dA)
        du = du + linear_backward(dB, c_B) + linear_backward(dC, c_C)
        dpre = softplus_backward(d_delta, c_sp)
        self.ssm.dt_bias.grad += dpre.reshape(-1, self.d).sum(0)
        du = du + linear_backward(dpre, c_dt)
        dx = dout + linear_backward(du, c_in)
        return dx, dh0


class TextMambaBlock(Module):
    """Stacked Mamba layers; emits text features and the last layer's final hidden state (THS)."""

    def __init__(self, d: int, e: int, depth: int = 2, rng: np.random.Generator | None = None, name: str = "text"):
        if depth < 1:
            raise ValueError("TextMambaBlock needs at least one layer")
        rng = rng if rng is not None else make_rng(0)
        self.d, self.e = d, e
        self.layers = [MambaLayer(d, e, rng, f"{name}.layers.{i}") for i in range(depth)]

    def forward(self, w0: np.ndarray, prefix: np.ndarray | None = None):
        """Scan ``prefix`` (if given) and then ``w0`` with the hidden state carried across."""
        if prefix is not None and prefix.shape[:-2] != w0.shape[:-2]:
            raise ShapeError("TextMambaBlock", w0.shape, prefix.shape, "batch axes of text and prefix")
        x, p = w0, prefix
        caches = []
        for layer in self.layers:
            cp = None
            h_p = None
            if p is not None:
                p, h_p, cp = layer.forward(p)
            x, h, ct = layer.forward(x, h_p)
            caches.append((cp, ct, None if p is None else p.shape))
        return x, h, caches

    def backward(self, dw1: np.ndarray, dths: np.ndarray | None, caches):
        """Returns (dw0, dprefix); dprefix is None for an unprefixed forward."""
        dx, dp = dw1, None
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            cp, ct, p_shape = caches[i]
            dx, dh0 = layer.backward(dx, dths if i == len(self.layers) - 1 else None, ct)
            if cp is not None:
                if dp is None:
                    dp = np.zeros(p_shape)
                dp, _ = layer.backward(dp, dh0, cp)
        return dx, dp


def ihs_to_tokens(ihs: np.ndarray) -> np.ndarray:
    """(..., D_i, E_i) -> (..., E_i, D_i): one guidance token per state slot."""
    return np.swapaxes(ihs, -1, -2)


class SGSSTextMambaBlock(Module):
    """TextMambaBlock preceded by a scanned prefix of projected IHS tokens."""

    def __init__(self, d_text: int, e_text: int, d_image: int, depth: int = 2, rng=None, name: str = "sgss", zero_proj: bool = False):
        rng = rng if rng is not None else make_rng(0)
        self.block = TextMambaBlock(d_text, e_text, depth, rng, f"{name}.block")
        self.d_image = d_image
        proj = np.zeros((d_image, d_text)) if zero_proj else init_projection(rng, d_image, d_text, "").value
        self.proj = Param(f"{name}.proj", proj)

    def guidance_tokens(self, ihs: np.ndarray):
        if ihs.shape[-2] != self.d_image:
            raise ShapeError("sgss", ihs.shape, self.proj.shape, "IHS rows vs projection input")
        return linear(ihs_to_tokens(ihs), self.proj)

    def forward(self, w: np.ndarray, ihs: np.ndarray | None):
        if ihs is None:
            w1, ths, cb = self.block.forward(w)
            return w1, ths, (None, cb)
        prefix, c_proj = self.guidance_tokens(ihs)
        w1, ths, cb = self.block.forward(w, prefix)
        return w1, ths, (c_proj, cb)

    def backward(self, dw1, dths, cache):
        """Returns (dw, dIHS)."""
        c_proj, cb = cache
        dw, dprefix = self.block.backward(dw1, dths, cb)
        if c_proj is None:
            return dw, None
        dtok = linear_backward(dprefix, c_proj)
        return dw, np.swapaxes(dtok, -1, -2)


def text_mamba_block(w0: np.ndarray, block: TextMambaBlock):
    """Functional form: returns (w1, THS)."""
    w1, ths, _ = block.forward(w0)
    return w1, ths


def sgss_text_mamba_block(w0: np.ndarray, ihs: np.ndarray, block: SGSSTextMambaBlock):
    w1, ths, _ = block.forward(w0, ihs)
    return w1, ths


__all__ = [
    "embed_tokens",
    "embed_tokens_backward",
    "MambaLayer",
    "TextMambaBlock",
    "SGSSTextMambaBlock",
    "ihs_to_tokens",
    "text_mamba_block",
    "sgss_text_mamba_block",
]

"""Image-side fusion: raster sequences, the parallel-guided scan, and the MF-CSP layer.

In the parallel-guided scan the text hidden state is flattened once, projected
once per head (B, C, delta), and broadcast-added to every position's projection
of the image sequence. Its cost is therefore constant in the sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Module,
    Param,
    ShapeError,
    conv2d,
    conv2d_backward,
    linear,
    linear_backward,
    make_rng,
    silu,
    silu_backward,
    softplus,
    softplus_backward,
    uniform_init,
)
from .ssm import (
    DiscretizedParams,
    SSMParams,
    discretize,
    discretize_backward,
    init_projection,
    selective_scan,
    selective_scan_backward,
)

FORWARD, REVERSE = "forward", "reverse"


@dataclass
class ImageSequence:
    X: np.ndarray  # (..., H*W, C)
    height: int
    width: int
    direction: str = FORWARD


def flatten_raster(fmap: np.ndarray, direction: str = FORWARD) -> ImageSequence:
    """(..., C, H, W) -> (..., H*W, C) in row-major raster order (or its reverse)."""
    if direction not in (FORWARD, REVERSE):
        raise ValueError(f"unknown scan direction {direction!r}")
    *lead, C, H, W = fmap.shape
    X = np.swapaxes(fmap.reshape(*lead, C, H * W), -1, -2)
    if direction == REVERSE:
        X = X[..., ::-1, :]
    return ImageSequence(np.ascontiguousarray(X), H, W, direction)


def unflatten_raster(seq: ImageSequence | np.ndarray, height: int | None = None, width: int | None = None, direction: str | None = None) -> np.ndarray:
    if isinstance(seq, ImageSequence):
        X, height, width, direction = seq.X, seq.height, seq.width, seq.direction
    else:
        X = seq
        direction = direction or FORWARD
    if X.shape[-2] != height * width:
        raise ShapeError("unflatten_raster", X.shape, (height, width), "sequence length != H*W")
    if direction == REVERSE:
        X = X[..., ::-1, :]
    *lead, L, C = X.shape
    return np.ascontiguousarray(np.swapaxes(X, -1, -2).reshape(*lead, C, height, width))


class PGSS(Module):
    """Parallel-guided selective scan over an image sequence of width ``d``.

    B[l] = x_l W_Bx + g W_Bh,  C[l] = x_l W_Cx + g W_Ch,
    delta[l] = softplus(x_l W_dx + g W_dh + dt_bias),  with g = vec(THS).
    """

    def __init__(self, d: int, e: int, guide_dim: int, rng: np.random.Generator | None = None, name: str = "pgss", zero_guidance: bool = False):
        rng = rng if rng is not None else make_rng(0)
        self.d, self.e, self.guide_dim = d, e, guide_dim
        self.W_Bx = init_projection(rng, d, e, f"{name}.W_Bx")
        self.W_Cx = init_projection(rng, d, e, f"{name}.W_Cx")
        self.W_dx = init_projection(rng, d, d, f"{name}.W_dx")

        def guide(dout, key):
            w = np.zeros((guide_dim, dout)) if zero_guidance else uniform_init(rng, (guide_dim, dout), guide_dim)
            return Param(f"{name}.{key}", w)

        self.W_Bh = guide(e, "W_Bh")
        self.W_Ch = guide(e, "W_Ch")
        self.W_dh = guide(d, "W_dh")
        self.ssm = SSMParams(d, e, rng, f"{name}.ssm")

    def forward(self, X: np.ndarray, ths: np.ndarray | None, h0: np.ndarray | None = None):
        """Returns (Y, IHS, cache). ``ths=None`` runs the unguided scan."""
        if X.shape[-1] != self.d:
            raise ShapeError("pgss", X.shape, (self.d,), "image channel dim")
        B, c_Bx = linear(X, self.W_Bx)
        C, c_Cx = linear(X, self.W_Cx)
        pre, c_dx = linear(X, self.W_dx)
        guide = None
        if ths is not None:
            g = ths.reshape(*ths.shape[:-2], -1)
            if g.shape[-1] != self.guide_dim:
                raise ShapeError("pgss", ths.shape, self.W_Bh.shape, "flattened THS vs guidance projection")
            gB, c_Bh = linear(g, self.W_Bh)
            gC, c_Ch = linear(g, self.W_Ch)
            gd, c_dh = linear(g, self.W_dh)
            B = B + gB[..., None, :]
            C = C + gC[..., None, :]
            pre = pre + gd[..., None, :]
            guide = (ths.shape, c_Bh, c_Ch, c_dh)
        delta, c_sp = softplus(pre + self.ssm.dt_bias.value)
        A = self.ssm.A
        A_bar, B_bar = discretize(delta, A, B)
        dp = DiscretizedParams(A_bar, B_bar, C, delta)
        res = selective_scan(dp, X, h0, keep_states=True)
        cache = (c_Bx, c_Cx, c_dx, guide, c_sp, dp, X, h0, res.all_states, A, B)
        return res.Y, res.final_state, cache

    def backward(self, dY: np.ndarray, d_ihs: np.ndarray | None, cache):
        """Returns (dX, dTHS); dTHS is None for an unguided forward."""
        c_Bx, c_Cx, c_dx, guide, c_sp, dp, X, h0, states, A, B = cache
        dA_bar, dB_bar, dC, dX, _ = selective_scan_backward(dY, d_ihs, dp, X, h0, states)
        d_delta, dA, dB = discretize_backward(dA_bar, dB_bar, dp.delta, A, B, dp.A_bar)
        self.ssm.backward_A(dA)
        dpre = softplus_backward(d_delta, c_sp)
        self.ssm.dt_bias.grad += dpre.reshape(-1, self.d).sum(0)
        dX = dX + linear_backward(dB, c_Bx) + linear_backward(dC, c_Cx) + linear_backward(dpre, c_dx)
        dths = None
        if guide is not None:
            ths_shape, c_Bh, c_Ch, c_dh = guide
            dg = linear_backward(dB.sum(-2), c_Bh) + linear_backward(dC.sum(-2), c_Ch) + linear_backward(dpre.sum(-2), c_dh)
            dths = dg.reshape(ths_shape)
        return dX, dths


def pgss(X, ths, w: PGSS):
    """Functional form: returns (Y, IHS)."""
    Y, ihs, _ = w.forward(X.X if isinstance(X, ImageSequence) else X, ths)
    return Y, ihs


# --- convolution helpers --------------------------------------------------------


class ConvAct(Module):
    """conv (same padding) + bias + SiLU."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, rng=None, name: str = "conv"):
        rng = rng if rng is not None else make_rng(0)
        fan_in = cin * k * k
        self.stride = stride
        self.W = Param(f"{name}.W", uniform_init(rng, (cout, cin, k, k), fan_in))
        self.b = Param(f"{name}.b", uniform_init(rng, (cout,), fan_in))

    def forward(self, x):
        z, c_conv = conv2d(x, self.W, self.b, self.stride)
        y, c_act = silu(z)
        return y, (c_conv, c_act)

    def backward(self, dy, cache):
        c_conv, c_act = cache
        return conv2d_backward(silu_backward(dy, c_act), c_conv)


class GuidedBottleneck(Module):
    """3x3 conv -> raster flatten -> PGSS -> unflatten, added to the unit input."""

    def __init__(self, c: int, e: int, guide_dim: int, bidirectional: bool = False, rng=None, name: str = "unit", zero_guidance: bool = False):
        self.conv = ConvAct(c, c, 3, 1, rng, f"{name}.conv")
        self.pgss = PGSS(c, e, guide_dim, rng, f"{name}.pgss", zero_guidance)
        self.bidirectional = bidirectional

    def forward(self, x, ths):
        z, c_conv = self.conv.forward(x)
        H, W = z.shape[-2:]
        dirs = (FORWARD, REVERSE) if self.bidirectional else (FORWARD,)
        out = x
        ihs = 0.0
        scans = []
        for direction in dirs:
            seq = flatten_raster(z, direction)
            Y, h, c = self.pgss.forward(seq.X, ths)
            out = out + unflatten_raster(Y, H, W, direction) / len(dirs)
            ihs = ihs + h / len(dirs)
            scans.append((direction, c))
        return out, ihs, (c_conv, scans, H, W)

    def backward(self, dout, d_ihs, cache):
        c_conv, scans, H, W = cache
        n = len(scans)
        dz = 0.0
        dths = None
        for direction, c in scans:
            dY = flatten_raster(dout / n, direction).X
            dX, dt = self.pgss.backward(dY, None if d_ihs is None else d_ihs / n, c)
            dz = dz + unflatten_raster(dX, H, W, direction)
            if dt is not None:
                dths = dt if dths is None else dths + dt
        return dout + self.conv.backward(dz, c_conv), dths


class MFCSPLayer(Module):
    """CSP split-transform-concat block with guided-scan bottleneck units.

    cv1 (1x1) -> split into halves a, b -> b runs through ``n_units`` guided units,
    every intermediate is kept -> concat [a, b, u_1, ..., u_k] -> cv2 (1x1).
    IHS is the final state of the last unit's scan.
    """

    def __init__(self, cin: int, cout: int, e: int, guide_dim: int, n_units: int = 2, hidden: int | None = None,
                 bidirectional: bool = False, rng=None, name: str = "csp", zero_guidance: bool = False):
        rng = rng if rng is not None else make_rng(0)
        self.cin, self.cout = cin, cout
        self.hidden = hidden if hidden is not None else max(cout // 2, 1)
        h = self.hidden
        self.cv1 = ConvAct(cin, 2 * h, 1, 1, rng, f"{name}.cv1")
        self.units = [GuidedBottleneck(h, e, guide_dim, bidirectional, rng, f"{name}.units.{i}", zero_guidance) for i in range(n_units)]
        self.cv2 = ConvAct((2 + n_units) * h, cout, 1, 1, rng, f"{name}.cv2")

    def forward(self, x, ths):
        if x.shape[-3] != self.cin:
            raise ShapeError("MFCSPLayer", x.shape, (self.cin,), "input channels")
        y1, c1 = self.cv1.forward(x)
        h = self.hidden
        parts = [y1[..., :h, :, :], y1[..., h:, :, :]]
        caches = []
        ihs = None
        for unit in self.units:
            out, ihs, c = unit.forward(parts[-1], ths)
            parts.append(out)
            caches.append(c)
        y, c2 = self.cv2.forward(np.concatenate(parts, axis=-3))
        return y, ihs, (c1, caches, c2)

    def backward(self, dy, d_ihs, cache):
        """Returns (dx, dTHS)."""
        c1, caches, c2 = cache
        h = self.hidden
        dcat = self.cv2.backward(dy, c2)
        dparts = [dcat[..., i * h:(i + 1) * h, :, :] for i in range(2 + len(self.units))]
        dths = None
        carry = dparts[-1]
        for i in range(len(self.units) - 1, -1, -1):
            dprev, dt = self.units[i].backward(carry, d_ihs if i == len(self.units) - 1 else None, caches[i])
            if dt is not None:
                dths = dt if dths is None else dths + dt
            carry = dparts[i + 1] + dprev
        dy1 = np.concatenate([dparts[0], carry], axis=-3)
        return self.cv1.backward(dy1, c1), dths


def mf_csplayer(fmap: np.ndarray, ths: np.ndarray | None, layer: MFCSPLayer):
    y, ihs, _ = layer.forward(fmap, ths)
    return y, ihs

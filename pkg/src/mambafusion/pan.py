"""Three-level fusion necks: MambaFusion-PAN and a VL-PAN style baseline.

MambaFusion-PAN runs three fusion stages:

1. text -> image: a TextMambaBlock yields (w1, THS1); the top-down path runs
   MF-CSP layers guided by THS1.
2. image -> text: the deepest top-down layer's IHS is scanned as a prefix by the
   serial-guided text block, yielding (w2, THS2).
3. text -> image: the bottom-up path runs MF-CSP layers guided by THS2.

The baseline keeps the same topology but fuses with max-sigmoid attention
(text -> image) and multi-head cross-attention from text queries to every
pixel (image -> text). It is a forward-only reconstruction used for
complexity comparison, not a replica of any released weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import ConvAct, MFCSPLayer
from .numerics import Module, Param, ShapeError, conv2d, linear, make_rng, sigmoid, tally, uniform_init
from .text import SGSSTextMambaBlock, TextMambaBlock

IHS_SOURCES = ("deepest", "mean-over-levels")


@dataclass
class PanConfig:
    channels: tuple[int, int, int] = (64, 64, 64)
    text_dim: int = 64
    text_state: int = 8
    image_state: int = 8
    units: int = 2
    text_depth: int = 2
    ihs_source: str = "deepest"
    bidirectional: bool = False
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3 or min(self.channels) < 2:
            raise ValueError(f"channels must be three extents >= 2, got {self.channels}")
        if self.ihs_source not in IHS_SOURCES:
            raise ValueError(f"ihs_source must be one of {IHS_SOURCES}, got {self.ihs_source!r}")
        if self.units < 1:
            raise ValueError("MambaFusion-PAN needs at least one bottleneck unit per layer")
        if self.ihs_source == "mean-over-levels" and self.channels[0] // 2 != self.channels[1] // 2:
            raise ValueError("mean-over-levels needs equal hidden widths on P3 and P4")

    @property
    def guide_dim(self) -> int:
        return self.text_dim * self.text_state

    @property
    def ihs_dim(self) -> int:
        return self.channels[1] // 2


@dataclass
class MultiScaleFeatures:
    P3: np.ndarray
    P4: np.ndarray
    P5: np.ndarray

    def __post_init__(self):
        h3, w3 = self.P3.shape[-2:]
        for name, m, f in (("P4", self.P4, 2), ("P5", self.P5, 4)):
            if m.shape[-2:] != (h3 // f, w3 // f) or h3 % f or w3 % f:
                raise ShapeError("MultiScaleFeatures", self.P3.shape, m.shape, f"{name} must be P3 / {f}")

    @property
    def levels(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.P3, self.P4, self.P5


@dataclass
class NeckOutput:
    P3: np.ndarray
    P4: np.ndarray
    P5: np.ndarray
    text: np.ndarray
    extras: dict = field(default_factory=dict)


def pyramid_shapes(image_size: int) -> list[tuple[int, int]]:
    """Spatial extents at strides 8, 16, 32."""
    return [(-(-image_size // s), -(-image_size // s)) for s in (8, 16, 32)]


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    *lead, H, W = dy.shape
    return dy.reshape(*lead, H // 2, 2, W // 2, 2).sum(axis=(-3, -1))


def _split(d: np.ndarray, c: int):
    return d[..., :c, :, :], d[..., c:, :, :]


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


class MambaFusionPAN(Module):
    def __init__(self, cfg: PanConfig, zero_guidance: bool = False):
        self.cfg = cfg
        rng = make_rng(cfg.seed)
        c3, c4, c5 = cfg.channels
        Dt, Et, Ei, g = cfg.text_dim, cfg.text_state, cfg.image_state, cfg.guide_dim

        def csp(cin, cout, name):
            return MFCSPLayer(cin, cout, Ei, g, cfg.units, None, cfg.bidirectional, rng, name, zero_guidance)

        self.text1 = TextMambaBlock(Dt, Et, cfg.text_depth, rng, "text1")
        self.td4 = csp(c5 + c4, c4, "td4")
        self.td3 = csp(c4 + c3, c3, "td3")
        self.sgss = SGSSTextMambaBlock(Dt, Et, cfg.ihs_dim, cfg.text_depth, rng, "sgss", zero_guidance)
        self.down3 = ConvAct(c3, c3, 3, 2, rng, "down3")
        self.bu4 = csp(c3 + c4, c4, "bu4")
        self.down4 = ConvAct(c4, c4, 3, 2, rng, "down4")
        self.bu5 = csp(c4 + c5, c5, "bu5")

    def forward(self, feats: MultiScaleFeatures, w0: np.ndarray, t2i: bool = True, i2t: bool = True, guided: bool = True):
        """Returns (NeckOutput, cache).

        ``t2i`` / ``i2t`` zero the guidance signal of the corresponding stages while
        keeping every computation in place; ``guided=False`` removes the guidance
        paths altogether (the text-free PAN).
        """
        c3, c4, c5 = self.cfg.channels
        P3, P4, P5 = feats.levels
        batch = P3.shape[:-3]
        if w0.shape[-1] != self.cfg.text_dim:
            raise ShapeError("MambaFusionPAN", w0.shape, (self.cfg.text_dim,), "text dim")
        broadcast = w0.shape[:-2] != batch
        w = np.broadcast_to(w0, batch + w0.shape[-2:]).copy() if broadcast else w0

        # stage 1: text -> image (top-down)
        w1, ths1, c_text1 = self.text1.forward(w)
        g1 = (ths1 if t2i else np.zeros_like(ths1)) if guided else None
        T4, ihs4, c_td4 = self.td4.forward(np.concatenate([upsample2(P5), P4], axis=-3), g1)
        T3, ihs3, c_td3 = self.td3.forward(np.concatenate([upsample2(T4), P3], axis=-3), g1)
        ihs = ihs4 if self.cfg.ihs_source == "deepest" else 0.5 * (ihs4 + ihs3)

        # stage 2: image -> text
        ihs_in = (ihs if i2t else np.zeros_like(ihs)) if guided else None
        w2, ths2, c_sgss = self.sgss.forward(w1, ihs_in)

        # stage 3: text -> image (bottom-up)
        g2 = (ths2 if t2i else np.zeros_like(ths2)) if guided else None
        D3, c_d3 = self.down3.forward(T3)
        B4, _, c_bu4 = self.bu4.forward(np.concatenate([D3, T4], axis=-3), g2)
        D4, c_d4 = self.down4.forward(B4)
        B5, _, c_bu5 = self.bu5.forward(np.concatenate([D4, P5], axis=-3), g2)

        out = NeckOutput(T3, B4, B5, w2, {"ths1": ths1, "ihs": ihs, "ths2": ths2})
        flags = (t2i and guided, i2t and guided)
        cache = (c_text1, c_td4, c_td3, c_sgss, c_d3, c_bu4, c_d4, c_bu5, flags, broadcast, (T3.shape, B4.shape, B5.shape, w2.shape))
        return out, cache

    def backward(self, dP3, dP4, dP5, dtext, cache):
        """Returns (MultiScaleFeatures of input grads, dw0)."""
        c_text1, c_td4, c_td3, c_sgss, c_d3, c_bu4, c_d4, c_bu5, (t2i, i2t), broadcast, shapes = cache
        c3, c4, c5 = self.cfg.channels
        dP3, dP4, dP5, dtext = (np.zeros(s) if d is None else d for d, s in zip((dP3, dP4, dP5, dtext), shapes))

        dx5b, dg2a = self.bu5.backward(dP5, None, c_bu5)
        dD4, dP5_in = _split(dx5b, c4)
        dB4 = dP4 + self.down4.backward(dD4, c_d4)
        dx4b, dg2b = self.bu4.backward(dB4, None, c_bu4)
        dD3, dT4 = _split(dx4b, c3)
        dT3 = dP3 + self.down3.backward(dD3, c_d3)
        dths2 = _add(dg2a, dg2b) if t2i else None

        dw1, dihs = self.sgss.backward(dtext, dths2, c_sgss)
        if not i2t:
            dihs = None
        mean = self.cfg.ihs_source != "deepest"
        dihs4 = None if dihs is None else (0.5 * dihs if mean else dihs)
        dihs3 = None if dihs is None or not mean else 0.5 * dihs

        dx3, dg1a = self.td3.backward(dT3, dihs3, c_td3)
        dup4, dP3_in = _split(dx3, c4)
        dT4 = dT4 + upsample2_backward(dup4)
        dx4, dg1b = self.td4.backward(dT4, dihs4, c_td4)
        dup5, dP4_in = _split(dx4, c5)
        dP5_in = dP5_in + upsample2_backward(dup5)
        dths1 = _add(dg1a, dg1b) if t2i else None

        dw, _ = self.text1.backward(dw1, dths1, c_text1)
        if broadcast:
            dw = dw.reshape(-1, *dw.shape[-2:]).sum(0)
        return MultiScaleFeatures(dP3_in, dP4_in, dP5_in), dw


def mambafusion_pan(feats: MultiScaleFeatures, w0: np.ndarray, neck: MambaFusionPAN, **flags) -> NeckOutput:
    out, _ = neck.forward(feats, w0, **flags)
    return out


# --- baseline -------------------------------------------------------------------


class PlainBottleneck(Module):
    """YOLOv8 bottleneck: two 3x3 convs with a residual connection."""

    def __init__(self, c: int, rng, name: str):
        self.cv1 = ConvAct(c, c, 3, 1, rng, f"{name}.cv1")
        self.cv2 = ConvAct(c, c, 3, 1, rng, f"{name}.cv2")

    def forward(self, x):
        y, _ = self.cv1.forward(x)
        y, _ = self.cv2.forward(y)
        return x + y


class MaxSigmoidAttention(Module):
    """Per-pixel, per-head gate sigmoid(max_t <embed(x), guide(w_t)> / sqrt(dh)) applied to proj(x)."""

    def __init__(self, c: int, text_dim: int, heads: int, rng, name: str):
        if c % heads:
            raise ValueError(f"channels {c} not divisible by heads {heads}")
        self.heads = heads
        self.guide_fc = Param(f"{name}.guide_fc", uniform_init(rng, (text_dim, c), text_dim))
        self.embed = Param(f"{name}.embed", uniform_init(rng, (c, c, 1, 1), c))
        self.proj = Param(f"{name}.proj", uniform_init(rng, (c, c, 3, 3), 9 * c))

    def gate(self, x: np.ndarray, text: np.ndarray) -> np.ndarray:
        *lead, C, H, W = x.shape
        hc = C // self.heads
        emb, _ = conv2d(x, self.embed)
        guide, _ = linear(text, self.guide_fc)
        emb = emb.reshape(*lead, self.heads, hc, H * W)
        guide = guide.reshape(*lead, guide.shape[-2], self.heads, hc)
        scores = np.einsum("...hcp,...thc->...hpt", emb, guide) / np.sqrt(hc)
        tally("attention", H * W * guide.shape[-3] * C)
        gate = sigmoid(scores.max(axis=-1))
        tally("elementwise", gate.size)
        return gate.reshape(*lead, self.heads, 1, H, W)

    def forward(self, x: np.ndarray, text: np.ndarray) -> np.ndarray:
        *lead, C, H, W = x.shape
        gate = self.gate(x, text)
        y, _ = conv2d(x, self.proj)
        tally("elementwise", y.size)
        return (y.reshape(*lead, self.heads, C // self.heads, H, W) * gate).reshape(x.shape)


class MaxSigmoidCSPLayer(Module):
    def __init__(self, cin: int, cout: int, text_dim: int, heads: int, n_units: int, rng, name: str):
        self.hidden = h = max(cout // 2, 1)
        self.cv1 = ConvAct(cin, 2 * h, 1, 1, rng, f"{name}.cv1")
        self.units = [PlainBottleneck(h, rng, f"{name}.units.{i}") for i in range(n_units)]
        self.attn = MaxSigmoidAttention(h, text_dim, heads, rng, f"{name}.attn")
        self.cv2 = ConvAct((3 + n_units) * h, cout, 1, 1, rng, f"{name}.cv2")

    def forward(self, x, text):
        y1, _ = self.cv1.forward(x)
        h = self.hidden
        parts = [y1[..., :h, :, :], y1[..., h:, :, :]]
        for unit in self.units:
            parts.append(unit.forward(parts[-1]))
        parts.append(self.attn.forward(parts[-1], text))
        y, _ = self.cv2.forward(np.concatenate(parts, axis=-3))
        return y


class PixelCrossAttention(Module):
    """Text queries attend to every pixel of every level (multi-head); residual update of the text."""

    def __init__(self, channels: tuple[int, ...], text_dim: int, heads: int, rng, name: str = "i2t"):
        if text_dim % heads:
            raise ValueError(f"text_dim {text_dim} not divisible by heads {heads}")
        self.heads = heads
        self.level_proj = [Param(f"{name}.level_proj.{i}", uniform_init(rng, (text_dim, c, 1, 1), c)) for i, c in enumerate(channels)]
        self.Wq = Param(f"{name}.Wq", uniform_init(rng, (text_dim, text_dim), text_dim))
        self.Wk = Param(f"{name}.Wk", uniform_init(rng, (text_dim, text_dim), text_dim))
        self.Wv = Param(f"{name}.Wv", uniform_init(rng, (text_dim, text_dim), text_dim))
        self.Wo = Param(f"{name}.Wo", uniform_init(rng, (text_dim, text_dim), text_dim))

    def attend(self, text: np.ndarray, pixels: np.ndarray) -> np.ndarray:
        """Multi-head attention core with projections; pixels is (..., N, text_dim)."""
        q, _ = linear(text, self.Wq)
        k, _ = linear(pixels, self.Wk)
        v, _ = linear(pixels, self.Wv)
        *lead, M, D = q.shape
        N = k.shape[-2]
        dh = D // self.heads
        q = q.reshape(*lead, M, self.heads, dh)
        k = k.reshape(*lead, N, self.heads, dh)
        v = v.reshape(*lead, N, self.heads, dh)
        s = np.einsum("...mhc,...nhc->...hmn", q, k) / np.sqrt(dh)
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        a = s / s.sum(axis=-1, keepdims=True)
        o = np.einsum("...hmn,...nhc->...mhc", a, v).reshape(*lead, M, D)
        tally("attention", 2 * M * N * D)
        tally("elementwise", a.size)
        out, _ = linear(o, self.Wo)
        return out

    def forward(self, text: np.ndarray, levels) -> np.ndarray:
        pix = []
        for W, x in zip(self.level_proj, levels):
            y, _ = conv2d(x, W)
            pix.append(np.swapaxes(y.reshape(*y.shape[:-2], -1), -1, -2))
        return text + self.attend(text, np.concatenate(pix, axis=-2))


class VLPAN(Module):
    def __init__(self, cfg: PanConfig):
        self.cfg = cfg
        rng = make_rng(cfg.seed)
        c3, c4, c5 = cfg.channels
        Dt, H, k = cfg.text_dim, cfg.heads, cfg.units

        def csp(cin, cout, name):
            return MaxSigmoidCSPLayer(cin, cout, Dt, H, k, rng, name)

        self.td4 = csp(c5 + c4, c4, "td4")
        self.td3 = csp(c4 + c3, c3, "td3")
        self.i2t = PixelCrossAttention((c3, c4, c5), Dt, H, rng)
        self.down3 = ConvAct(c3, c3, 3, 2, rng, "down3")
        self.bu4 = csp(c3 + c4, c4, "bu4")
        self.down4 = ConvAct(c4, c4, 3, 2, rng, "down4")
        self.bu5 = csp(c4 + c5, c5, "bu5")

    def forward(self, feats: MultiScaleFeatures, w0: np.ndarray) -> NeckOutput:
        P3, P4, P5 = feats.levels
        batch = P3.shape[:-3]
        w = np.broadcast_to(w0, batch + w0.shape[-2:])
        T4 = self.td4.forward(np.concatenate([upsample2(P5), P4], axis=-3), w)
        T3 = self.td3.forward(np.concatenate([upsample2(T4), P3], axis=-3), w)
        w2 = self.i2t.forward(w, (T3, T4, P5))
        D3, _ = self.down3.forward(T3)
        B4 = self.bu4.forward(np.concatenate([D3, T4], axis=-3), w2)
        D4, _ = self.down4.forward(B4)
        B5 = self.bu5.forward(np.concatenate([D4, P5], axis=-3), w2)
        return NeckOutput(T3, B4, B5, w2)


def baseline_vlpan(feats: MultiScaleFeatures, w0: np.ndarray, neck: VLPAN) -> NeckOutput:
    return neck.forward(feats, w0)


def random_features(cfg: PanConfig, image_size: int, rng: np.random.Generator, batch: tuple = ()) -> MultiScaleFeatures:
    maps = [rng.normal(size=batch + (c, h, w)) for c, (h, w) in zip(cfg.channels, pyramid_shapes(image_size))]
    return MultiScaleFeatures(*maps)

"""Shape-only multiply-accumulate accounting for both necks.

Counting contract (frozen):
    linear      L * Din * Dout
    conv        Ho * Wo * Cout * Cin * k * k          (bias adds free)
    scan        3 * L * D * E                          (decay, injection, output)
    discretize  2 * L * D * E                          (exp(delta*A), delta*B)
    attention   2 * M * N * D                          (scores and weighted sum)
    nonlinear   1 per element (SiLU, softplus, sigmoid, softmax, gating multiply)
Plain additions, concatenation, upsampling and max-reductions cost nothing.
Counts are MACs; multiply by ``FLOPS_PER_MAC`` for FLOPs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .pan import PanConfig, pyramid_shapes
from .ssm import flops_of_scan

FLOPS_PER_MAC = 2
VARIANTS = ("mambafusion", "vlpan")
CSV_HEADER = ["variant", "image_size", "text_len", "d_model", "flops_fusion", "flops_total"]
DEFAULT_RESOLUTIONS = (320, 416, 512, 640, 800, 960, 1280)
DEFAULT_TEXT_LENS = (4, 80, 1203)


@dataclass
class FlopsReport:
    variant: str
    image_size: int
    text_len: int
    modules: dict[str, int] = field(default_factory=dict)
    fusion_modules: set[str] = field(default_factory=set)

    def add(self, name: str, macs: int, fusion: bool = False) -> None:
        if macs < 0:
            raise ValueError(f"negative count for {name}")
        self.modules[name] = self.modules.get(name, 0) + int(macs)
        if fusion:
            self.fusion_modules.add(name)

    @property
    def total(self) -> int:
        return sum(self.modules.values())

    @property
    def fusion(self) -> int:
        return sum(v for k, v in self.modules.items() if k in self.fusion_modules)

    @property
    def image_len(self) -> int:
        return sum(h * w for h, w in pyramid_shapes(self.image_size))

    def __add__(self, other: "FlopsReport") -> "FlopsReport":
        out = FlopsReport(self.variant, self.image_size, self.text_len, dict(self.modules), set(self.fusion_modules))
        for k, v in other.modules.items():
            out.add(k, v, k in other.fusion_modules)
        return out


# --- primitives -----------------------------------------------------------------


def linear_macs(L: int, din: int, dout: int) -> int:
    return L * din * dout


def conv_macs(H: int, W: int, cin: int, cout: int, k: int, stride: int = 1) -> int:
    Ho, Wo = -(-H // stride), -(-W // stride)
    return Ho * Wo * cout * cin * k * k


def conv_act_macs(H: int, W: int, cin: int, cout: int, k: int, stride: int = 1) -> int:
    Ho, Wo = -(-H // stride), -(-W // stride)
    return conv_macs(H, W, cin, cout, k, stride) + Ho * Wo * cout


def discretize_macs(L: int, D: int, E: int) -> int:
    return 2 * L * D * E


def cross_attention_macs(n_query: int, n_key: int, d: int, heads: int) -> int:
    """Scores, softmax and weighted sum; bilinear in (n_query, n_key)."""
    return 2 * n_query * n_key * d + n_query * n_key * heads


# --- composite blocks -----------------------------------------------------------


def mamba_layer_macs(L: int, d: int, e: int) -> int:
    proj = linear_macs(L, d, d) * 3 + linear_macs(L, d, e) * 2
    return proj + L * d + discretize_macs(L, d, e) + flops_of_scan(L, d, e)


def text_block_macs(L: int, d: int, e: int, depth: int) -> int:
    return depth * mamba_layer_macs(L, d, e)


def pgss_macs(L: int, d: int, e: int, guide_dim: int | None = None) -> int:
    """Per-position projections and scan, plus the one-off THS projections (independent of L)."""
    per_pos = linear_macs(L, d, 2 * e + d) + L * d + discretize_macs(L, d, e) + flops_of_scan(L, d, e)
    return per_pos + (linear_macs(1, guide_dim, 2 * e + d) if guide_dim else 0)


def csp_conv_macs(H, W, cin, cout, units, block_convs=1, extra_parts=0):
    h = max(cout // 2, 1)
    return (
        conv_act_macs(H, W, cin, 2 * h, 1)
        + units * block_convs * conv_act_macs(H, W, h, h, 3)
        + conv_act_macs(H, W, (2 + units + extra_parts) * h, cout, 1)
    )


def max_sigmoid_macs(H: int, W: int, c: int, text_len: int, text_dim: int, heads: int) -> int:
    N = H * W
    return (
        linear_macs(text_len, text_dim, c)
        + conv_macs(H, W, c, c, 1)
        + N * text_len * c
        + N * heads
        + conv_macs(H, W, c, c, 3)
        + N * c
    )


# --- necks ----------------------------------------------------------------------


def _levels(cfg: PanConfig, image_size: int):
    (h3, w3), (h4, w4), (h5, w5) = pyramid_shapes(image_size)
    c3, c4, c5 = cfg.channels
    # (name, H, W, cin, cout) in execution order, tagged by stage
    td = [("td4", h4, w4, c5 + c4, c4), ("td3", h3, w3, c4 + c3, c3)]
    bu = [("bu4", h4, w4, c3 + c4, c4), ("bu5", h5, w5, c4 + c5, c5)]
    downs = [("down3", h3, w3, c3), ("down4", h4, w4, c4)]
    return td, bu, downs


def mambafusion_stages(image_size: int, text_len: int, cfg: PanConfig) -> list[FlopsReport]:
    td, bu, downs = _levels(cfg, image_size)
    Dt, Et, Ei, g = cfg.text_dim, cfg.text_state, cfg.image_state, cfg.guide_dim
    ndir = 2 if cfg.bidirectional else 1

    def csp(rep, name, H, W, cin, cout):
        h = max(cout // 2, 1)
        rep.add(f"{name}.conv", csp_conv_macs(H, W, cin, cout, cfg.units))
        rep.add(f"{name}.pgss", cfg.units * ndir * pgss_macs(H * W, h, Ei, g), fusion=True)

    s1 = FlopsReport("mambafusion", image_size, text_len)
    s1.add("text1", text_block_macs(text_len, Dt, Et, cfg.text_depth))
    for level in td:
        csp(s1, *level)

    s2 = FlopsReport("mambafusion", image_size, text_len)
    s2.add("sgss.guidance", linear_macs(Ei, cfg.ihs_dim, Dt) + text_block_macs(Ei, Dt, Et, cfg.text_depth), fusion=True)
    s2.add("sgss.text", text_block_macs(text_len, Dt, Et, cfg.text_depth))

    s3 = FlopsReport("mambafusion", image_size, text_len)
    for (dname, H, W, c), level in zip(downs, bu):
        s3.add(dname, conv_act_macs(H, W, c, c, 3, 2))
        csp(s3, *level)
    return [s1, s2, s3]


def vlpan_stages(image_size: int, text_len: int, cfg: PanConfig) -> list[FlopsReport]:
    td, bu, downs = _levels(cfg, image_size)
    Dt, heads = cfg.text_dim, cfg.heads

    def csp(rep, name, H, W, cin, cout):
        h = max(cout // 2, 1)
        rep.add(f"{name}.conv", csp_conv_macs(H, W, cin, cout, cfg.units, block_convs=2, extra_parts=1))
        rep.add(f"{name}.attn", max_sigmoid_macs(H, W, h, text_len, Dt, heads), fusion=True)

    s1 = FlopsReport("vlpan", image_size, text_len)
    for level in td:
        csp(s1, *level)

    s2 = FlopsReport("vlpan", image_size, text_len)
    shapes = pyramid_shapes(image_size)
    N = sum(h * w for h, w in shapes)
    level_proj = sum(conv_macs(h, w, c, Dt, 1) for (h, w), c in zip(shapes, cfg.channels))
    s2.add("i2t.proj", level_proj + 2 * linear_macs(N, Dt, Dt) + 2 * linear_macs(text_len, Dt, Dt), fusion=True)
    s2.add("i2t.attention", cross_attention_macs(text_len, N, Dt, heads), fusion=True)

    s3 = FlopsReport("vlpan", image_size, text_len)
    for (dname, H, W, c), level in zip(downs, bu):
        s3.add(dname, conv_act_macs(H, W, c, c, 3, 2))
        csp(s3, *level)
    return [s1, s2, s3]


def count_stages(variant: str, image_size: int, text_len: int, cfg: PanConfig) -> list[FlopsReport]:
    if variant == "mambafusion":
        return mambafusion_stages(image_size, text_len, cfg)
    if variant == "vlpan":
        return vlpan_stages(image_size, text_len, cfg)
    raise ValueError(f"unknown neck variant {variant!r}; expected one of {VARIANTS}")


def count_neck(variant: str, image_size: int, text_len: int, cfg: PanConfig | None = None) -> FlopsReport:
    cfg = cfg or PanConfig()
    if image_size < 1 or text_len < 0:
        raise ValueError(f"invalid shapes image_size={image_size} text_len={text_len}")
    s1, s2, s3 = count_stages(variant, image_size, text_len, cfg)
    return s1 + s2 + s3


def sweep(resolutions: Iterable[int], text_lens: Iterable[int], cfg: PanConfig | None = None) -> list[dict]:
    """CSV rows ordered by variant, resolution, text length; counts are MACs as-is."""
    resolutions, text_lens = sorted(set(resolutions)), sorted(set(text_lens))
    if not resolutions or not text_lens:
        raise ValueError("sweep needs at least one resolution and one text length")
    cfg = cfg or PanConfig()
    rows = []
    for variant in VARIANTS:
        for r in resolutions:
            for m in text_lens:
                rep = count_neck(variant, r, m, cfg)
                rows.append({
                    "variant": variant,
                    "image_size": r,
                    "text_len": m,
                    "d_model": cfg.channels[0],
                    "flops_fusion": rep.fusion,
                    "flops_total": rep.total,
                })
    return rows


def write_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        w.writeheader()
        w.writerows(rows)

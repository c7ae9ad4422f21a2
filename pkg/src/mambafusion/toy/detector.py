"""Tiny open-vocabulary detector: conv backbone, MambaFusion-PAN neck, region-text head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..fusion import ConvAct
from ..numerics import Module, Param, conv2d, conv2d_backward, make_rng, sigmoid, uniform_init
from ..pan import MambaFusionPAN, MultiScaleFeatures, PanConfig
from ..text import embed_tokens
from .data import GroundedObject

PRIOR_PROB = 0.01
# rescales uniform(+-1/sqrt(fan_in)) conv weights to He-uniform variance; there is no normalization layer
CONV_GAIN = np.sqrt(6.0)


class Backbone(Module):
    """Five stride-2 conv stages; the last three outputs are P3, P4, P5 (strides 8, 16, 32)."""

    def __init__(self, width: int, rng):
        self.stages = [
            ConvAct(3, 16, 3, 2, rng, "backbone.0"),
            ConvAct(16, width, 3, 2, rng, "backbone.1"),
            ConvAct(width, width, 3, 2, rng, "backbone.2"),
            ConvAct(width, width, 3, 2, rng, "backbone.3"),
            ConvAct(width, width, 3, 2, rng, "backbone.4"),
        ]

    def forward(self, x):
        caches, outs = [], []
        for stage in self.stages:
            x, c = stage.forward(x)
            caches.append(c)
            outs.append(x)
        return MultiScaleFeatures(*outs[2:]), caches

    def backward(self, dfeats: MultiScaleFeatures, caches):
        d = 0.0
        grads = {2: dfeats.P3, 3: dfeats.P4, 4: dfeats.P5}
        for i in range(len(self.stages) - 1, -1, -1):
            d = d + grads.get(i, 0.0)
            d = self.stages[i].backward(d, caches[i])


class ContrastiveHead(Module):
    """logits[cell, phrase] = <proj(cell feature), text[phrase]> / sqrt(D_t) + bias; plus 1x1 box regression."""

    def __init__(self, channels: int, text_dim: int, rng):
        self.scale = 1.0 / np.sqrt(text_dim)
        self.cls_proj = Param("head.cls_proj", uniform_init(rng, (text_dim, channels, 1, 1), channels))
        self.cls_bias = Param("head.cls_bias", np.array([-np.log((1 - PRIOR_PROB) / PRIOR_PROB)]))
        self.box_W = Param("head.box_W", uniform_init(rng, (4, channels, 1, 1), channels))
        self.box_b = Param("head.box_b", np.array([0.5, 0.5, 0.25, 0.25]))

    def forward(self, fmap: np.ndarray, text: np.ndarray):
        f, c_f = conv2d(fmap, self.cls_proj)
        cells = np.swapaxes(f.reshape(*f.shape[:-2], -1), -1, -2)  # (..., G, D_t)
        logits = cells @ np.swapaxes(text, -1, -2) * self.scale + self.cls_bias.value
        box, c_b = conv2d(fmap, self.box_W, self.box_b)
        box = np.swapaxes(box.reshape(*box.shape[:-2], -1), -1, -2)  # (..., G, 4)
        return logits, box, (c_f, c_b, cells, text, f.shape)

    def backward(self, dlogits, dbox, cache):
        """Returns (dfmap, dtext)."""
        c_f, c_b, cells, text, fshape = cache
        self.cls_bias.grad += dlogits.sum()
        dcells = dlogits @ text * self.scale
        dtext = np.swapaxes(dlogits, -1, -2) @ cells * self.scale
        df = np.swapaxes(dcells, -1, -2).reshape(fshape)
        dfmap = conv2d_backward(df, c_f)
        dbox = np.swapaxes(dbox, -1, -2).reshape(*dbox.shape[:-2], 4, *fshape[-2:])
        dfmap = dfmap + conv2d_backward(dbox, c_b)
        return dfmap, dtext


@dataclass
class DetectorConfig:
    width: int = 32
    state: int = 8
    text_dim: int = 32
    text_state: int = 8
    units: int = 2
    text_depth: int = 2
    grid: int = 8
    image_size: int = 64
    seed: int = 0

    def pan_config(self) -> PanConfig:
        return PanConfig(
            channels=(self.width,) * 3,
            text_dim=self.text_dim,
            text_state=self.text_state,
            image_state=self.state,
            units=self.units,
            text_depth=self.text_depth,
            seed=self.seed,
        )


class Detector(Module):
    def __init__(self, cfg: DetectorConfig, vocab_size: int):
        self.cfg = cfg
        rng = make_rng([cfg.seed, 1])
        self.backbone = Backbone(cfg.width, rng)
        self.neck = MambaFusionPAN(cfg.pan_config())
        self.head = ContrastiveHead(cfg.width, cfg.text_dim, rng)
        for name, p in self.named_params():
            if p.value.ndim == 4 and not name.startswith("head."):
                p.value *= CONV_GAIN
        # frozen stand-in for a pretrained text encoder; excluded from params()
        self.token_table = make_rng([cfg.seed, 2]).normal(size=(vocab_size, cfg.text_dim))

    def embed(self, phrase_tokens) -> np.ndarray:
        w0, _ = embed_tokens(phrase_tokens, Param("token_table", self.token_table))
        return w0

    def forward(self, images: np.ndarray, w0: np.ndarray, t2i=True, i2t=True, guided=True):
        feats, c_bb = self.backbone.forward(images)
        out, c_neck = self.neck.forward(feats, w0, t2i=t2i, i2t=i2t, guided=guided)
        logits, box, c_head = self.head.forward(out.P3, out.text)
        return logits, box, (c_bb, c_neck, c_head)

    def backward(self, dlogits, dbox, cache):
        c_bb, c_neck, c_head = cache
        dP3, dtext = self.head.backward(dlogits, dbox, c_head)
        dfeats, _ = self.neck.backward(dP3, None, None, dtext, c_neck)
        self.backbone.backward(dfeats, c_bb)


# --- targets and losses ---------------------------------------------------------


def build_targets(objects_per_image: list[list[GroundedObject]], query_ids: np.ndarray, grid: int, image_size: int):
    """One-hot class targets at each object's center cell, box targets and a positive mask."""
    N, K = query_ids.shape
    G = grid * grid
    cell = image_size / grid
    cls_t = np.zeros((N, G, K))
    box_t = np.zeros((N, G, 4))
    pos = np.zeros((N, G), dtype=bool)
    for n, objs in enumerate(objects_per_image):
        col = {int(p): k for k, p in enumerate(query_ids[n])}
        for o in objs:
            gy, gx = int(o.cy // cell), int(o.cx // cell)
            g = gy * grid + gx
            cls_t[n, g, col[o.phrase]] = 1.0
            box_t[n, g] = (o.cx / cell - gx, o.cy / cell - gy, o.w / image_size, o.h / image_size)
            pos[n, g] = True
    return cls_t, box_t, pos


def detection_loss(logits, box, cls_t, box_t, pos):
    """Sigmoid BCE over all cells x phrases + L1 box loss on positive cells, both normalized by the positive count.

    Returns (loss, dlogits, dbox).
    """
    npos = max(int(pos.sum()), 1)
    bce = np.maximum(logits, 0) - logits * cls_t + np.log1p(np.exp(-np.abs(logits)))
    cls_loss = bce.sum() / npos
    dlogits = (sigmoid(logits) - cls_t) / npos
    diff = (box - box_t) * pos[..., None]
    box_loss = np.abs(diff).sum() / npos
    dbox = np.sign(diff) / npos
    return cls_loss + box_loss, dlogits, dbox


def decode_boxes(box: np.ndarray, grid: int, image_size: int) -> np.ndarray:
    """(..., G, 4) deltas -> (..., G, 4) x1, y1, x2, y2 in pixels."""
    cell = image_size / grid
    g = np.arange(grid * grid)
    gy, gx = g // grid, g % grid
    cx = (gx + box[..., 0]) * cell
    cy = (gy + box[..., 1]) * cell
    w = np.abs(box[..., 2]) * image_size
    h = np.abs(box[..., 3]) * image_size
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)

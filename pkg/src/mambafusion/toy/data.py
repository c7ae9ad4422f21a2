"""Synthetic colored-shapes grounding data.

Each image is a noisy background with 1-3 solid shapes. A phrase is a
(color, shape) pair; its token ids index a 7-entry vocabulary
(4 color words followed by 3 shape words).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import make_rng, split_seed

COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}
SHAPES = ("square", "circle", "triangle")
VOCAB = list(COLORS) + list(SHAPES)
PHRASES = [(c, s) for c in COLORS for s in SHAPES]
PHRASE_TOKENS = [[VOCAB.index(c), VOCAB.index(s)] for c, s in PHRASES]
NUM_CLASSES = len(PHRASES)


@dataclass
class GroundedObject:
    phrase: int
    cx: float
    cy: float
    w: float
    h: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W)
    objects: list[GroundedObject]


def phrase_name(idx: int) -> str:
    return " ".join(PHRASES[idx])


def _mask(shape: str, cx: float, cy: float, size: float, H: int, W: int) -> np.ndarray:
    y, x = np.mgrid[0:H, 0:W] + 0.5
    r = size / 2
    if shape == "square":
        return (np.abs(x - cx) <= r) & (np.abs(y - cy) <= r)
    if shape == "circle":
        return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    # apex up, base at the bottom of the box
    top = cy - r
    return (y >= top) & (y <= cy + r) & (np.abs(x - cx) <= (y - top) / 2)


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def gen_dataset(seed, n: int, H: int = 64, W: int = 64, max_objects: int = 3, grid: int = 8,
                min_size: int = 12, max_size: int = 20) -> list[SyntheticSample]:
    """Deterministic per seed. Object centers never share a grid cell."""
    if n < 1:
        raise ValueError(f"gen_dataset: n must be >= 1, got {n}")
    if H < max_size or W < max_size or H % grid or W % grid:
        raise ValueError(f"gen_dataset: degenerate extents H={H} W={W} for grid {grid} and size {max_size}")
    rng = make_rng(seed)
    cell_h, cell_w = H / grid, W / grid
    out = []
    for _ in range(n):
        img = rng.uniform(0.0, 0.35, size=(3, H, W))
        objects: list[GroundedObject] = []
        cells = set()
        for _ in range(int(rng.integers(1, max_objects + 1))):
            cls = int(rng.integers(NUM_CLASSES))
            for _attempt in range(20):
                size = float(rng.integers(min_size, max_size + 1))
                cx = float(rng.uniform(size / 2, W - size / 2))
                cy = float(rng.uniform(size / 2, H - size / 2))
                cell = (int(cy // cell_h), int(cx // cell_w))
                cand = GroundedObject(cls, cx, cy, size, size)
                if cell not in cells and all(_iou(cand.box, o.box) < 0.2 for o in objects):
                    break
            else:
                continue
            cells.add(cell)
            color, shape = PHRASES[cls]
            m = _mask(shape, cx, cy, size, H, W)
            img[:, m] = np.asarray(COLORS[color])[:, None]
            objects.append(cand)
        if not objects:  # first placement always succeeds on an empty canvas; kept as a guard
            raise RuntimeError("failed to place any object")
        out.append(SyntheticSample(img, objects))
    return out


def make_splits(seed: int, n_train: int, n_val: int, **kw) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    """Train and validation sets from two independent child seeds."""
    s_train, s_val = split_seed(seed, 2)
    return gen_dataset(s_train, n_train, **kw), gen_dataset(s_val, n_val, **kw)

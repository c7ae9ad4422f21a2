"""Training, evaluation and the fusion-flag ablation for the toy detector."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..numerics import count_macs, make_rng
from .data import NUM_CLASSES, PHRASE_TOKENS, SyntheticSample, make_splits
from .detector import Detector, DetectorConfig, build_targets, decode_boxes, detection_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "loss", "val_acc"]
ABLATION_HEADER = ["t2i", "i2t", "seed", "val_acc", "toy_ap"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"loss became {loss} at step {step}")


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 500
    lr: float = 0.05
    batch_size: int = 8
    t2i: bool = True
    i2t: bool = True
    guided: bool = True
    n_train: int = 512
    n_val: int = 128
    log_every: int = 50
    clip_norm: float = 5.0  # global gradient-norm clip; 0 disables
    num_query: int = 0  # phrases per image; 0 queries the whole vocabulary
    width: int = 32
    state: int = 8
    text_dim: int = 32
    text_state: int = 8
    units: int = 2
    text_depth: int = 2
    image_size: int = 64
    grid: int = 8

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid TrainConfig: steps >= 0, batch_size >= 1 and lr > 0 required")
        if self.num_query and not 3 <= self.num_query <= NUM_CLASSES:
            raise ValueError(f"num_query must be 0 or in [3, {NUM_CLASSES}]")

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(self.width, self.state, self.text_dim, self.text_state, self.units,
                              self.text_depth, self.grid, self.image_size, self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: Detector
    history: list[dict]
    metrics: dict
    val: list[SyntheticSample]


def query_sets(samples: list[SyntheticSample], num_query: int, rng: np.random.Generator) -> np.ndarray:
    """Per-image phrase ids: every present class plus random negatives, shuffled."""
    if not num_query:
        return np.tile(np.arange(NUM_CLASSES), (len(samples), 1))
    out = np.empty((len(samples), num_query), dtype=int)
    for i, s in enumerate(samples):
        present = sorted({o.phrase for o in s.objects})
        rest = [c for c in range(NUM_CLASSES) if c not in present]
        neg = rng.choice(rest, size=num_query - len(present), replace=False)
        out[i] = rng.permutation(np.concatenate([present, neg]))
    return out


def _text(model: Detector, query: np.ndarray, cache: dict) -> np.ndarray:
    key = tuple(map(tuple, query))
    if key not in cache:
        cache[key] = np.stack([model.embed([PHRASE_TOKENS[p] for p in row]) for row in query])
    return cache[key]


def _flags(cfg: TrainConfig) -> dict:
    return {"t2i": cfg.t2i, "i2t": cfg.i2t, "guided": cfg.guided}


def predict(model: Detector, samples: list[SyntheticSample], query: np.ndarray, cfg: TrainConfig, batch: int = 32):
    logits, boxes = [], []
    for i in range(0, len(samples), batch):
        imgs = np.stack([s.image for s in samples[i:i + batch]])
        q = query[i:i + batch]
        w0 = np.stack([model.embed([PHRASE_TOKENS[p] for p in row]) for row in q])
        lg, bx, _ = model.forward(imgs, w0, **_flags(cfg))
        logits.append(lg)
        boxes.append(bx)
    return np.concatenate(logits), np.concatenate(boxes)


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def average_precision(scores, matched, n_gt: int) -> float:
    """All-point interpolated AP from detections sorted by descending score."""
    if n_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(matched, dtype=float)[order]
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate(model: Detector, samples: list[SyntheticSample], cfg: TrainConfig, query: np.ndarray | None = None,
             top_k: int = 10, iou_thr: float = 0.5) -> dict:
    """Cell-grounding accuracy and toy AP@0.5 (mean over classes with ground truth)."""
    if query is None:
        query = query_sets(samples, cfg.num_query, make_rng([cfg.seed, 3]))
    logits, box = predict(model, samples, query, cfg)
    cell = cfg.image_size / cfg.grid
    hits = total = 0
    for n, s in enumerate(samples):
        for o in s.objects:
            g = int(o.cy // cell) * cfg.grid + int(o.cx // cell)
            hits += int(query[n, int(np.argmax(logits[n, g]))] == o.phrase)
            total += 1
    boxes = decode_boxes(box, cfg.grid, cfg.image_size)
    dets = {c: ([], []) for c in range(NUM_CLASSES)}
    n_gt = np.zeros(NUM_CLASSES, dtype=int)
    for n, s in enumerate(samples):
        for o in s.objects:
            n_gt[o.phrase] += 1
        for k, c in enumerate(query[n]):
            sc = logits[n, :, k]
            top = np.argsort(-sc, kind="stable")[:top_k]
            gts = [o for o in s.objects if o.phrase == c]
            used = [False] * len(gts)
            for g in top:
                best, bj = 0.0, -1
                for j, o in enumerate(gts):
                    iou = _box_iou(boxes[n, g], o.box)
                    if not used[j] and iou > best:
                        best, bj = iou, j
                ok = best >= iou_thr
                if ok:
                    used[bj] = True
                dets[c][0].append(sc[g])
                dets[c][1].append(ok)
    aps = [average_precision(*dets[c], n_gt[c]) for c in range(NUM_CLASSES) if n_gt[c]]
    return {"val_acc": hits / total, "toy_ap": float(np.mean(aps))}


def train(cfg: TrainConfig, metrics_path: str | Path | None = None) -> TrainResult:
    """Plain SGD on BCE + L1; logs (step, loss, val_acc) every ``log_every`` steps."""
    train_set, val_set = make_splits(cfg.seed, cfg.n_train, cfg.n_val, H=cfg.image_size, W=cfg.image_size, grid=cfg.grid)
    model = Detector(cfg.detector_config(), vocab_size=7)
    params = model.params()
    rng = make_rng([cfg.seed, 4])
    val_query = query_sets(val_set, cfg.num_query, make_rng([cfg.seed, 3]))
    history = []
    text_cache: dict = {}
    for step in range(cfg.steps + 1):
        idx = rng.choice(len(train_set), size=cfg.batch_size, replace=False)
        batch = [train_set[i] for i in idx]
        query = query_sets(batch, cfg.num_query, rng)
        imgs = np.stack([s.image for s in batch])
        w0 = _text(model, query, text_cache)
        cls_t, box_t, pos = build_targets([s.objects for s in batch], query, cfg.grid, cfg.image_size)
        try:
            logits, box, cache = model.forward(imgs, w0, **_flags(cfg))
        except FloatingPointError as exc:
            raise TrainingDiverged(step, float("nan")) from exc
        loss, dlogits, dbox = detection_loss(logits, box, cls_t, box_t, pos)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        if step % cfg.log_every == 0 or step == cfg.steps:
            acc = evaluate(model, val_set, cfg, val_query)["val_acc"]
            history.append({"step": step, "loss": float(loss), "val_acc": acc})
            log.info("step %d loss %.5f val_acc %.4f", step, loss, acc)
        if step == cfg.steps:
            break
        for p in params:
            p.zero_grad()
        model.backward(dlogits, dbox, cache)
        scale = 1.0
        if cfg.clip_norm:
            norm = np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
        for p in params:
            p.value -= (cfg.lr * scale) * p.grad
    if metrics_path is not None:
        write_metrics(history, metrics_path)
    metrics = evaluate(model, val_set, cfg, val_query)
    return TrainResult(model, history, metrics, val_set)


def write_metrics(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for h in history:
            w.writerow([h["step"], repr(h["loss"]), repr(h["val_acc"])])


ABLATION_GRID = ((False, False), (False, True), (True, False), (True, True))


def ablate(base: TrainConfig, seeds=(0, 1, 2), on_result=None) -> list[dict]:
    """Train every (t2i, i2t) combination for each seed; one row per run.

    ``on_result(cfg, result)`` is called after each run, e.g. to keep histories.
    """
    rows = []
    for t2i, i2t in ABLATION_GRID:
        for seed in seeds:
            cfg = TrainConfig(**{**asdict(base), "t2i": t2i, "i2t": i2t, "seed": seed})
            res = train(cfg)
            if on_result is not None:
                on_result(cfg, res)
            rows.append({"t2i": int(t2i), "i2t": int(i2t), "seed": seed, **res.metrics})
            log.info("ablation t2i=%d i2t=%d seed=%d -> %s", t2i, i2t, seed, res.metrics)
    return rows


def write_ablation(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in ABLATION_HEADER})


def model_macs(cfg: TrainConfig) -> int:
    """MACs of one single-image forward, tallied from the ops actually executed."""
    model = Detector(cfg.detector_config(), vocab_size=7)
    img = np.zeros((1, 3, cfg.image_size, cfg.image_size))
    k = cfg.num_query or NUM_CLASSES
    w0 = np.stack([model.embed(PHRASE_TOKENS[:k])])
    with count_macs() as c:
        model.forward(img, w0, **_flags(cfg))
    return sum(c.values())

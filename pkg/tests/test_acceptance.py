"""Acceptance criteria, one test per criterion; each prints a single PASS/FAIL line."""

import subprocess
import sys
import time
from fractions import Fraction

import numpy as np

from conftest import record
from mambafusion.equivalence import scan_equivalence
from mambafusion.flops import DEFAULT_RESOLUTIONS, count_neck, cross_attention_macs, sweep
from mambafusion.fusion import PGSS, pgss
from mambafusion.gradsuite import run_suite
from mambafusion.numerics import linear, make_rng
from mambafusion.pan import MambaFusionPAN, PanConfig, pyramid_shapes, random_features
from mambafusion.text import SGSSTextMambaBlock, ihs_to_tokens
from mambafusion.toy.train import ABLATION_GRID, TrainConfig, model_macs
from mambafusion.toy.detector import Detector


def test_criterion_1_scan_equivalence():
    t = time.perf_counter()
    rep = scan_equivalence(seed=0, n=100)
    secs = time.perf_counter() - t
    ok = rep.max_abs_diff < 1e-10 and secs < 10
    record(1, "scan equivalence", ok, f"max abs diff {rep.max_abs_diff:.2e} over {rep.instances} instances in {secs:.2f}s")
    assert ok


def test_criterion_2_gradient_suite():
    t = time.perf_counter()
    reports = list(run_suite(seed=0, tol=1e-5, end_to_end_tol=1e-4, eps=1e-6))
    secs = time.perf_counter() - t
    ops = [r for name, r, _ in reports if name != "mambafusion_pan"]
    e2e = [r for name, r, _ in reports if name == "mambafusion_pan"][0]
    ok = all(r.passed for r in ops) and e2e.passed and secs < 120
    worst_op = max(r.max_rel_err for r in ops)
    record(2, "gradient suite", ok,
           f"{len(ops)} ops worst rel err {worst_op:.2e} (<1e-5), end-to-end {e2e.max_rel_err:.2e} (<1e-4), {secs:.1f}s")
    assert ok


def test_criterion_3_guidance_off_reductions():
    rng = make_rng(0)
    # PGSS with zero THS and zero guidance weights vs unguided scan
    op = PGSS(4, 3, 6, rng, zero_guidance=True)
    X = rng.normal(size=(12, 4))
    Yg, hg = pgss(X, np.zeros((2, 3)), op)
    Yu, hu = pgss(X, None, op)
    d1 = max(np.max(np.abs(Yg - Yu)), np.max(np.abs(hg - hu)))
    # SGSS with zero IHS vs the plain text block
    sg = SGSSTextMambaBlock(6, 3, 5, rng=rng)
    w0 = rng.normal(size=(4, 6))
    w_s, h_s, _ = sg.forward(w0, np.zeros((5, 3)))
    w_p, h_p, _ = sg.block.forward(w0)
    d2 = max(np.max(np.abs(w_s - w_p)), np.max(np.abs(h_s - h_p)))
    # neck with zeroed guidance vs the text-free PAN
    cfg = PanConfig(channels=(8, 8, 8), text_dim=8, text_state=4, image_state=4, seed=3)
    neck = MambaFusionPAN(cfg, zero_guidance=True)
    feats = random_features(cfg, 64, rng)
    zero_text = np.zeros((3, 8))
    a, _ = neck.forward(feats, zero_text)
    b, _ = neck.forward(feats, zero_text, guided=False)
    d3 = max(float(np.max(np.abs(x - y))) for x, y in ((a.P3, b.P3), (a.P4, b.P4), (a.P5, b.P5)))
    ok = max(d1, d2, d3) < 1e-12
    record(3, "guidance-off reductions", ok, f"pgss {d1:.1e}, sgss {d2:.1e}, neck {d3:.1e} (<1e-12)")
    assert ok


def test_criterion_4_sgss_prefix_equivalence():
    worst = 0.0
    for seed in range(50):
        rng = make_rng(seed)
        sg = SGSSTextMambaBlock(6, 3, 5, depth=2, rng=rng)
        w0, ihs = rng.normal(size=(4, 6)), rng.normal(size=(5, 3))
        w1, ths, _ = sg.forward(w0, ihs)
        tokens, _ = linear(ihs_to_tokens(ihs), sg.proj)
        full, h, _ = sg.block.forward(np.concatenate([tokens, w0]))
        worst = max(worst, float(np.max(np.abs(full[tokens.shape[0]:] - w1))), float(np.max(np.abs(h - ths))))
    ok = worst < 1e-12
    record(4, "SGSS prefix equivalence", ok, f"max abs diff {worst:.1e} over 50 seeds (<1e-12)")
    assert ok


def _fit(N, y):
    slope, icpt = np.polyfit(N, y, 1)
    r2 = 1 - np.sum((y - (slope * N + icpt)) ** 2) / np.sum((y - y.mean()) ** 2)
    return slope, r2


def test_criterion_5_complexity():
    t = time.perf_counter()
    sizes = (64, 128, 256, 320, 512, 640, 1280)
    N = np.array([sum(h * w for h, w in pyramid_shapes(s)) for s in sizes], dtype=float)
    fits, exact = [], []
    for M in (4, 1203):
        f = [count_neck("mambafusion", s, M).fusion for s in sizes]
        fits.append(_fit(N, np.array(f, dtype=float)))
        exact.append(Fraction(f[-1] - f[0], int(N[-1] - N[0])))
    a_ok = min(r2 for _, r2 in fits) > 0.999 and exact[0] == exact[1]
    b_vals = [(cross_attention_macs(n, m, 64, 4), cross_attention_macs(2 * n, 2 * m, 64, 4)) for n, m in ((8400, 80), (2100, 4))]
    b_ok = all(big == 4 * small for small, big in b_vals)
    rows = sweep(DEFAULT_RESOLUTIONS, [80])
    tot = {(r["variant"], r["image_size"]): r["flops_total"] for r in rows}
    cheaper = [s for s in DEFAULT_RESOLUTIONS if tot["mambafusion", s] < tot["vlpan", s]]
    beyond = next((s for s in DEFAULT_RESOLUTIONS if all(x in cheaper for x in DEFAULT_RESOLUTIONS if x >= s)), None)
    c_ok = beyond is not None
    secs = time.perf_counter() - t
    ok = a_ok and b_ok and c_ok and secs < 5
    record(5, "complexity", ok,
           f"(a) R2 {min(r2 for _, r2 in fits):.6f}, slopes {float(exact[0]):.1f} == {float(exact[1]):.1f}; "
           f"(b) 4x exact {b_ok}; (c) mambafusion cheaper from {beyond}px (L_t=80); {secs:.2f}s")
    assert ok


def test_criterion_6_ablation_direction(ablation):
    rows, _, secs = ablation
    mean = {(t2i, i2t): np.mean([r["val_acc"] for r in rows if (r["t2i"], r["i2t"]) == (int(t2i), int(i2t))])
            for t2i, i2t in ABLATION_GRID}
    base = TrainConfig()
    counts = set()
    for t2i, i2t in ABLATION_GRID:
        cfg = TrainConfig(t2i=t2i, i2t=i2t)
        counts.add((Detector(cfg.detector_config(), 7).num_params(), model_macs(cfg)))
    ok = mean[True, True] >= mean[False, False] and len(counts) == 1 and len(rows) == 12 and secs < 1200
    (params, macs), = counts if len(counts) == 1 else [(-1, -1)]
    record(6, "ablation direction", ok,
           f"val_acc (on,on) {mean[True, True]:.4f} vs (off,off) {mean[False, False]:.4f}; "
           f"(off,on) {mean[False, True]:.4f}, (on,off) {mean[True, False]:.4f}; "
           f"params {params} / MACs {macs} identical across configs; {secs:.0f}s for {len(rows)} runs (steps={base.steps})")
    assert ok


def test_criterion_7_determinism(tmp_path):
    outs = []
    for i in range(2):
        path = tmp_path / f"metrics{i}.csv"
        proc = subprocess.run([sys.executable, "-m", "mambafusion", "train-toy", "--seed", "0", "--out", str(path)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append(path.read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    record(7, "determinism", ok, f"two train-toy --seed 0 runs, metrics CSVs {'bitwise identical' if ok else 'DIFFER'} ({len(outs[0])} bytes)")
    assert ok

"""Sequential vs chunked vs naive-oracle scan comparison on random instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import make_rng
from .reference import naive_scan
from .ssm import DiscretizedParams, discretize, selective_scan, selective_scan_chunked


@dataclass
class EquivReport:
    instances: int
    max_abs_diff: float
    worst: str

    def passed(self, tol: float = 1e-10) -> bool:
        return self.max_abs_diff < tol


def random_instance(rng: np.random.Generator, max_L: int = 64, max_D: int = 8, max_E: int = 8):
    L, D, E = (int(rng.integers(1, m + 1)) for m in (max_L, max_D, max_E))
    delta = rng.uniform(1e-3, 1.0, size=(L, D))
    A = -rng.uniform(0.1, 4.0, size=(D, E))
    A_bar, B_bar = discretize(delta, A, rng.normal(size=(L, E)))
    dp = DiscretizedParams(A_bar, B_bar, rng.normal(size=(L, E)), delta)
    return dp, rng.normal(size=(L, D)), rng.normal(size=(D, E))


def scan_equivalence(seed: int = 0, n: int = 100) -> EquivReport:
    """Max abs difference of both vectorized scans (outputs and final states) from the oracle."""
    rng = make_rng(seed)
    worst, where = 0.0, ""
    for i in range(n):
        dp, X, h0 = random_instance(rng)
        Y_ref, h_ref = naive_scan(dp.A_bar, dp.B_bar, dp.C, X, h0)
        chunk = int(rng.integers(1, 17))
        for name, res in (
            ("sequential", selective_scan(dp, X, h0)),
            ("chunked", selective_scan_chunked(dp, X, h0, chunk=chunk)),
        ):
            diff = max(np.max(np.abs(res.Y - Y_ref)), np.max(np.abs(res.final_state - h_ref)))
            if diff > worst or not where:
                worst, where = float(diff), f"instance {i} ({name}, L,D,E={dp.A_bar.shape}, chunk={chunk})"
    return EquivReport(n, worst, where)

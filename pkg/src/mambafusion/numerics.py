"""Numeric substrate: parameters, linear/conv layers, nonlinearities, gradient checking.

Tensors are plain float64 numpy arrays in row-major order. Every differentiable
op comes as a pair: ``op(...) -> (out, cache)`` and ``op_backward(dout, cache)``,
where the backward accumulates into ``Param.grad`` and returns input gradients.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

DTYPE = np.float64
SOFTPLUS_LINEAR_THRESHOLD = 30.0


class ShapeError(ValueError):
    """Dimension mismatch between two operands; carries both shapes."""

    def __init__(self, op: str, left: tuple, right: tuple, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        msg = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteError(f"non-finite value in {where} at index {tuple(int(i) for i in bad)}")
    return x


# --- parameters -----------------------------------------------------------------


@dataclass(eq=False)
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


class Module:
    """Base for parameter containers. Subclasses register Params and child Modules as attributes."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            if isinstance(val, Param):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_params(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{prefix}{key}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{prefix}{key}.{i}", item

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grads(self) -> None:
        zero_grads(self.params())


# --- rng / init -----------------------------------------------------------------


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """PCG64 generator; all stochastic entry points take an explicit seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.PCG64(ss))


def split_seed(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --- MAC tally (used to cross-check the closed-form flops formulas) -------------

_tally: Counter | None = None


@contextlib.contextmanager
def count_macs() -> Iterator[Counter]:
    """Record multiply-accumulates performed by forward ops inside the block."""
    global _tally
    prev, _tally = _tally, Counter()
    try:
        yield _tally
    finally:
        _tally = prev


def tally(kind: str, n: int) -> None:
    if _tally is not None:
        _tally[kind] += int(n)


# --- linear ---------------------------------------------------------------------


def linear(x: np.ndarray, W: Param, b: Param | None = None):
    """y[..., j] = sum_i x[..., i] W[i, j] (+ b[j])."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError("linear", x.shape, W.shape, "inner extents differ")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError("linear", W.shape, b.shape, "bias extent")
    y = x @ W.value
    if b is not None:
        y = y + b.value
    tally("linear", x.size // x.shape[-1] * W.size)
    return y, (x, W, b)


def linear_backward(dy: np.ndarray, cache) -> np.ndarray:
    x, W, b = cache
    W.grad += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    if b is not None:
        b.grad += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ W.value.T


# --- conv2d ---------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    # xp: (N, C, Hp, Wp) -> (N, Ho, Wo, C*k*k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    N, C = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(N, Ho, Wo, C * k * k)


def conv2d(x: np.ndarray, W: Param, b: Param | None = None, stride: int = 1):
    """Cross-correlation with same padding; x is (C,H,W) or (N,C,H,W), W is (Cout,C,k,k)."""
    Cout, Cin, k, k2 = W.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"conv2d: unsupported kernel {W.shape[2:]}; expected 1x1 or 3x3")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    unbatched = x.ndim == 3
    xb = x[None] if unbatched else x
    if xb.shape[1] != Cin:
        raise ShapeError("conv2d", x.shape, W.shape, "channel mismatch")
    N, _, H, Wd = xb.shape
    pad = k // 2
    Ho, Wo = -(-H // stride), -(-Wd // stride)
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    cols = _im2col(xp, k, stride, Ho, Wo)
    Wm = W.value.reshape(Cout, -1)
    y = cols @ Wm.T
    if b is not None:
        y = y + b.value
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    tally("conv", N * Ho * Wo * W.size)
    return (y[0] if unbatched else y), (cols, xb.shape, W, b, stride, unbatched)


def conv2d_backward(dy: np.ndarray, cache) -> np.ndarray:
    cols, xshape, W, b, stride, unbatched = cache
    dyb = dy[None] if unbatched else dy
    N, C, H, Wd = xshape
    Cout, _, k, _ = W.shape
    pad = k // 2
    Ho, Wo = dyb.shape[2:]
    dyt = dyb.transpose(0, 2, 3, 1).reshape(-1, Cout)
    W.grad += (dyt.T @ cols.reshape(-1, cols.shape[-1])).reshape(W.shape)
    if b is not None:
        b.grad += dyt.sum(axis=0)
    dcols = (dyt @ W.value.reshape(Cout, -1)).reshape(N, Ho, Wo, C, k, k)
    dxp = np.zeros((N, C, H + 2 * pad, Wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad : pad + H, pad : pad + Wd] if pad else dxp
    return dx[0] if unbatched else dx


# --- elementwise ----------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x: np.ndarray):
    """ln(1 + e^x); identity above the linear threshold, clamped to stay strictly positive."""
    y = np.where(
        x > SOFTPLUS_LINEAR_THRESHOLD,
        x,
        np.log1p(np.exp(np.minimum(x, SOFTPLUS_LINEAR_THRESHOLD))),
    )
    y = np.maximum(y, np.finfo(DTYPE).tiny)
    tally("elementwise", y.size)
    return y, x


def softplus_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * sigmoid(x)


def silu(x: np.ndarray):
    s = sigmoid(x)
    tally("elementwise", x.size)
    return x * s, (x, s)


def silu_backward(dy: np.ndarray, cache) -> np.ndarray:
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


# --- gradient checking ----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: str = ""
    checked: int = 0
    failure: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        s = f"{status} max_rel_err={self.max_rel_err:.3e} over {self.checked} entries"
        if self.worst:
            s += f" (worst at {self.worst})"
        if self.failure:
            s += f": {self.failure}"
        return s


def rel_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps roundoff on near-zero entries from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[bool], float],
    params: Iterable[Param],
    eps: float = 1e-6,
    tol: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f(backward)`` runs the forward pass and returns the scalar loss; when
    ``backward`` is true it must also accumulate gradients into the params.
    ``max_entries`` caps the entries probed per parameter (sampled with ``seed``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    zero_grads(params)
    loss = f(True)
    if not np.isfinite(loss):
        return GradCheckReport(np.inf, False, failure="non-finite loss at base point")
    analytic = {id(p): p.grad.copy() for p in params}
    rng = make_rng(seed)
    worst, worst_at, checked = 0.0, "", 0
    for p in params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        g = analytic[id(p)].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(False)
            flat[i] = orig - eps
            fm = f(False)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(np.inf, False, f"{p.name}[{i}]", checked, "non-finite loss")
            err = rel_error(g[i], (fp - fm) / (2 * eps))
            checked += 1
            if err > worst:
                worst, worst_at = err, f"{p.name}{tuple(int(j) for j in np.unravel_index(i, p.shape))}"
    zero_grads(params)
    return GradCheckReport(worst, worst < tol, worst_at, checked)

"""Budget projection, Gaussian smoothing and the Gaussian-noise baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class PerturbationBudget:
    """l-infinity budget ``epsilon`` on a ``[pixel_min, pixel_max]`` image."""

    epsilon: float
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.epsilon > self.pixel_max - self.pixel_min:
            raise ValueError("epsilon exceeds the pixel range")

    @classmethod
    def from_255(cls, eps255: float) -> "PerturbationBudget":
        return cls(eps255 / 255.0)


@dataclass(frozen=True)
class SmoothingKernel:
    size: int
    sigma: float
    weights: np.ndarray = field(repr=False, compare=False)


def gaussian_kernel(size: int = 3, sigma: float = 1.0) -> SmoothingKernel:
    if not isinstance(size, (int, np.integer)) or size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size!r}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return SmoothingKernel(int(size), float(sigma), w / w.sum())


def smooth(g_out, kernel: SmoothingKernel) -> Tensor:
    """Depthwise Gaussian filtering with reflect padding; shape is preserved."""
    g_out = g_out if isinstance(g_out, Tensor) else Tensor(g_out)
    if g_out.ndim != 4:
        raise dc.ShapeError(f"smooth expects NCHW input, got {g_out.shape}")
    n, c, h, w = g_out.shape
    if h < kernel.size or w < kernel.size:
        raise dc.ShapeError(f"image {(h, w)} smaller than kernel size {kernel.size}")
    if kernel.size == 1:
        return g_out
    flat = dc.reshape(g_out, (n * c, 1, h, w))
    padded = dc.pad2d(flat, kernel.size // 2, mode="reflect")
    out = dc.conv2d(padded, Tensor(kernel.weights[None, None]))
    return dc.reshape(out, (n, c, h, w))


def budget_bounds(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """``x - eps`` and ``x + eps``, nudged inward so the rounded offsets never exceed ``eps``."""
    lo = x - eps
    hi = x + eps
    while True:
        bad = hi - x > eps
        if not bad.any():
            break
        hi = np.where(bad, np.nextafter(hi, -np.inf), hi)
    while True:
        bad = x - lo > eps
        if not bad.any():
            break
        lo = np.where(bad, np.nextafter(lo, np.inf), lo)
    return lo, hi


def project(x, g_out, budget: PerturbationBudget) -> Tensor:
    """``clip(min(x + eps, max(g_out, x - eps)))`` to the pixel range."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    g_out = g_out if isinstance(g_out, Tensor) else Tensor(g_out)
    if x.shape != g_out.shape:
        raise dc.ShapeError(f"image {x.shape} and generator output {g_out.shape} differ in shape")
    lo, hi = budget_bounds(x.data, budget.epsilon)
    out = dc.minimum(dc.maximum(g_out, lo), hi)
    return dc.clamp(out, budget.pixel_min, budget.pixel_max)


def project_np(x: np.ndarray, g_out: np.ndarray, budget: PerturbationBudget) -> np.ndarray:
    if x.shape != g_out.shape:
        raise dc.ShapeError(f"image {x.shape} and generator output {g_out.shape} differ in shape")
    lo, hi = budget_bounds(x, budget.epsilon)
    out = np.minimum(np.maximum(g_out, lo), hi)
    return np.clip(out, budget.pixel_min, budget.pixel_max)


def gaussian_noise_baseline(x: np.ndarray, budget: PerturbationBudget, seed: int) -> np.ndarray:
    """Add N(0, (eps/2)^2) noise, clamp it to +-eps and clip to the pixel range."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, budget.epsilon / 2.0, size=np.shape(x))
    return project_np(np.asarray(x, dtype=np.float64), np.asarray(x) + noise, budget)


def adversarial(gen, x: np.ndarray, budget: PerturbationBudget,
                kernel: SmoothingKernel | None = None, batch_size: int = 256) -> np.ndarray:
    """Inference path: generate, optionally smooth, project. No graph is recorded."""
    out = []
    with dc.no_grad():
        for i in range(0, len(x), batch_size):
            xb = x[i:i + batch_size]
            g = gen(Tensor(xb))
            if kernel is not None:
                g = smooth(g, kernel)
            out.append(project_np(xb, g.data, budget))
    return np.concatenate(out, axis=0) if out else np.zeros_like(x)

"""In-slice smoothing of predicted lesion maps with a log-normal radial kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import lognorm

CENTER_RULES = ("max", "zero")


@dataclass(frozen=True)
class LognormalKernel2D:
    mu: float
    sigma: float
    radius: int
    weights: np.ndarray  # (2r + 1, 2r + 1), sums to 1


@dataclass
class PostConfig:
    enabled: bool = True
    mu: float = 0.0
    sigma: float = 0.75
    radius: int = 3
    center: str = "max"
    smooth_binary: bool = False
    threshold: float = 0.5
    normalized: bool = True  # divide by the kernel mass that falls inside the mask


def lognormal_pdf(d, mu: float, sigma: float) -> np.ndarray:
    return lognorm.pdf(np.asarray(d, dtype=np.float64), s=sigma, scale=np.exp(mu))


def build_kernel(mu: float = 0.0, sigma: float = 0.75, radius: int = 3,
                 center: str = "max") -> LognormalKernel2D:
    """Weights follow the log-normal pdf of the distance to the centre.

    The pdf vanishes at distance 0, so the centre cell takes the largest
    tabulated neighbour weight (``center="max"``) or stays 0 (``"zero"``).
    """
    if sigma <= 0 or radius < 1 or center not in CENTER_RULES:
        raise ValueError(f"invalid kernel parameters sigma={sigma}, radius={radius}, center={center!r}")
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    d = np.hypot(ax[:, None], ax[None, :])
    w = np.zeros_like(d)
    off = d > 0
    w[off] = lognormal_pdf(d[off], mu, sigma)
    if center == "max":
        w[radius, radius] = w[off].max()
    total = w.sum()
    if not total > 0:
        raise ValueError("kernel weights vanish for these parameters")
    return LognormalKernel2D(mu, sigma, radius, w / total)


def smooth(prob: np.ndarray, mask: np.ndarray, kernel: LognormalKernel2D, normalized: bool = True) -> np.ndarray:
    """Convolve every z-slice with the kernel; out-of-mask voxels end at 0.

    With ``normalized`` each output is divided by the kernel mass landing on
    in-mask voxels, so the zeros outside the brain do not drag down
    predictions along its edge. Away from the mask boundary both forms agree.
    """
    mask = np.asarray(mask, dtype=bool)
    prob = np.where(mask, np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0), 0.0)
    out = np.empty_like(prob)
    for z in range(prob.shape[2]):
        out[:, :, z] = ndimage.convolve(prob[:, :, z], kernel.weights, mode="reflect")
        if normalized:
            den = ndimage.convolve(mask[:, :, z].astype(np.float64), kernel.weights, mode="reflect")
            out[:, :, z] = np.divide(out[:, :, z], den, out=np.zeros_like(den), where=den > 1e-12)
    return np.where(mask, np.clip(out, 0.0, 1.0), 0.0)


def threshold(prob: np.ndarray, tau: float = 0.5) -> np.ndarray:
    if not 0 < tau < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(prob) >= tau).astype(np.uint8)


def postprocess(prob: np.ndarray, mask: np.ndarray, cfg: PostConfig = PostConfig()) -> np.ndarray:
    """Probability map to a lesion label volume, smoothing first when enabled."""
    if not cfg.enabled:
        return threshold(np.where(mask, prob, 0.0), cfg.threshold)
    kern = build_kernel(cfg.mu, cfg.sigma, cfg.radius, cfg.center)
    src = threshold(prob, cfg.threshold).astype(np.float64) if cfg.smooth_binary else prob
    return threshold(smooth(src, mask, kern, cfg.normalized), cfg.threshold)

"""Synthetic CTP-like cohorts built from gamma-variate bolus curves.

Each patient is an ellipsoidal brain inside a bright skull shell on a zero
background. Lesion voxels get an attenuated, delayed and broadened curve.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .rng import derive_rng


@dataclass(frozen=True)
class GammaVariateParams:
    amplitude: float = 100.0
    onset: float = 4.0
    alpha: float = 3.0
    beta: float = 1.5
    baseline: float = 40.0
    noise_std: float = 2.0

    def __post_init__(self):
        if self.amplitude <= 0 or self.alpha <= 0 or self.beta <= 0 or self.noise_std < 0:
            raise ValueError(f"invalid gamma-variate parameters: {self}")


@dataclass
class SynthConfig:
    patients: int = 8
    nx: int = 32
    ny: int = 32
    nz: int = 2
    tp_min: int = 20
    tp_max: int = 24
    lesion_fraction: float = 0.12
    amplitude: float = 100.0
    onset: float = 4.0
    alpha: float = 3.0
    beta: float = 1.5
    baseline: float = 40.0
    noise_std: float = 2.0
    lesion_ratio: float = 0.55
    lesion_delay: float = 3.0
    lesion_broadening: float = 1.6
    param_jitter: float = 0.05
    skull_intensity: float = 1000.0
    spacing_xy: float = 1.0
    spacing_z: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lesion_fraction < 0.5:
            raise ValueError("lesion_fraction must lie in (0, 0.5)")
        if self.nx < 12 or self.ny < 12 or self.nz < 1:
            raise ValueError("grid too small for the brain phantom")
        if not 1 <= self.tp_min <= self.tp_max:
            raise ValueError("need 1 <= tp_min <= tp_max")
        if not 0 < self.lesion_ratio < 1 or self.lesion_broadening <= 1:
            raise ValueError("lesion effect needs ratio < 1 and broadening > 1")

    @property
    def healthy(self) -> GammaVariateParams:
        return GammaVariateParams(self.amplitude, self.onset, self.alpha, self.beta,
                                  self.baseline, self.noise_std)

    @property
    def lesion(self) -> GammaVariateParams:
        h = self.healthy
        return replace(h, amplitude=h.amplitude * self.lesion_ratio, onset=h.onset + self.lesion_delay,
                       beta=h.beta * self.lesion_broadening)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.spacing_xy, self.spacing_xy, self.spacing_z)


@dataclass
class SynthPatient:
    patient_id: str
    data: np.ndarray  # (X, Y, Z, T)
    label: np.ndarray  # (X, Y, Z) uint8
    mask: np.ndarray  # (X, Y, Z) bool, the generator's own brain mask
    spacing: tuple[float, float, float]


def curve(p: GammaVariateParams, t, rng: np.random.Generator | None = None) -> np.ndarray:
    """``b + A (t - t0)^a exp(-(t - t0)/b)`` after onset, baseline before.

    Noise of ``p.noise_std`` is added only when ``rng`` is given.
    """
    t = np.asarray(t, dtype=np.float64)
    s = np.clip(t - p.onset, 0.0, None)
    out = p.baseline + np.where(t > p.onset, p.amplitude * s ** p.alpha * np.exp(-s / p.beta), 0.0)
    if rng is not None and p.noise_std > 0:
        out = out + rng.normal(0.0, p.noise_std, size=out.shape)
    return out


def _curves(params: GammaVariateParams, n: int, t: np.ndarray, jitter: float,
            rng: np.random.Generator) -> np.ndarray:
    # per-voxel multiplicative jitter on amplitude, shape, scale and onset
    j = 1.0 + rng.uniform(-jitter, jitter, size=(n, 4))
    A = params.amplitude * j[:, :1]
    alpha = params.alpha * j[:, 1:2]
    beta = params.beta * j[:, 2:3]
    t0 = params.onset * j[:, 3:4]
    s = np.clip(t[None, :] - t0, 0.0, None)
    c = params.baseline + np.where(t[None, :] > t0, A * s ** alpha * np.exp(-s / beta), 0.0)
    return c + rng.normal(0.0, params.noise_std, size=c.shape)


def _grid(cfg: SynthConfig):
    x, y, z = np.meshgrid(np.arange(cfg.nx), np.arange(cfg.ny), np.arange(cfg.nz), indexing="ij")
    return x.astype(float), y.astype(float), z.astype(float)


def _brain_and_skull(cfg: SynthConfig):
    x, y, _ = _grid(cfg)
    cx, cy = (cfg.nx - 1) / 2, (cfg.ny - 1) / 2
    ax, ay = 0.40 * cfg.nx, 0.34 * cfg.ny
    r = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2
    brain = r <= 1.0
    skull = (((x - cx) / (ax + 2)) ** 2 + ((y - cy) / (ay + 2)) ** 2 <= 1.0) & ~brain
    return brain, skull


def _place_lesion(cfg: SynthConfig, brain: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x, y, z = _grid(cfg)
    target = cfg.lesion_fraction * brain.sum()
    # erode by one voxel in-plane so lesions stay strictly inside the brain
    inner = brain.copy()
    inner[1:-1, 1:-1] &= brain[:-2, 1:-1] & brain[2:, 1:-1] & brain[1:-1, :-2] & brain[1:-1, 2:]
    inner[[0, -1]] = False
    inner[:, [0, -1]] = False
    cand = np.argwhere(inner)
    scales = np.linspace(0.5, 12.0, 116)
    for _ in range(100):
        c = cand[rng.integers(len(cand))].astype(float)
        aspect = rng.uniform(0.7, 1.3)
        rz = float(cfg.nz)
        best, best_err = None, np.inf
        for s in scales:
            les = (((x - c[0]) / (s * aspect)) ** 2 + ((y - c[1]) / (s / aspect)) ** 2
                   + ((z - c[2]) / rz) ** 2) <= 1.0
            n = les.sum()
            if n and not (les & ~inner).any():
                err = abs(n - target)
                if err < best_err:
                    best, best_err = les, err
            if n > 1.5 * target:
                break
        if best is not None and best_err <= 0.2 * target:
            return best
    raise RuntimeError("could not place a lesion inside the brain after 100 tries")


def gen_patient(cfg: SynthConfig, index: int) -> SynthPatient:
    rng = derive_rng(cfg.seed, "patient", index)
    tp = int(rng.integers(cfg.tp_min, cfg.tp_max + 1)) if index else cfg.tp_min
    brain, skull = _brain_and_skull(cfg)
    lesion = _place_lesion(cfg, brain, rng)
    t = np.arange(tp, dtype=np.float64)
    data = np.zeros((cfg.nx, cfg.ny, cfg.nz, tp))
    healthy = brain & ~lesion
    data[healthy] = _curves(cfg.healthy, int(healthy.sum()), t, cfg.param_jitter, rng)
    data[lesion] = _curves(cfg.lesion, int(lesion.sum()), t, cfg.param_jitter, rng)
    data[skull] = cfg.skull_intensity
    return SynthPatient(f"P{index:03d}", data, lesion.astype(np.uint8), brain, cfg.spacing)


def gen_cohort(cfg: SynthConfig) -> list[SynthPatient]:
    """Patient 0 always gets ``tp_min`` time points, the rest are drawn uniformly."""
    return [gen_patient(cfg, i) for i in range(cfg.patients)]

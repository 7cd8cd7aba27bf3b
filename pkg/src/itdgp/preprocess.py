"""4D perfusion volumes to a voxel-by-time feature matrix.

Fixed order: mask -> in-slice smoothing -> temporal trim -> per-patient
normalization -> flatten. Rows are ordered patient, then z, then y, then x.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class EmptyMaskError(ValueError):
    pass


@dataclass
class CtpVolume:
    data: np.ndarray  # (X, Y, Z, T)
    spacing: tuple[float, float, float]
    patient_id: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[3] < 1:
            raise ValueError(f"{self.patient_id}: expected (X, Y, Z, T) data, got {self.data.shape}")
        if min(self.spacing) <= 0:
            raise ValueError(f"{self.patient_id}: voxel spacing must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{self.patient_id}: non-finite intensities")

    @property
    def n_times(self) -> int:
        return self.data.shape[3]


@dataclass
class PreprocessConfig:
    mask_low: float = 0.0
    mask_high: float = 300.0
    smooth_sigma_mm: float = 1.0
    downsample: bool = False


@dataclass
class VoxelMatrix:
    X: np.ndarray  # (V, T)
    y: np.ndarray  # (V,) uint8
    index: np.ndarray  # (V, 4) int: patient ordinal, x, y, z
    patient_ids: list[str]
    offsets: np.ndarray  # (P + 1,) row offsets
    shapes: list[tuple[int, int, int]] = field(default_factory=list)
    spacings: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def n_voxels(self) -> int:
        return self.X.shape[0]

    def rows_of(self, p: int) -> slice:
        return slice(int(self.offsets[p]), int(self.offsets[p + 1]))

    def subset(self, patients) -> "VoxelMatrix":
        parts = [self.rows_of(p) for p in patients]
        rows = np.concatenate([np.arange(s.start, s.stop) for s in parts])
        sizes = [s.stop - s.start for s in parts]
        idx = self.index[rows].copy()
        for new, p in enumerate(patients):
            idx[idx[:, 0] == p, 0] = new
        return VoxelMatrix(self.X[rows], self.y[rows], idx, [self.patient_ids[p] for p in patients],
                           np.concatenate([[0], np.cumsum(sizes)]),
                           [self.shapes[p] for p in patients], [self.spacings[p] for p in patients])

    def unflatten(self, values: np.ndarray, p: int, fill=0) -> np.ndarray:
        """Scatter the values of patient ``p``'s rows back onto its grid."""
        values = np.asarray(values)
        ix = self.index[self.rows_of(p)]
        if len(values) != len(ix):
            raise ValueError(f"expected {len(ix)} values for patient {p}, got {len(values)}")
        out = np.full(self.shapes[p], fill, dtype=values.dtype)
        out[ix[:, 1], ix[:, 2], ix[:, 3]] = values
        return out


def mask_brain(vol: CtpVolume, low: float = 0.0, high: float = 300.0) -> np.ndarray:
    """Threshold the time-mean to ``(low, high]``, keep the largest 3D
    component and fill holes slice by slice."""
    if vol.data.size == 0:
        raise EmptyMaskError(f"{vol.patient_id}: empty volume")
    mean = vol.data.mean(axis=3)
    keep = (mean > low) & (mean <= high)
    labels, n = ndimage.label(keep)
    if n == 0:
        raise EmptyMaskError(f"{vol.patient_id}: brain mask is empty")
    sizes = ndimage.sum_labels(keep, labels, index=np.arange(1, n + 1))
    mask = labels == (int(np.argmax(sizes)) + 1)
    for z in range(mask.shape[2]):
        mask[:, :, z] = ndimage.binary_fill_holes(mask[:, :, z])
    return mask


def spatial_smooth(vol: CtpVolume, sigma_mm: float, mask: np.ndarray | None = None) -> CtpVolume:
    """Gaussian blur of every (z, t) slice; truncated at 3 sigma, reflect padding.

    With a ``mask``, in-mask voxels are averaged over in-mask neighbours only
    (normalized convolution) and out-of-mask voxels are set to zero, so skull
    and background never bleed into the brain.
    """
    if sigma_mm < 0:
        raise ValueError("sigma must be non-negative")
    data = vol.data if mask is None else vol.data * mask[..., None]
    if sigma_mm == 0:
        return CtpVolume(data.copy(), vol.spacing, vol.patient_id)
    sig = (sigma_mm / vol.spacing[0], sigma_mm / vol.spacing[1], 0.0, 0.0)
    out = ndimage.gaussian_filter(data, sigma=sig, mode="reflect", truncate=3.0)
    if mask is not None:
        w = ndimage.gaussian_filter(mask.astype(np.float64), sigma=sig[:3], mode="reflect", truncate=3.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(mask[..., None], out / w[..., None], 0.0)
    return CtpVolume(out, vol.spacing, vol.patient_id)


def downsample2x2(vol: CtpVolume) -> CtpVolume:
    """2x2 in-slice mean pooling; odd trailing rows/columns are dropped."""
    d = vol.data
    nx, ny = d.shape[0] // 2 * 2, d.shape[1] // 2 * 2
    d = d[:nx, :ny]
    d = 0.25 * (d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2])
    sx, sy, sz = vol.spacing
    return CtpVolume(d, (2 * sx, 2 * sy, sz), vol.patient_id)


def downsample_labels(label: np.ndarray) -> np.ndarray:
    nx, ny = label.shape[0] // 2 * 2, label.shape[1] // 2 * 2
    lab = (np.asarray(label)[:nx, :ny] > 0).astype(float)
    pooled = 0.25 * (lab[0::2, 0::2] + lab[1::2, 0::2] + lab[0::2, 1::2] + lab[1::2, 1::2])
    return (pooled >= 0.5).astype(np.uint8)


def trim_bounds(tp: int, T: int) -> tuple[int, int]:
    """``[start, stop)`` of the kept time points; the odd extra point goes to the back."""
    excess = tp - T
    if excess < 0:
        raise ValueError(f"cannot trim {tp} time points to {T}")
    front = excess // 2
    return front, front + T


def temporal_equalize(vols: list[CtpVolume], T: int | None = None) -> list[CtpVolume]:
    T = min(v.n_times for v in vols) if T is None else T
    out = []
    for v in vols:
        a, b = trim_bounds(v.n_times, T)
        out.append(CtpVolume(v.data[..., a:b], v.spacing, v.patient_id))
    return out


def normalize(Xp: np.ndarray) -> np.ndarray:
    """Standardize with the mean and population std over all entries."""
    Xp = np.asarray(Xp, dtype=np.float64)
    sd = Xp.std()
    if not sd > 0:
        raise ValueError("cannot normalize a zero-variance matrix")
    return (Xp - Xp.mean()) / sd


def flatten(vol: CtpVolume, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """In-mask rows in z, y, x order and their ``(x, y, z)`` coordinates."""
    if mask.shape != vol.data.shape[:3]:
        raise ValueError(f"{vol.patient_id}: mask shape {mask.shape} != volume {vol.data.shape[:3]}")
    zyx = np.argwhere(np.transpose(mask, (2, 1, 0)))
    xyz = zyx[:, ::-1]
    return vol.data[xyz[:, 0], xyz[:, 1], xyz[:, 2]], xyz


def flatten_and_assemble(vols: list[CtpVolume], masks: list[np.ndarray],
                         labels: list[np.ndarray] | None) -> VoxelMatrix:
    """Normalize each patient's masked rows and stack them."""
    T = {v.n_times for v in vols}
    if len(T) != 1:
        raise ValueError(f"time points differ across patients: {sorted(T)}")
    Xs, ys, idx, sizes = [], [], [], []
    for p, (v, m) in enumerate(zip(vols, masks)):
        rows, xyz = flatten(v, m)
        Xs.append(normalize(rows))
        if labels is not None:
            lab = np.asarray(labels[p])
            if lab.shape != m.shape:
                raise ValueError(f"{v.patient_id}: label shape {lab.shape} != volume {m.shape}")
            ys.append((lab[xyz[:, 0], xyz[:, 1], xyz[:, 2]] > 0).astype(np.uint8))
        else:
            ys.append(np.zeros(len(rows), dtype=np.uint8))
        idx.append(np.column_stack([np.full(len(rows), p), xyz]))
        sizes.append(len(rows))
    return VoxelMatrix(np.concatenate(Xs), np.concatenate(ys), np.concatenate(idx).astype(np.int64),
                       [v.patient_id for v in vols], np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
                       [tuple(m.shape) for m in masks], [tuple(v.spacing) for v in vols])


def preprocess_cohort(vols: list[CtpVolume], labels: list[np.ndarray] | None,
                      cfg: PreprocessConfig = PreprocessConfig(),
                      T: int | None = None) -> tuple[VoxelMatrix, list[np.ndarray]]:
    """Full pipeline; returns the matrix and the per-patient brain masks."""
    if cfg.downsample:
        vols = [downsample2x2(v) for v in vols]
        labels = None if labels is None else [downsample_labels(l) for l in labels]
    masks = [mask_brain(v, cfg.mask_low, cfg.mask_high) for v in vols]
    vols = [spatial_smooth(v, cfg.smooth_sigma_mm, m) for v, m in zip(vols, masks)]
    vols = temporal_equalize(vols, T)
    return flatten_and_assemble(vols, masks, labels), masks

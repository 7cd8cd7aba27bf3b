"""Cohort I/O, per-fold training and the one-patient-out evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as tio
from . import metrics as mt
from .config import RunConfig
from .model import DgpModel, fit, predict_proba
from .postprocess import PostConfig, postprocess
from .preprocess import CtpVolume, VoxelMatrix, downsample_labels, preprocess_cohort
from .rng import derive_seed
from .synth import SynthPatient

log = logging.getLogger(__name__)

VARIANTS = ("TDGP", "iTDGP-post", "iTDGP", "threshold")


@dataclass
class Cohort:
    volumes: list[CtpVolume]
    labels: list[np.ndarray]

    def __post_init__(self):
        if len(self.volumes) != len(self.labels):
            raise ValueError("need one label volume per patient")

    @property
    def patient_ids(self) -> list[str]:
        return [v.patient_id for v in self.volumes]

    @classmethod
    def from_synth(cls, patients: list[SynthPatient]) -> "Cohort":
        return cls([CtpVolume(p.data, p.spacing, p.patient_id) for p in patients], [p.label for p in patients])


def save_cohort(out_dir, patients: list[SynthPatient]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p in patients:
        for suffix, kind, data in ((".series.tdgp", tio.SERIES, p.data), (".labels.tdgp", tio.LABELS, p.label),
                                   (".mask.tdgp", tio.MASK, p.mask)):
            path = out / f"{p.patient_id}{suffix}"
            tio.write_raster(path, tio.Raster(kind, data, p.spacing))
            written.append(path)
    return written


def load_cohort(in_dir) -> Cohort:
    """Every ``<id>.series.tdgp`` with its ``<id>.labels.tdgp``, in id order."""
    d = Path(in_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"cohort directory {d} does not exist")
    series = sorted(d.glob("*.series.tdgp"))
    if not series:
        raise FileNotFoundError(f"no *.series.tdgp files in {d}")
    vols, labels = [], []
    for s in series:
        pid = s.name[: -len(".series.tdgp")]
        r = tio.read_raster(s)
        lab_path = d / f"{pid}.labels.tdgp"
        if not lab_path.exists():
            raise FileNotFoundError(f"missing label raster {lab_path}")
        lab = tio.read_raster(lab_path)
        if lab.data.shape != r.data.shape[:3]:
            raise ValueError(f"{pid}: label shape {lab.data.shape} != series {r.data.shape[:3]}")
        vols.append(CtpVolume(r.data.astype(np.float64), r.spacing, pid))
        labels.append(lab.data)
    return Cohort(vols, labels)


def fold_seed(seed: int, k: int) -> int:
    return int(derive_seed(seed, "fold", k).generate_state(1)[0])


def train_model(vm: VoxelMatrix, cfg: RunConfig, seed: int, batching: str = "balanced") -> tuple[DgpModel, list]:
    model = DgpModel.init(vm.X, cfg.model, seed=seed)
    return fit(model, vm.X, vm.y, cfg.train, seed=seed, batching=batching)


def enhancement(X: np.ndarray) -> np.ndarray:
    """Peak minus the first (pre-bolus) time point, per row."""
    return X.max(axis=1) - X[:, 0]


def tune_cutoff(X: np.ndarray, y: np.ndarray, n_candidates: int = 101) -> float:
    """Cutoff maximizing pooled training DSC for ``enhancement < cutoff``."""
    e = enhancement(X)
    cands = np.unique(np.quantile(e, np.linspace(0.0, 1.0, n_candidates)))
    pos = y == 1
    best, best_score = float(cands[0]), -1.0
    for c in cands:
        pred = e < c
        tp = int((pred & pos).sum())
        denom = int(pred.sum()) + int(pos.sum())
        score = 2 * tp / denom if denom else 1.0
        if score > best_score:
            best, best_score = float(c), score
    return best


@dataclass
class EvalResult:
    variants: tuple[str, ...]
    rows: dict[str, list[mt.FoldResult]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    def summary(self, variant: str) -> dict[str, tuple[float, float]]:
        return mt.aggregate(self.rows[variant])

    def r_squared(self, variant: str, identity: bool = False) -> float:
        pairs = [(r.true_ml, r.pred_ml) for r in self.rows[variant]]
        try:
            return mt.r_squared(pairs, identity=identity)
        except ValueError:
            return float("nan")


def evaluate(cohort: Cohort, cfg: RunConfig, ablation: bool = False) -> EvalResult:
    """One-patient-out over the cohort.

    Without ``ablation`` only the full iTDGP is scored. With it, one
    balanced model per fold serves iTDGP and iTDGP-post, a second model
    trained on shuffled batches gives TDGP, and the enhancement cutoff
    gives the thresholding baseline.
    """
    variants = VARIANTS if ablation else ("iTDGP",)
    T = cfg.eval.time_points or None
    vm, masks = preprocess_cohort(cohort.volumes, cohort.labels, cfg.preprocess, T)
    no_post = PostConfig(**{**cfg.post.__dict__, "enabled": False})

    def score(p, labels):
        return mt.fold_result(vm.patient_ids[p], labels, truth_of(p), masks[p], vm.spacings[p])

    def truth_of(p):
        lab = np.asarray(cohort.labels[p]) > 0
        if cfg.preprocess.downsample:
            lab = downsample_labels(lab) > 0
        return lab & masks[p]

    def closure(train, k):
        tr, te = vm.subset(train), vm.subset([k])
        s = fold_seed(cfg.seed, k)
        out = {}
        if {"iTDGP", "iTDGP-post"} & set(variants):
            model, _ = train_model(tr, cfg, s, "balanced")
            prob = vm.unflatten(predict_proba(model, te.X, cfg.train.mc_pred, seed=s), k, fill=0.0)
            if "iTDGP" in variants:
                out["iTDGP"] = score(k, postprocess(prob, masks[k], cfg.post))
            if "iTDGP-post" in variants:
                out["iTDGP-post"] = score(k, postprocess(prob, masks[k], no_post))
        if "TDGP" in variants:
            model, _ = train_model(tr, cfg, s, "shuffled")
            prob = vm.unflatten(predict_proba(model, te.X, cfg.train.mc_pred, seed=s), k, fill=0.0)
            out["TDGP"] = score(k, postprocess(prob, masks[k], no_post))
        if "threshold" in variants:
            cut = tune_cutoff(tr.X, tr.y)
            out["threshold"] = score(k, vm.unflatten((enhancement(te.X) < cut).astype(np.uint8), k))
        log.info("fold %s: %s", vm.patient_ids[k], {v: round(r.dsc, 4) for v, r in out.items()})
        return out

    rows, failures = mt.one_patient_out(vm.patient_ids, closure)
    return EvalResult(variants, {v: [r[v] for r in rows] for v in variants}, failures)


def _num(v: float) -> str:
    return f"{v:.6f}"


def scores_csv(rows: list[mt.FoldResult]) -> str:
    cols = ("dsc", "jaccard", "precision", "recall", "true_ml", "pred_ml")
    lines = ["patient_id," + ",".join(cols)]
    for r in rows:
        lines.append(r.patient_id + "," + ",".join(_num(getattr(r, c)) for c in cols))
    agg = mt.aggregate(rows)
    lines.append("mean," + ",".join(_num(agg[c][0]) for c in cols))
    lines.append("std," + ",".join(_num(agg[c][1]) for c in cols))
    return "\n".join(lines) + "\n"


def ablation_csv(res: EvalResult, r2_identity: bool = False) -> str:
    lines = ["variant,mean_dsc,std_dsc,mean_jaccard,mean_precision,mean_recall,r_squared"]
    for v in res.variants:
        a = res.summary(v)
        lines.append(",".join([v, _num(a["dsc"][0]), _num(a["dsc"][1]), _num(a["jaccard"][0]),
                               _num(a["precision"][0]), _num(a["recall"][0]),
                               _num(res.r_squared(v, r2_identity))]))
    return "\n".join(lines) + "\n"

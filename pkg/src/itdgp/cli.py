"""``tdgp`` command-line entry point.

Failures print one line ``error: <category>: <message>`` to stderr and exit
with the category's code.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as tio
from . import pipeline as pl
from .config import ConfigError, RunConfig, dump_config, flat_items, load_config
from .diffgraph import NonFiniteError, NotPositiveDefiniteError
from .model import TrainingDiverged, gradcheck_toy, predict_proba
from .preprocess import CtpVolume, EmptyMaskError, preprocess_cohort
from .synth import gen_cohort

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "io": 4,
    "format": 5,
    "version": 6,
    "data": 7,
    "numerical": 8,
    "gradcheck": 9,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _categorize(exc: BaseException) -> tuple[str, str]:
    if isinstance(exc, CliError):
        return exc.category, str(exc)
    if isinstance(exc, ConfigError):
        return "config", str(exc)
    if isinstance(exc, tio.VersionError):
        return "version", str(exc)
    if isinstance(exc, tio.FormatError):
        return "format", str(exc)
    if isinstance(exc, OSError):
        return "io", f"{exc.strerror or exc}: {exc.filename}" if getattr(exc, "filename", None) else str(exc)
    if isinstance(exc, (TrainingDiverged, NotPositiveDefiniteError, NonFiniteError, FloatingPointError)):
        return "numerical", str(exc)
    if isinstance(exc, (EmptyMaskError, ValueError)):
        return "data", str(exc)
    raise exc


def _out_dir(args) -> Path:
    if not args.out:
        raise CliError("usage", "--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.synth.seed = args.seed
    return cfg


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def cmd_synth(args, cfg: RunConfig) -> str:
    out = _out_dir(args)
    pl.save_cohort(out, gen_cohort(cfg.synth))
    _write(out / "config.txt", dump_config(cfg))
    return f"wrote {cfg.synth.patients} patients to {out}"


def _need_input(args) -> Path:
    if not args.input:
        raise CliError("usage", "--input is required for this command")
    p = Path(args.input)
    if not p.exists():
        raise FileNotFoundError(2, "no such file or directory", str(p))
    return p


def cmd_preprocess(args, cfg: RunConfig) -> str:
    cohort = pl.load_cohort(_need_input(args))
    vm, masks = preprocess_cohort(cohort.volumes, cohort.labels, cfg.preprocess, cfg.eval.time_points or None)
    out = _out_dir(args)
    tio.save_matrix(out / "matrix.npz", vm)
    for pid, m, sp in zip(vm.patient_ids, masks, vm.spacings):
        tio.write_raster(out / f"{pid}.brainmask.tdgp", tio.Raster(tio.MASK, m.astype(np.uint8), sp))
    return f"matrix {vm.X.shape[0]}x{vm.X.shape[1]} written to {out / 'matrix.npz'}"


def cmd_train(args, cfg: RunConfig) -> str:
    vm = tio.load_matrix(_need_input(args))
    model, trace = pl.train_model(vm, cfg, cfg.seed, cfg.train.batching)
    out = _out_dir(args)
    tio.save_checkpoint(out / "model.ckpt", model, config=dict(flat_items(cfg)), seed=cfg.seed,
                        iteration=len(trace))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "ell", "kl", "elbo", "lr"])
    for r in trace:
        w.writerow([r["iteration"], repr(r["ell"]), repr(r["kl"]), repr(r["elbo"]), repr(r["lr"])])
    _write(out / "elbo_trace.csv", buf.getvalue())
    return f"trained {len(trace)} iterations; checkpoint {out / 'model.ckpt'}"


def cmd_predict(args, cfg: RunConfig) -> str:
    if not args.checkpoint:
        raise CliError("usage", "--checkpoint is required for predict")
    model, header = tio.load_checkpoint(args.checkpoint)
    src = _need_input(args)
    if src.suffix == ".npz":
        vm = tio.load_matrix(src)
    else:
        r = tio.read_raster(src)
        if r.kind != tio.SERIES:
            raise CliError("format", f"{src} is not a 4D series raster")
        vol = CtpVolume(r.data.astype(np.float64), r.spacing, src.name.split(".")[0])
        vm, _ = preprocess_cohort([vol], None, cfg.preprocess, model.input_dim)
    if vm.X.shape[1] != model.input_dim:
        raise CliError("data", f"matrix has {vm.X.shape[1]} time points, model expects {model.input_dim}")
    prob = predict_proba(model, vm.X, cfg.train.mc_pred, seed=cfg.seed)
    out = _out_dir(args)
    for p, pid in enumerate(vm.patient_ids):
        vol = vm.unflatten(prob[vm.rows_of(p)], p, fill=0.0)
        tio.write_raster(out / f"{pid}.prob.tdgp", tio.Raster(tio.PROB, vol, vm.spacings[p]))
    return f"wrote probability maps for {len(vm.patient_ids)} patient(s) to {out}"


def cmd_evaluate(args, cfg: RunConfig) -> str:
    if args.input:
        cohort = pl.load_cohort(_need_input(args))
    else:
        cohort = pl.Cohort.from_synth(gen_cohort(cfg.synth))
    res = pl.evaluate(cohort, cfg, ablation=args.ablation)
    out = _out_dir(args)
    lines = [f"# {k} = {v}" for k, v in flat_items(cfg)]
    for v in res.variants:
        name = "scores.csv" if v == "iTDGP" else f"scores_{v}.csv"
        _write(out / name, pl.scores_csv(res.rows[v]))
        a = res.summary(v)
        lines.append(f"{v}: dsc {a['dsc'][0]:.4f} +- {a['dsc'][1]:.4f}, "
                     f"r2 {res.r_squared(v, cfg.eval.r2_identity):.4f}")
    for pid, msg in res.failures.items():
        lines.append(f"failed fold {pid}: {msg}")
    if args.ablation:
        _write(out / "ablation.csv", pl.ablation_csv(res, cfg.eval.r2_identity))
    _write(out / "summary.txt", "\n".join(lines) + "\n")
    return "\n".join(l for l in lines if not l.startswith("#"))


def cmd_gradcheck(args, cfg: RunConfig) -> str:
    err, n = gradcheck_toy(cfg.seed)
    ok = err <= 1e-3
    report = f"gradcheck {'PASS' if ok else 'FAIL'}: max relative error {err:.3e} over {n} coordinates\n"
    if args.out:
        _write(_out_dir(args) / "gradcheck.txt", report)
    if not ok:
        raise CliError("gradcheck", report.strip())
    return report.strip()


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_CODES["usage"], f"error: usage: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tdgp", description="iTDGP lesion segmentation pipeline")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value run configuration")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--input", help="cohort directory, matrix .npz or series raster")
    p.add_argument("--checkpoint", help="model checkpoint for predict")
    p.add_argument("--ablation", action="store_true", help="score all four variants")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        print(COMMANDS[args.command](args, cfg))
        return 0
    except Exception as exc:  # mapped to one categorized line
        category, msg = _categorize(exc)
        print(f"error: {category}: {msg}", file=sys.stderr)
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth, train, eval, calibrate, explain, ablate.

Exit codes: 0 success, 1 runtime / I/O failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .calibration import PlattParams, apply_platt, ece, fit_platt, reliability_table
from .checkpoint import load_model, save_model
from .config import ModelConfig
from .dataset import Corpus, load_dir, synth_generate, write_corpus
from .errors import ConfigurationError, HFMFError
from .explain import export_heatmap, gradcam, overlap_score, random_box_baseline
from .pipeline import (EVAL_SPLITS, M1_ABLATION_ROWS, M2_ABLATION_ROWS, EnsembleModel, PipelineResult,
                       TrainConfig, TrainResult, ablation_report, accuracy_row, evaluate, fit_m1_platt,
                       format_table, m1_scalar_logit, predict_logits, train_module)
from .fusion import M1Model
from .streams import M2Model, region_extract

log = logging.getLogger("hfmf")

CALIBRATION_SPLITS = ("train", "val", "test")


class UsageError(HFMFError):
    """Bad flags or config values (exit code 2)."""


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    bins: int = 15
    data: str | None = None
    out: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        train_keys = {f.name for f in fields(TrainConfig)}
        allowed = train_keys | {"model", "bins", "data", "out"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        tkw = {k: d[k] for k in train_keys if k in d}
        if "split_fractions" in tkw:
            tkw["split_fractions"] = tuple(tkw["split_fractions"])
        rc = cls(TrainConfig(**tkw), ModelConfig.from_dict(d.get("model", {})),
                 int(d.get("bins", 15)), d.get("data"), d.get("out", "runs"))
        rc.validate()
        return rc

    def validate(self) -> None:
        if self.bins < 1:
            raise ConfigurationError(f"bins must be >= 1, got {self.bins}")

    def to_dict(self) -> dict:
        t = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        t["split_fractions"] = list(t["split_fractions"])
        return {**t, "model": self.model.to_dict(), "bins": self.bins, "data": self.data, "out": self.out}


def build_run_config(args) -> RunConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "bins", None) is not None:
        raw["bins"] = args.bins
    if getattr(args, "data", None):
        raw["data"] = args.data
    if getattr(args, "out", None):
        raw["out"] = args.out
    if getattr(args, "size", None) is not None:
        raw.setdefault("model", {})["image_size"] = args.size
    try:
        return RunConfig.from_dict(raw)
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------
def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2))


def _write_history(path: Path, history: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _load_corpus(rc: RunConfig) -> Corpus:
    if not rc.data:
        raise UsageError("--data is required")
    root = Path(rc.data)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    return load_dir(root, size=rc.model.image_size, seed=rc.train.seed)


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return path


def _load_platt(out: Path) -> PlattParams:
    return PlattParams.from_dict(json.loads(_require(out / "platt.json").read_text()))


def _load_all(out: Path):
    m1, _ = load_model(_require(out / "m1.ckpt"))
    m2, _ = load_model(_require(out / "m2.ckpt"))
    platt = _load_platt(out)
    ens, _ = load_model(_require(out / "ensemble.ckpt"), m1=m1, m2=m2, platt=platt)
    return m1, m2, platt, ens


def _limit_threads():
    from threadpoolctl import threadpool_limits

    # single-threaded BLAS keeps reductions (and therefore runs) bit-reproducible
    return threadpool_limits(1)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------
def cmd_synth(args) -> int:
    if args.n is None or args.n < 1:
        raise UsageError("--n must be a positive integer")
    if args.n < 2:
        raise UsageError("--n must be at least 2 images per class")
    if not args.out:
        raise UsageError("--out is required")
    size = args.size if args.size is not None else 32
    seed = args.seed if args.seed is not None else 42
    try:
        corpus = synth_generate(seed, args.n, size)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    out = write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.items)} images + manifest.json to {out}")
    return 0


def _save_trained(out: Path, name: str, res: TrainResult, rc: RunConfig, corpus: Corpus) -> dict:
    val = evaluate(res.model, corpus["val"]).to_dict()
    save_model(out / f"{name}.ckpt", res.model, metrics={"val": val},
               extra={"train": {k: v for k, v in rc.to_dict().items() if k != "out"}, "best_epoch": res.best_epoch})
    _write_history(out / f"history_{name}.csv", res.history)
    return {"val": val, "best_epoch": res.best_epoch, "epochs_run": res.epochs_run,
            "stopped_early": res.stopped_early}


def cmd_train(args) -> int:
    rc = build_run_config(args)
    corpus = _load_corpus(rc)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    module = args.module
    summary: dict = {}
    with _limit_threads():
        cfg = ModelConfig.from_dict({**rc.model.to_dict(), "image_size": corpus.manifest.image_size})
        if module in ("all", "m1"):
            res = train_module(M1Model(cfg, seed=rc.train.seed), corpus, rc.train)
            summary["m1"] = _save_trained(out, "m1", res, rc, corpus)
        if module in ("all", "m2"):
            res = train_module(M2Model(cfg, seed=rc.train.seed + 1), corpus, rc.train)
            summary["m2"] = _save_trained(out, "m2", res, rc, corpus)
        if module in ("all", "ensemble"):
            m1, _ = load_model(_require(out / "m1.ckpt"))
            m2, _ = load_model(_require(out / "m2.ckpt"))
            platt = fit_m1_platt(m1, corpus["val"])
            _write_json(out / "platt.json", platt.to_dict())
            res = train_module(EnsembleModel(m1, m2, platt, cfg, seed=rc.train.seed + 2), corpus, rc.train)
            summary["ensemble"] = _save_trained(out, "ensemble", res, rc, corpus)
            summary["platt"] = platt.to_dict()
    _write_json(out / "train_metrics.json", summary)
    for name in ("m1", "m2", "ensemble"):
        if name in summary:
            v = summary[name]["val"]
            print(f"{name:9s} val acc {v['accuracy']:.4f}  prec {v['precision']:.4f}  "
                  f"rec {v['recall']:.4f}  f1 {v['f1']:.4f}  (best epoch {summary[name]['best_epoch']})")
    return 0


def cmd_eval(args) -> int:
    rc = build_run_config(args)
    out = Path(rc.out)
    m1, m2, platt, ens = _load_all(out)
    corpus = _load_corpus(rc)
    with _limit_threads():
        rows = {"M1": accuracy_row(m1, corpus), "M2": accuracy_row(m2, corpus), "HFMF": accuracy_row(ens, corpus)}
        detail = {s: evaluate(ens, corpus[s]).to_dict() for s in EVAL_SPLITS}
    report = {"splits": list(EVAL_SPLITS), "accuracy": rows, "hfmf_metrics": detail}
    _write_json(out / "eval_report.json", report)
    text = format_table("Accuracy by split", rows, list(EVAL_SPLITS) + ["mean"])
    lines = [text, "", "HFMF classification scores",
             f"{'split':<8}{'acc':>10}{'prec':>10}{'rec':>10}{'f1':>10}"]
    for s, m in detail.items():
        lines.append(f"{s:<8}{m['accuracy']:>10.4f}{m['precision']:>10.4f}{m['recall']:>10.4f}{m['f1']:>10.4f}")
    text = "\n".join(lines)
    (out / "eval_report.txt").write_text(text + "\n")
    print(text)
    return 0


def _read_logits_file(path: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    if not path.exists():
        raise FileNotFoundError(f"logits file {path} does not exist")
    per: dict[str, tuple[list, list]] = {}
    with path.open() as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"split", "logit", "label"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: logits file needs columns split,logit,label")
        for row in reader:
            z, y = per.setdefault(row["split"], ([], []))
            z.append(float(row["logit"]))
            y.append(int(row["label"]))
    return {s: (np.array(z), np.array(y, dtype=np.int64)) for s, (z, y) in per.items()}


def calibration_report(per_split: dict[str, tuple[np.ndarray, np.ndarray]], bins: int, fit_split: str = "val"):
    """Fit Platt on ``fit_split`` and tabulate ECE before/after per split."""
    if fit_split not in per_split:
        raise UsageError(f"calibration needs a {fit_split!r} split to fit on")
    z_fit, y_fit = per_split[fit_split]
    platt = fit_platt(z_fit, y_fit)
    rows, probs, tables = [], {}, {}
    for s, (z, y) in per_split.items():
        p_uncal = apply_platt(z, PlattParams(1.0, 0.0))
        p_cal = apply_platt(z, platt)
        e_u, e_c = ece(p_uncal, y, bins), ece(p_cal, y, bins)
        pct = 100.0 * (e_u - e_c) / e_u if e_u > 0 else 0.0
        rows.append({"dataset": s, "ece_uncal": e_u, "ece_cal": e_c, "pct_decrease": pct})
        probs[s] = (y, np.atleast_1d(p_uncal), np.atleast_1d(p_cal))
        tables[s] = (reliability_table(p_uncal, y, bins), reliability_table(p_cal, y, bins))
    return platt, rows, probs, tables


def cmd_calibrate(args) -> int:
    rc = build_run_config(args)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.logits_file:
        per_split = _read_logits_file(Path(args.logits_file))
        ids = {s: [f"{s}_{i:05d}" for i in range(len(v[0]))] for s, v in per_split.items()}
    else:
        m1, _ = load_model(_require(out / "m1.ckpt"))
        corpus = _load_corpus(rc)
        per_split, ids = {}, {}
        with _limit_threads():
            for s in CALIBRATION_SPLITS:
                sp = corpus[s]
                if len(sp):
                    per_split[s] = (m1_scalar_logit(predict_logits(m1, m1.prepare(sp.images))), sp.labels)
                    ids[s] = sp.ids
    platt, rows, probs, tables = calibration_report(per_split, rc.bins)
    with (out / "calibration_probs.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "id", "label", "p_uncal", "p_cal"])
        for s, (y, pu, pc) in probs.items():
            for i, (yy, a, b) in enumerate(zip(y, pu, pc)):
                w.writerow([s, ids[s][i], int(yy), repr(float(a)), repr(float(b))])
    for s, (tu, tc) in tables.items():
        tu.to_csv(out / f"reliability_{s}_uncal.csv")
        tc.to_csv(out / f"reliability_{s}_cal.csv")
    report = {"bins": rc.bins, "platt": platt.to_dict(), "columns": ["dataset", "ece_uncal", "ece_cal", "pct_decrease"],
              "rows": rows}
    _write_json(out / "calibration_report.json", report)
    lines = [f"ECE ({rc.bins} bins), Platt fitted on val: A={platt.A:.4f} B={platt.B:.4f}",
             f"{'dataset':<10}{'ece_uncal':>12}{'ece_cal':>12}{'pct_decrease':>14}"]
    for r in rows:
        lines.append(f"{r['dataset']:<10}{r['ece_uncal']:>12.4f}{r['ece_cal']:>12.4f}{r['pct_decrease']:>13.2f}%")
    text = "\n".join(lines)
    (out / "calibration_report.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_explain(args) -> int:
    rc = build_run_config(args)
    out = Path(rc.out)
    m2, _ = load_model(_require(out / "m2.ckpt"))
    corpus = _load_corpus(rc)
    split = corpus["val"]
    heat_dir = out / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    if args.images:
        wanted = [s for s in args.images.split(",") if s]
        missing = [i for i in wanted if i not in split.ids]
        if missing:
            raise UsageError(f"unknown validation image ids: {missing}")
    else:
        wanted = split.ids[: (args.n if args.n is not None else 8)]
    rng = np.random.default_rng(rc.train.seed)
    rows, regions = [], {}
    with _limit_threads():
        for i, img_id in enumerate(split.ids):
            bbox = split.bboxes[i]
            want = img_id in wanted
            if bbox is None and not want:
                continue
            hm = gradcam(m2, split.images[i], 1)
            if want:
                export_heatmap(hm, heat_dir / f"{img_id}_class1.pgm")
                regions[img_id] = region_extract(split.images[i], k=m2.cfg.n_context).to_dict()
            if bbox is not None:
                rows.append({"id": img_id, "overlap": overlap_score(hm, bbox),
                             "random_baseline": random_box_baseline(hm, bbox, 100, rng)})
    with (out / "overlap.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "overlap", "random_baseline"])
        w.writeheader()
        for r in rows:
            w.writerow({"id": r["id"], "overlap": repr(r["overlap"]), "random_baseline": repr(r["random_baseline"])})
    summary = {"n_fake": len(rows), "n_heatmaps": len(wanted),
               "mean_overlap": float(np.mean([r["overlap"] for r in rows])) if rows else 0.0,
               "mean_random_baseline": float(np.mean([r["random_baseline"] for r in rows])) if rows else 0.0}
    _write_json(out / "explain_summary.json", summary)
    if args.dump_regions:
        Path(args.dump_regions).write_text(json.dumps(regions, indent=1, sort_keys=True))
    print(f"{len(wanted)} heatmaps in {heat_dir}; mean overlap {summary['mean_overlap']:.4f} "
          f"vs random {summary['mean_random_baseline']:.4f} over {len(rows)} fake images")
    return 0


def cmd_ablate(args) -> int:
    rc = build_run_config(args)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = _load_corpus(rc)
    with _limit_threads():
        pipeline = None
        if all((out / f).exists() for f in ("m1.ckpt", "m2.ckpt", "platt.json", "ensemble.ckpt")):
            m1, m2, platt, ens = _load_all(out)
            pipeline = PipelineResult(TrainResult(m1), TrainResult(m2), platt, TrainResult(ens))
        tables = ablation_report(corpus, rc.train, rc.model, pipeline=pipeline)
    _write_json(out / "ablation.json", tables.to_dict())
    cols = list(tables.splits) + ["mean"]
    text = "\n\n".join([format_table("Module 1 ablation", {k: tables.m1[k] for k in M1_ABLATION_ROWS}, cols),
                        format_table("Module 2 ablation", {k: tables.m2[k] for k in M2_ABLATION_ROWS}, cols)])
    (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return 0


# --------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hfmf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run config (flags override it)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="run directory for checkpoints and reports")
        if data:
            sp.add_argument("--data", help="corpus directory with real/ and fake/")
        sp.add_argument("--size", type=int, help="image size")

    sp = sub.add_parser("synth", help="generate the synthetic corpus")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n", type=int, required=True, help="images per class")
    sp.add_argument("--size", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train M1, M2, Platt and the ensemble")
    common(sp)
    sp.add_argument("--module", choices=("all", "m1", "m2", "ensemble"), default="all")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy / precision / recall / F1 report")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("calibrate", help="ECE before and after Platt scaling")
    common(sp)
    sp.add_argument("--bins", type=int)
    sp.add_argument("--logits-file", help="CSV (split,logit,label) used instead of M1 outputs")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("explain", help="Grad-CAM heatmaps and overlap scores")
    common(sp)
    sp.add_argument("--n", type=int, help="number of validation images to export heatmaps for")
    sp.add_argument("--images", help="comma-separated validation image ids to export")
    sp.add_argument("--dump-regions", help="write the RegionSet of exported images as JSON")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("ablate", help="Module 1 / Module 2 ablation tables")
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hfmf: error: {exc}", file=sys.stderr)
        return 2
    except (HFMFError, OSError, ValueError, KeyError) as exc:
        print(f"hfmf: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

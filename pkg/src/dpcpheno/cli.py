"""``dpcpheno`` command line: synth, train, eval, ablate, gradcheck, summarize, export-figures.

Exit codes: 0 success, 1 usage error, 2 runtime or numerical error. Every
command writes ``artifacts.json`` (path -> sha256) into ``--out``; wall-clock
times go to ``timing.json`` only. On failure the files a command created are
removed again.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("dpcpheno")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument("--config", type=Path, default=None, help="TOML config with [train], [loss], [model] tables")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpcpheno", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic dataset with known oracle ceilings")
    _common(p)
    p.add_argument("--n", type=int, default=300, help="records per class")
    p.add_argument("--kappa", type=float, default=1.0, help="morphology-marker coupling in [0, 1]")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--ambiguity", type=float, default=0.05)
    p.add_argument("--split", default="0.7,0.15,0.15", help="train,val,test fractions")

    p = sub.add_parser("train", help="train a model on a dataset container")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--variant", default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("ablate", help="train every variant over several seeds")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default="full,cnn_only,vit_only,cls_only,reg_only")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    _common(p)
    p.add_argument("--skip-model", action="store_true", help="ops only")

    p = sub.add_parser("summarize", help="grounded text summary from an evidence bundle")
    _common(p)
    p.add_argument("--evidence", type=Path, required=True, help="evidence.json written by eval")
    p.add_argument("--endpoint", default=None, help="optional summary endpoint URL")
    p.add_argument("--timeout", type=float, default=30.0)

    p = sub.add_parser("export-figures", help="long-format CSV data for scatter and violin plots")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    return parser


# -- helpers -----------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in rows])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")
    return path


def _train_config(args):
    from .pipeline import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "variant", None):
        updates["variant"] = args.variant
    if getattr(args, "epochs", None):
        updates["epochs"] = args.epochs
    return replace(cfg, **updates) if updates else cfg


def _data(path: Path):
    from .data import load_dataset

    return load_dataset(path)


# -- commands ----------------------------------------------------------------

def cmd_synth(args, out: Path) -> None:
    from .data import save_dataset
    from .synth import SynthConfig, split_dataset, synthesize

    fracs = [float(v) for v in args.split.split(",")]
    if len(fracs) != 3 or any(f < 0 for f in fracs) or abs(sum(fracs) - 1) > 1e-9:
        raise UsageError("--split needs three non-negative fractions summing to 1")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    seed = args.seed if args.seed is not None else 0
    ds, oracle = synthesize(SynthConfig(n_per_class=args.n, kappa=args.kappa, noise_sigma=args.noise,
                                        ambiguity=args.ambiguity, seed=seed))
    total = len(ds)
    n_train = int(round(fracs[0] * total))
    n_val = int(round(fracs[1] * total))
    ds = split_dataset(ds, {"train": n_train, "val": n_val, "test": total - n_train - n_val}, seed=seed)
    save_dataset(ds, out / "dataset")
    ceilings = {}
    for name, ids in ds.splits.items():
        if ids:
            acc, r = oracle.ceiling(ids)
            ceilings[name] = {"accuracy": acc, "marker_r": r.tolist(), "mean_r": float(np.mean(r))}
    _write_json(out / "oracle.json", {"kappa": args.kappa, "noise_sigma": args.noise,
                                      "ambiguity": args.ambiguity, "seed": seed, "ceilings": ceilings})


def cmd_train(args, out: Path) -> None:
    cfg = _train_config(args)
    ds = _data(args.data)
    from .pipeline import train

    result = train(cfg, ds, out)
    _write_json(out / "train_config.json", cfg.to_dict())
    final = result.log.epochs[-1]
    log.info("done: best epoch %d, final val accuracy %s, val mean r %s", result.best_epoch,
             final["val_accuracy"], final["val_mean_r"])


def _evaluate_split(args):
    from .pipeline import evaluate

    ds = _data(args.data)
    if args.split not in ds.splits:
        raise UsageError(f"split {args.split!r} not in dataset (have {sorted(ds.splits)})")
    records = ds.split(args.split)
    report, probs, reg = evaluate(args.checkpoint, records)
    return ds, records, report, probs, reg


def cmd_eval(args, out: Path) -> None:
    from .summarizer import build_evidence

    _, records, report, probs, reg = _evaluate_split(args)
    report.write(out)
    labels = np.array([r.cls for r in records])
    bundle = build_evidence(report, probs, reg, labels)
    (out / "evidence.json").write_text(bundle.to_json() + "\n", encoding="utf-8")


def cmd_ablate(args, out: Path) -> None:
    from .pipeline import ABLATION_VARIANTS, ablate

    cfg = _train_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"--seeds: {e}") from e
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad or not seeds:
        raise UsageError(f"unknown variant(s) {bad}" if bad else "--seeds is empty")
    rows = ablate(cfg, _data(args.data), variants, seeds, out_dir=out / "runs")
    summaries = [r.summary() for r in rows]
    _write_json(out / "ablation.json", {"seeds": seeds, "rows": summaries})
    cols = ["accuracy", "macro_f1", "pearson_r", "rmse"]
    table = []
    for s in summaries:
        row = [s["variant"]]
        for c in cols:
            m, sd = s[f"{c}_mean"], s[f"{c}_std"]
            row += ["", ""] if m is None else [m, sd]
        table.append(row)
    header = ["variant"] + [f"{c}_{k}" for c in cols for k in ("mean", "std")]
    _write_csv(out / "ablation.csv", header, table)


def cmd_gradcheck(args, out: Path) -> None:
    from .gradsuite import run_all

    rows = run_all(seed=args.seed or 0, include_model=not args.skip_model)
    report = {"passed": all(r.passed for r in rows),
              "max_rel_error": {"float64": max(r.max_rel_error for r in rows if r.dtype == "float64"),
                                "float32": max(r.max_rel_error for r in rows if r.dtype == "float32")},
              "checks": [{"name": r.name, "dtype": r.dtype, "max_rel_error": r.max_rel_error, "tol": r.tol,
                          "passed": r.passed} for r in rows]}
    _write_json(out / "gradcheck.json", report)
    _write_csv(out / "gradcheck.csv", ["op", "dtype", "max_rel_error", "tol", "passed"],
               [[r.name, r.dtype, r.max_rel_error, r.tol, r.passed] for r in rows])
    args._timing = {r.name + ":" + r.dtype: r.seconds for r in rows}
    if not report["passed"]:
        failed = [f"{r.name} ({r.dtype}) {r.max_rel_error:.2e}" for r in rows if not r.passed]
        raise RuntimeError("gradient check failed: " + ", ".join(failed))


def cmd_summarize(args, out: Path) -> None:
    from .summarizer import EndpointConfig, EvidenceBundle, llm_summarize, render_summary

    try:
        bundle = EvidenceBundle.from_dict(json.loads(args.evidence.read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise RuntimeError(f"cannot read evidence bundle {args.evidence}: {e}") from e
    if args.endpoint:
        text = llm_summarize(bundle, EndpointConfig(args.endpoint, timeout=args.timeout))
    else:
        text = render_summary(bundle)
    (out / "summary.txt").write_text(text + "\n", encoding="utf-8")
    print(text)


def _slug(name: str) -> str:
    return "".join(c.lower() if c.isalnum() else "_" for c in name).strip("_")


def cmd_export_figures(args, out: Path) -> None:
    from .data import ZScoreStats
    from .checkpoint import read_manifest

    ds, records, report, probs, reg = _evaluate_split(args)
    if reg is None:
        raise RuntimeError("export-figures needs a checkpoint with a regression head")
    meta = read_manifest(args.checkpoint).get("meta", {})
    measured = np.stack([r.markers for r in records]).astype(np.float64)
    if "zscore" in meta:
        stats = ZScoreStats.from_dict(meta["zscore"])
        measured = (measured - stats.marker_mean) / stats.marker_std
    true = [ds.class_names[r.cls] for r in records]
    pred = [ds.class_names[int(i)] for i in probs.argmax(axis=1)] if probs is not None else [""] * len(records)
    long_rows = []
    for j, marker in enumerate(ds.marker_names):
        rows = [[rec.id, true[i], pred[i], measured[i, j], float(reg[i, j])] for i, rec in enumerate(records)]
        _write_csv(out / f"scatter_{_slug(marker)}.csv", ["id", "true_class", "predicted_class", "measured", "predicted"], rows)
        for i, rec in enumerate(records):
            long_rows.append([rec.id, marker, true[i], "measured", measured[i, j]])
            long_rows.append([rec.id, marker, pred[i] or true[i], "predicted", float(reg[i, j])])
    _write_csv(out / "violin_long.csv", ["id", "marker", "class", "source", "value"], long_rows)
    report.write(out / "tables")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "summarize": cmd_summarize,
    "export-figures": cmd_export_figures,
}


def _snapshot(out: Path) -> set[Path]:
    return set(out.rglob("*")) if out.exists() else set()


def _cleanup(out: Path, before: set[Path], keep: Path | None = None) -> None:
    """Remove what this command created, except ``keep`` (a last-good checkpoint)."""
    keep = keep.resolve() if keep is not None else None

    def kept(p: Path) -> bool:
        if keep is None:
            return False
        r = p.resolve()
        return r == keep or keep in r.parents or r in keep.parents

    for p in sorted(_snapshot(out) - before, key=lambda p: len(p.parts), reverse=True):
        if kept(p):
            continue
        if p.is_dir():
            shutil.rmtree(p, ignore_errors=True)
        else:
            p.unlink(missing_ok=True)


def write_manifest(out: Path, command: str) -> Path:
    skip = {"artifacts.json", "timing.json"}
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name not in skip)
    manifest = {"command": command,
                "artifacts": {str(p.relative_to(out)): _sha256(p) for p in files}}
    return _write_json(out / "artifacts.json", manifest)


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    out: Path = args.out
    existed = out.exists()
    before = _snapshot(out)
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out)
        write_manifest(out, args.command)
        timing = {"command": args.command, "seconds": time.perf_counter() - t0}
        timing.update(getattr(args, "_timing", {}))
        _write_json(out / "timing.json", timing)
    except UsageError as e:
        _cleanup(out, before)
        if not existed and out.exists() and not any(out.iterdir()):
            out.rmdir()
        print(f"{parser.format_usage()}dpcpheno: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every failure maps to exit 2
        last_good = getattr(e, "last_good", None)
        _cleanup(out, before, last_good)
        if not existed and out.exists() and not any(out.iterdir()):
            out.rmdir()
        print(f"dpcpheno {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        if last_good is not None:
            print(f"last good checkpoint: {last_good}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

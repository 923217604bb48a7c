"""Command-line pipeline: synth -> sample -> extract -> train/eval -> report.

Each stage reads the previous stage's artifact from disk and writes its
own, so every step is independently rerunnable; a ``run.json`` with the
resolved configuration, seed and library versions accompanies every
output. Exit codes: 0 success, 1 runtime failure, 2 bad flags.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .deep import PreprocessSpec, extract_deep_batch, load_model
from .errors import MagscopeError
from .evaluation import cross_validate, make_folds
from .forest import ForestClassifier, save_forest
from .lbp import extract_lbp_batch, get_preset
from .mlp import MlpClassifier, TrainConfig, save_mmlp, train as train_mlp
from .pyramid import (SamplerConfig, build_dataset, ingest_manifest, read_index,
                      synth_slide, write_manifest)
from .report import (load_report_json, render_heatmap_svg, write_confusion_csv,
                     write_folds_csv, write_report_json)
from .store import FeatureStore, load_magf, save_csv, save_magf


def _default_threads() -> int:
    env = os.environ.get("MAGSCOPE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _add_common(parser: argparse.ArgumentParser, out_help: str) -> None:
    parser.add_argument("--seed", type=int, default=42, help="master seed (default 42)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: MAGSCOPE_THREADS or all cores)")
    parser.add_argument("--out", required=True, help=out_help)


def _threads(args) -> int:
    return args.threads if args.threads is not None else _default_threads()


def _write_run_json(args, command: str, where: Path, extra: dict | None = None) -> None:
    """Reproducibility record next to the command's outputs (no timestamps,
    so identical runs stay byte-identical)."""
    payload = {
        "command": command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": args.seed,
        "threads": _threads(args),
        "versions": {
            "magscope": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        payload.update(extra)
    if where.is_dir():
        run_path = where / "run.json"
    else:
        run_path = where.parent / (where.name + ".run.json")
    run_path.write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")


def _parse_mix(text: str) -> tuple[int, int]:
    try:
        p40, p20 = (int(part) for part in text.split(":"))
    except ValueError:
        raise MagscopeError(f"--base-power-mix must look like '8:2', got {text!r}") from None
    if p40 < 0 or p20 < 0 or p40 + p20 == 0:
        raise MagscopeError("--base-power-mix parts must be non-negative and not both zero")
    return p40, p20


def cmd_synth(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p40, p20 = _parse_mix(args.base_power_mix)
    n40 = round(args.slides * p40 / (p40 + p20))

    def render(i: int):
        base = 40.0 if i < n40 else 20.0
        return synth_slide(f"s{i:04d}", args.width, args.height, args.seed,
                           base_power=base, out_dir=out / "slides")

    threads = _threads(args)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            slides = list(pool.map(render, range(args.slides)))
    else:
        slides = [render(i) for i in range(args.slides)]
    write_manifest(slides, out / "manifest.jsonl", relative_to=out)
    _write_run_json(args, "synth", out, {"slides_written": len(slides), "base40": n40})
    print(f"wrote {len(slides)} slides ({n40} at 40x, {len(slides) - n40} at 20x) to {out}")


def cmd_sample(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = ingest_manifest(args.manifest)
    if result.discarded:
        print(f"discarded {result.discarded} slide(s) without a 20x/40x base layer")
    cfg = SamplerConfig(points_per_slide=args.points, patch_size=args.patch_size, seed=args.seed)
    records = build_dataset(result.slides, cfg, out, threads=_threads(args))
    _write_run_json(args, "sample", out, {"patches": len(records),
                                          "slides": len(result.slides),
                                          "discarded": result.discarded})
    print(f"wrote {len(records)} patches from {len(result.slides)} slides to {out}")


def _save_store(store: FeatureStore, args) -> Path:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_magf(store, out)
    if args.csv_out:
        save_csv(store, args.csv_out)
    return out


def cmd_extract_lbp(args) -> None:
    records = read_index(args.index)
    cfg = get_preset(args.preset)
    store = extract_lbp_batch(records, cfg, threads=_threads(args))
    out = _save_store(store, args)
    _write_run_json(args, "extract-lbp", out, {"patches": len(store), "dim": store.dim})
    print(f"wrote {len(store)} x {store.dim} LBP features ({args.preset}) to {out}")


def cmd_extract_deep(args) -> None:
    records = read_index(args.index)
    handle = load_model(args.model)
    store = extract_deep_batch(records, handle, PreprocessSpec(), batch_size=args.batch_size)
    out = _save_store(store, args)
    _write_run_json(args, "extract-deep", out, {"patches": len(store), "dim": store.dim})
    print(f"wrote {len(store)} x {store.dim} deep features to {out}")


def cmd_train_rf(args) -> None:
    store = load_magf(args.features)
    clf = ForestClassifier(n_trees=args.trees, max_depth=args.max_depth,
                           seed=args.seed, n_jobs=_threads(args))
    clf.fit(store.values.astype(np.float64), store.labels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_forest(clf.forest_, out)
    _write_run_json(args, "train-rf", out, {"n_trees": args.trees, "max_depth": args.max_depth})
    print(f"wrote forest of {args.trees} trees to {out}")


def cmd_train_mlp(args) -> None:
    store = load_magf(args.features)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.learning_rate, seed=args.seed)
    params, history = train_mlp(store.values.astype(np.float64), store.labels, cfg=cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mmlp(params, out, cfg=cfg, loss_history=history)
    _write_run_json(args, "train-mlp", out, {
        "final_loss": history[-1] if history else None,
        "determinism": "blas-threaded linear algebra; rerun tolerance 1e-6 relative",
    })
    print(f"wrote MLP ({store.dim} -> 512 -> 256 -> 5) to {out}; "
          f"final loss {history[-1]:.4f}" if history else f"wrote untrained MLP to {out}")


def _make_estimator(args):
    if args.classifier == "rf":
        return ForestClassifier(n_trees=args.trees, max_depth=args.max_depth,
                                seed=args.seed, n_jobs=_threads(args))
    if args.classifier == "mlp":
        return MlpClassifier(epochs=args.epochs, batch_size=args.batch_size,
                             learning_rate=args.learning_rate, seed=args.seed)
    raise MagscopeError(f"unknown classifier {args.classifier!r}")


def cmd_eval(args) -> None:
    store = load_magf(args.features)
    slide_ids = None
    if args.strategy == "slide":
        if not args.index:
            raise MagscopeError("--strategy slide needs --index to map patches to slides")
        by_id = {r.patch_id: r.slide_id for r in read_index(args.index)}
        try:
            slide_ids = [by_id[p] for p in store.patch_ids]
        except KeyError as exc:
            raise MagscopeError(f"patch {exc} in store but not in index") from exc
    plan = make_folds(store.labels, slide_ids=slide_ids, n_folds=args.folds,
                      strategy=args.strategy, stratified=args.stratified, seed=args.seed)
    report = cross_validate(store, _make_estimator(args), plan, seed=args.seed)
    report.extra["determinism"] = ("blas-threaded linear algebra; rerun tolerance 1e-6 relative"
                                   if args.classifier == "mlp" else "exact")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out)
    _write_run_json(args, "eval", out, {"mean": report.mean, "std": report.std})
    mean, std = report.mean, report.std
    for m in report.per_fold:
        print(f"fold {m.fold + 1}: acc {m.accuracy:.3f}  kappa {m.kappa:.3f}  f1 {m.f1:.3f}")
    print(f"all folds: acc {mean['accuracy']:.3f} ± {std['accuracy']:.3f}  "
          f"kappa {mean['kappa']:.3f} ± {std['kappa']:.3f}  "
          f"f1 {mean['f1']:.3f} ± {std['f1']:.3f}")


def cmd_report(args) -> None:
    report = load_report_json(args.metrics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = report["label_order"]
    cm = np.asarray(report["confusion"], dtype=np.int64)
    write_folds_csv(report, out / "folds.csv")
    write_confusion_csv(cm, labels, out / "confusion.csv")
    render_heatmap_svg(cm, labels, out / "confusion.svg",
                       title=f"Confusion matrix ({report.get('classifier', '?')})")
    _write_run_json(args, "report", out)
    print(f"wrote folds.csv, confusion.csv, confusion.svg to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magscope",
        description="Magnification-level recognition pipeline for microscopy patches.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic virtual slides")
    p.add_argument("--slides", type=int, default=10, help="number of slides")
    p.add_argument("--width", type=int, default=3840)
    p.add_argument("--height", type=int, default=3840)
    p.add_argument("--base-power-mix", default="8:2",
                   help="ratio of 40x to 20x base slides, e.g. 8:2")
    _add_common(p, "output directory (slides/, manifest.jsonl)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="sample center-aligned patches at all magnifications")
    p.add_argument("--manifest", required=True, help="JSONL slide manifest")
    p.add_argument("--points", type=int, default=5, help="sample points per slide")
    p.add_argument("--patch-size", type=int, default=224)
    _add_common(p, "output directory (patches/, index.csv)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("extract", help="compute feature stores")
    ex = p.add_subparsers(dest="extractor", required=True)

    pl = ex.add_parser("lbp", help="rotation-invariant uniform LBP histograms")
    pl.add_argument("--index", required=True, help="patch index CSV")
    pl.add_argument("--preset", default="LBP1", choices=["LBP1", "LBP2", "LBP3"])
    pl.add_argument("--csv-out", default=None, help="also write the CSV form here")
    _add_common(pl, "output feature store (.magf)")
    pl.set_defaults(func=cmd_extract_lbp)

    pd = ex.add_parser("deep", help="pooled embeddings from an ONNX backbone")
    pd.add_argument("--index", required=True, help="patch index CSV")
    pd.add_argument("--model", required=True, help="ONNX model file")
    pd.add_argument("--batch-size", type=int, default=8)
    pd.add_argument("--csv-out", default=None, help="also write the CSV form here")
    _add_common(pd, "output feature store (.magf)")
    pd.set_defaults(func=cmd_extract_deep)

    p = sub.add_parser("train", help="fit a classifier on a feature store")
    tr = p.add_subparsers(dest="model_kind", required=True)

    prf = tr.add_parser("rf", help="random forest")
    prf.add_argument("--features", required=True, help="feature store (.magf)")
    prf.add_argument("--trees", type=int, default=1000)
    prf.add_argument("--max-depth", type=int, default=50)
    _add_common(prf, "output model file (.json)")
    prf.set_defaults(func=cmd_train_rf)

    pm = tr.add_parser("mlp", help="shallow network")
    pm.add_argument("--features", required=True, help="feature store (.magf)")
    pm.add_argument("--epochs", type=int, default=30)
    pm.add_argument("--batch-size", type=int, default=128)
    pm.add_argument("--learning-rate", type=float, default=1e-3)
    _add_common(pm, "output model file (.mmlp)")
    pm.set_defaults(func=cmd_train_mlp)

    p = sub.add_parser("eval", help="cross-validated evaluation of a feature store")
    p.add_argument("--features", required=True, help="feature store (.magf)")
    p.add_argument("--classifier", required=True, choices=["rf", "mlp"])
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--strategy", default="patch", choices=["patch", "slide"])
    p.add_argument("--stratified", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--index", default=None, help="patch index CSV (needed for --strategy slide)")
    p.add_argument("--trees", type=int, default=1000, help="rf: number of trees")
    p.add_argument("--max-depth", type=int, default=50, help="rf: depth cap")
    p.add_argument("--epochs", type=int, default=30, help="mlp: training epochs")
    p.add_argument("--batch-size", type=int, default=128, help="mlp: batch size")
    p.add_argument("--learning-rate", type=float, default=1e-3, help="mlp: learning rate")
    _add_common(p, "output metrics JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a metrics JSON to CSV/SVG")
    p.add_argument("--metrics", required=True, help="metrics JSON from eval")
    _add_common(p, "output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (MagscopeError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``symseg {preprocess|synth|train|eval|ablate|interpret|report|run}``.

Exit codes: 0 success, 2 validation/usage errors, 1 runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import SymSegConfig
from .errors import ValidationError

log = logging.getLogger("symseg")


def _config(args) -> SymSegConfig:
    cfg = SymSegConfig.load(args.config) if args.config else SymSegConfig.desk()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _cache_root(args) -> Path:
    root = os.environ.get("SYMSEG_CACHE")
    return Path(root) if root else Path(args.out) / "cache"


def _find_volumes(root: Path):
    """Yield (volume_id, loader) pairs for NIfTI triples or PNG slice directories under `root`."""
    from .data import load_nifti_volume, load_png_volume

    for img in sorted(root.glob("*_image.nii*")):
        vid = img.name.split("_image")[0]
        ext = img.name[len(vid) + len("_image"):]
        mask = root / f"{vid}_mask{ext}"
        lung = root / f"{vid}_lung{ext}"
        if not mask.exists():
            raise ValidationError(f"missing infection mask for {img.name}")
        yield vid, lambda i=img, m=mask, l=lung, v=vid: load_nifti_volume(
            i, m, l if l.exists() else None, cohort=root.name, volume_id=v)
    for d in sorted(p for p in root.iterdir() if p.is_dir() and (p / "image").is_dir()):
        lung = d / "lung"
        yield d.name, lambda d=d, l=lung: load_png_volume(
            d / "image", d / "mask", l if l.is_dir() else None, cohort=root.name, volume_id=d.name)


def cmd_preprocess(args) -> int:
    from .data import PreprocessParams, SplitSpec, build_manifest, preprocess_volume

    root = Path(args.input)
    if not root.is_dir():
        raise ValidationError(f"input directory not found: {root}")
    params = PreprocessParams(margin=args.margin, size=args.size)
    samples = []
    for vid, load in _find_volumes(root):
        rec = load()
        out = preprocess_volume(rec, params)
        log.info("volume %s: %d slices", vid, len(out))
        samples.extend(out)
    if not samples:
        raise ValidationError(f"no usable volumes under {root}")
    spec = SplitSpec(train=0, val=args.val_volumes, test=args.test_volumes, seed=args.split_seed)
    cache = Path(args.out)
    manifest = build_manifest(samples, spec, cache, {"source": str(root), **params.__dict__})
    print(f"wrote {len(manifest.entries)} slices to {cache / 'manifest.json'}")
    return 0


def cmd_synth(args) -> int:
    from .pipeline import phantom_manifest

    cfg = _config(args)
    cache = _cache_root(args)
    manifest = phantom_manifest(cfg, cache)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote phantoms {counts} to {cache / 'manifest.json'}")
    return 0


def _data(args, cfg):
    from .data import load_manifest

    return load_manifest(args.manifest) if args.manifest else None


def cmd_train(args) -> int:
    from .pipeline import run_experiment

    cfg = _config(args)
    art = run_experiment(cfg, args.out, _data(args, cfg), interpret=False, resume=not args.fresh)
    print(json.dumps({"checkpoint": art.checkpoint, "aggregates": art.aggregates}, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    from .pipeline import run_experiment, run_pair

    cfg = _config(args)
    if args.with_baseline:
        sym, base = run_pair(cfg, args.out, _data(args, cfg))
        print(json.dumps({"symbolic": sym.aggregates, "baseline": base.aggregates}, sort_keys=True))
    else:
        art = run_experiment(cfg, args.out, _data(args, cfg), resume=not args.fresh)
        print(json.dumps({"aggregates": art.aggregates, "interpretation": art.interpretation}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .pipeline import load_model
    from .train import evaluate

    model, cfg, _ = load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    samples = manifest.load_samples(args.split)
    if not samples:
        raise ValidationError(f"manifest has no '{args.split}' slices")
    report = evaluate(model, samples, split=args.split)
    out = Path(args.out)
    report.write_csv(out / "eval.csv")
    report.write_json(out / "eval.json", {"config_hash": cfg.hash(), "checkpoint": str(args.checkpoint)})
    print(json.dumps(report.aggregates, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import DEFAULT_GRID, run_ablation

    cfg = _config(args)
    grid = DEFAULT_GRID
    if args.grid:
        grid = [tuple(int(v) for v in cell.split(",")) for cell in args.grid]
    res = run_ablation(cfg, args.out, grid, _data(args, cfg))
    print((Path(args.out) / "ablation.txt").read_text(), end="")
    print(f"dice spread: {res.dice_spread:.4f}")
    return 0


def cmd_interpret(args) -> int:
    from .interpret import analyze, permutation_control, write_results
    from .metrics import EvalReport

    report = EvalReport.read_csv(args.eval_csv)
    rows = report.rows if args.split == "all" else report.subset(args.split).rows
    sentences = [[int(t) for t in r.sentence.split()] for r in rows if r.sentence]
    if not sentences or len(sentences) != len(rows):
        raise ValidationError("evaluation CSV has no symbol sentences (baseline model?)")
    present = [r.covid_present for r in rows]
    areas = [r.infection_area for r in rows]
    meta = {"model": args.model, "n_symbols": len(sentences[0]), "split": args.split}
    results = []
    for kind in ("presence", "area"):
        res = analyze(sentences, present, areas, kind, args.positions, meta=meta)
        col = [s[res.best_position - 1] for s in sentences]
        res.meta["permutation_mean"] = permutation_control(col, present, areas, kind, args.permutations, rng=0)
        results.append(res)
    paths = write_results(results, args.out)
    print(paths["text"].read_text(), end="")
    return 0


def cmd_report(args) -> int:
    import numpy as np

    from .data import load_manifest
    from .metrics import save_overlays
    from .pipeline import load_model
    from .train import predict

    model, _, _ = load_model(args.checkpoint)
    samples = load_manifest(args.manifest).load_samples(args.split)[: args.n]
    if not samples:
        raise ValidationError(f"manifest has no '{args.split}' slices")
    probs, syms = predict(model, np.stack([s.image for s in samples]))
    items = [{"image": s.image, "target": s.mask, "pred": probs[i],
              "sentence": " ".join(map(str, syms[i])) if syms is not None else "",
              "name": f"{s.volume_id}_{s.slice_index:04d}"} for i, s in enumerate(samples)]
    for p in save_overlays(items, args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file (defaults to the desk-scale preset)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=fn)
        return p

    p = add("preprocess", cmd_preprocess, "crop/normalise/resize CT volumes into a slice cache")
    p.add_argument("--input", required=True, help="directory of <id>_image/_mask[/_lung].nii.gz or <id>/{image,mask}/ PNGs")
    p.add_argument("--margin", type=int, default=20)
    p.add_argument("--size", type=int, default=400)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--test-volumes", type=int, default=3)
    p.add_argument("--val-volumes", type=int, default=0)

    add("synth", cmd_synth, "generate a phantom dataset and its manifest")

    for name, fn, help_ in [("train", cmd_train, "train and evaluate one configuration"),
                            ("run", cmd_run, "train, evaluate and interpret (optionally with a baseline)")]:
        p = add(name, fn, help_)
        p.add_argument("--manifest", help="dataset manifest; phantoms from the config when omitted")
        p.add_argument("--fresh", action="store_true", help="ignore a completed run in --out")
        if name == "run":
            p.add_argument("--with-baseline", action="store_true")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")

    p = add("ablate", cmd_ablate, "sweep sentence length and vocabulary size")
    p.add_argument("--manifest")
    p.add_argument("--grid", nargs="*", help="cells as N_S,V (default 8,1000 8,10000 16,1000 16,10000)")

    p = add("interpret", cmd_interpret, "regress symbol positions on presence and area")
    p.add_argument("--eval-csv", required=True)
    p.add_argument("--positions", type=int, default=4)
    p.add_argument("--split", default="test", help="'test', 'train' or 'all'")
    p.add_argument("--permutations", type=int, default=100)
    p.add_argument("--model", default="")

    p = add("report", cmd_report, "overlay images with ground truth, prediction and sentence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--n", type=int, default=2)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"symseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"symseg {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

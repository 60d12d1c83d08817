"""Run orchestration: phantom data, train -> eval -> interpret runs, baseline pairing and ablation sweeps."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbones import load_checkpoint, save_checkpoint, state_digest
from .config import SymSegConfig
from .data import DatasetManifest, SegmentationSample, SplitSpec, build_manifest, generate_phantoms
from .errors import SymSegError, UndefinedFitError, ValidationError
from .interpret import RegressionResult, analyze, permutation_control, write_results
from .interpret import format_table
from .metrics import EvalReport
from .model import SymSegModel
from .train import TrainResult, evaluate, split_train_val, train

log = logging.getLogger(__name__)

DEFAULT_GRID = [(8, 1000), (8, 10000), (16, 1000), (16, 10000)]


def phantom_data(config: SymSegConfig) -> tuple[list[SegmentationSample], list[SegmentationSample]]:
    """Train and test phantom sets, seeded independently from `split_seed`."""
    train_set = generate_phantoms(config.n_train, config.image_size, rng=[config.split_seed, 0], prefix="train-")
    test_set = generate_phantoms(config.n_test, config.image_size, rng=[config.split_seed, 1], prefix="test-")
    return train_set, test_set


def phantom_manifest(config: SymSegConfig, cache_dir) -> DatasetManifest:
    train_set, test_set = phantom_data(config)
    fit, val = split_train_val(train_set, config.val_fraction, config.split_seed)
    split_of = {s.volume_id: "train" for s in fit}
    split_of.update({s.volume_id: "val" for s in val})
    split_of.update({s.volume_id: "test" for s in test_set})
    params = {"source": "phantom", "size": config.image_size, "n_train": config.n_train,
              "n_test": config.n_test, "split_seed": config.split_seed, "val_fraction": config.val_fraction}
    spec = SplitSpec(1.0 - config.val_fraction, config.val_fraction, 0.0, config.split_seed)
    return build_manifest(train_set + test_set, spec, cache_dir, params, split_of=split_of)


def build_model(config: SymSegConfig) -> SymSegModel:
    torch.manual_seed(config.seed)
    return SymSegModel.from_config(config)


def save_model(path, model: SymSegModel, config: SymSegConfig, extra: Optional[dict] = None) -> None:
    state = model.state_dict()
    meta = {"backbone": config.backbone, "config": config.to_dict(), "config_hash": config.hash(),
            "state_digest": state_digest(state)}
    meta.update(extra or {})
    save_checkpoint(path, state, meta)


def load_model(path) -> tuple[SymSegModel, SymSegConfig, dict]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"checkpoint not found: {p}")
    meta, state = load_checkpoint(p)
    config = SymSegConfig.from_dict(meta["config"])
    model = SymSegModel.from_config(config)
    model.load_state_dict(state)
    model.eval()
    return model, config, meta


@dataclass
class RunArtifact:
    run_id: str
    config_hash: str
    out_dir: str
    checkpoint: str
    train_log: str
    eval_csv: str
    eval_json: str
    regression_json: Optional[str]
    aggregates: dict
    best_epoch: int
    epochs_run: int
    interpretation: dict = field(default_factory=dict)

    def save(self) -> None:
        Path(self.out_dir, "run.json").write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, out_dir) -> "RunArtifact":
        return cls(**json.loads(Path(out_dir, "run.json").read_text()))

    def paths_exist(self) -> bool:
        paths = [self.checkpoint, self.train_log, self.eval_csv, self.eval_json]
        if self.regression_json:
            paths.append(self.regression_json)
        return all(Path(p).exists() for p in paths)


def interpret_report(report: EvalReport, config: SymSegConfig, permutations: int = 100,
                     model_name: Optional[str] = None) -> tuple[list[RegressionResult], dict]:
    """Presence and area regressions over the analysed symbol positions, with permutation controls at S*."""
    rows = report.rows if config.regression_split == "all" else report.subset("test").rows
    sentences = [[int(t) for t in r.sentence.split()] for r in rows]
    present = [r.covid_present for r in rows]
    areas = [r.infection_area for r in rows]
    meta = {"model": model_name or ("S" + config.backbone), "n_symbols": config.n_symbols,
            "vocab_size": config.vocab_size, "split": config.regression_split}
    results, summary = [], {}
    for kind in ("presence", "area"):
        try:
            res = analyze(sentences, present, areas, kind, config.analyzed_positions, meta=meta)
        except UndefinedFitError as exc:
            summary[kind] = {"error": str(exc)}
            continue
        col = [s[res.best_position - 1] for s in sentences]
        perm = permutation_control(col, present, areas, kind, permutations, rng=config.seed)
        res.meta["permutation_mean"] = perm
        results.append(res)
        summary[kind] = {"best_position": res.best_position, "fit": res.best_fit, "fits": res.fits,
                         "permutation_mean": perm}
    return results, summary


def run_experiment(config: SymSegConfig, out_dir, data=None, interpret: bool = True,
                   resume: bool = True) -> RunArtifact:
    """Train, evaluate and (for symbolic models) interpret one configuration.

    `data` is (train, test) samples or a DatasetManifest; phantoms are
    generated from the config otherwise. A completed run with the same config
    hash in `out_dir` is reused.
    """
    out = Path(out_dir)
    if resume and (out / "run.json").exists():
        art = RunArtifact.load(out)
        if art.config_hash == config.hash() and art.paths_exist():
            log.info("reusing completed run in %s", out)
            return art
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")

    if isinstance(data, DatasetManifest):
        fit, val, test = data.load_samples("train"), data.load_samples("val"), data.load_samples("test")
    else:
        train_set, test = data if data is not None else phantom_data(config)
        fit, val = split_train_val(train_set, config.val_fraction, config.split_seed)

    model = build_model(config)
    result: TrainResult = train(model, fit, config, val=val, out_dir=out)
    ckpt = out / "model.ckpt"
    save_model(ckpt, model, config, {"best_epoch": result.best_epoch, "epochs_run": result.epochs_run})

    report = evaluate(model, test, split="test")
    if interpret and config.symbolic and config.regression_split == "all":
        evaluate(model, fit + val, split="train", report=report)
    report.write_csv(out / "eval.csv")
    test_report = report.subset("test")
    test_report.write_json(out / "eval.json", {"config_hash": config.hash()})

    reg_path, summary = None, {}
    if interpret and config.symbolic:
        results, summary = interpret_report(report, config)
        if results:
            reg_path = str(write_results(results, out)["json"])
    art = RunArtifact(
        run_id=out.name, config_hash=config.hash(), out_dir=str(out), checkpoint=str(ckpt),
        train_log=str(out / "train_log.jsonl"), eval_csv=str(out / "eval.csv"), eval_json=str(out / "eval.json"),
        regression_json=reg_path, aggregates=test_report.aggregates, best_epoch=result.best_epoch,
        epochs_run=result.epochs_run, interpretation=summary,
    )
    art.save()
    return art


def run_pair(config: SymSegConfig, out_dir, data=None) -> tuple[RunArtifact, RunArtifact]:
    """Symbolic run and its identically seeded baseline (symbol channel disabled)."""
    out = Path(out_dir)
    data = data if data is not None else phantom_data(config)
    sym = run_experiment(config.replace(symbolic=True), out / "symbolic", data)
    base = run_experiment(config.replace(symbolic=False), out / "baseline", data)
    return sym, base


@dataclass
class AblationResult:
    cells: list[dict]
    best: Optional[dict]

    @property
    def dice_spread(self) -> float:
        vals = [c["dice"] for c in self.cells if c.get("status") == "ok"]
        return float(max(vals) - min(vals)) if vals else float("nan")

    def table_rows(self) -> list[list[str]]:
        rows = []
        for c in self.cells:
            mark = "*" if self.best is not None and c is self.best else ""
            if c["status"] == "ok":
                rows.append([f"N_S={c['n_symbols']}, V={c['vocab_size']}", f"{c['dice']:.4f}",
                             f"{c['s_measure']:.4f}", f"{c['mae']:.4f}", mark])
            else:
                rows.append([f"N_S={c['n_symbols']}, V={c['vocab_size']}", "-", "-", "-", c["status"]])
        return rows

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = ["parameters", "dice", "s_measure", "mae", "best"]
        rows = self.table_rows()
        (out / "ablation.txt").write_text(format_table(header, rows))
        import csv

        with (out / "ablation.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        (out / "ablation.json").write_text(json.dumps({"cells": self.cells, "dice_spread": self.dice_spread},
                                                      sort_keys=True, indent=2) + "\n")


def run_ablation(config: SymSegConfig, out_dir, grid: Sequence[tuple[int, int]] = DEFAULT_GRID,
                 data=None, interpret: bool = False) -> AblationResult:
    """Train/evaluate every (N_S, V) cell on shared data. Failed cells are recorded and the sweep continues."""
    out = Path(out_dir)
    data = data if data is not None else phantom_data(config)
    cells = []
    for n_symbols, vocab_size in grid:
        cell = {"n_symbols": n_symbols, "vocab_size": vocab_size}
        try:
            cfg = config.replace(n_symbols=n_symbols, vocab_size=vocab_size, symbolic=True)
            art = run_experiment(cfg, out / f"ns{n_symbols}_v{vocab_size}", data, interpret=interpret)
            cell.update(art.aggregates, status="ok", run_dir=art.out_dir)
        except (SymSegError, RuntimeError, ValueError) as exc:
            log.exception("ablation cell N_S=%s V=%s failed", n_symbols, vocab_size)
            cell.update(status=f"failed: {exc}")
        cells.append(cell)
    ok = [c for c in cells if c["status"] == "ok"]
    best = max(ok, key=lambda c: c["dice"]) if ok else None
    res = AblationResult(cells, best)
    res.write(out)
    return res

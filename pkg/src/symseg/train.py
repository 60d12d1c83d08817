"""End-to-end training with early stopping, batched inference and evaluation."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbones import save_checkpoint
from .config import SymSegConfig
from .data import SegmentationSample, augment, stack_samples
from .errors import DivergenceError, ValidationError
from .metrics import EvalReport, dice
from .model import SymSegModel, loss_from_logits

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    best_epoch: int
    epochs_run: int
    best_val_loss: float
    stopped_early: bool
    history: list[dict] = field(default_factory=list)


def split_train_val(samples: Sequence[SegmentationSample], val_fraction: float, seed: int):
    """Per-volume random split of training slices into train and validation."""
    vols = sorted({s.volume_id for s in samples})
    n_val = int(round(val_fraction * len(vols)))
    if val_fraction > 0 and len(vols) > 1:
        n_val = min(max(n_val, 1), len(vols) - 1)
    order = np.random.default_rng(seed).permutation(len(vols))
    val_vols = {vols[i] for i in order[:n_val]}
    return [s for s in samples if s.volume_id not in val_vols], [s for s in samples if s.volume_id in val_vols]


def make_optimizer(model: torch.nn.Module, config: SymSegConfig) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    return torch.optim.Adam(model.parameters(), lr=config.lr)


def _to_batch(images: np.ndarray, masks: np.ndarray):
    return torch.from_numpy(images).unsqueeze(1), torch.from_numpy(masks.astype(np.float32)).unsqueeze(1)


@torch.no_grad()
def validation_loss(model: SymSegModel, images: np.ndarray, masks: np.ndarray, config: SymSegConfig,
                    batch_size: int = 32) -> tuple[float, float]:
    """Mean loss and mean Dice over a held-out set, inference mode."""
    model.eval()
    total, dices = 0.0, []
    for i in range(0, len(images), batch_size):
        x, y = _to_batch(images[i:i + batch_size], masks[i:i + batch_size])
        out = model(x)
        _, rep = loss_from_logits(out.logits, y, config.bce_weight, config.dice_weight)
        total += rep.total * len(x)
        probs = out.probs[:, 0].numpy()
        dices.extend(dice(p, m) for p, m in zip(probs, masks[i:i + batch_size]))
    return total / len(images), float(np.mean(dices))


def train(model: SymSegModel, dataset: Sequence[SegmentationSample], config: SymSegConfig,
          val: Optional[Sequence[SegmentationSample]] = None, out_dir=None) -> TrainResult:
    """Optimise `model` in place; on return it holds the best-validation weights.

    Without an explicit `val` set, `config.val_fraction` of the training
    volumes is held out. Early stopping follows the usual convention: stop after
    `patience` consecutive non-improving epochs (after the first one when
    patience is 0). If `out_dir` is given the per-epoch log is written to
    `train_log.jsonl` there.
    """
    if not dataset:
        raise ValidationError("training set is empty")
    if val is None:
        train_set, val_set = split_train_val(dataset, config.val_fraction, config.split_seed)
    else:
        train_set, val_set = list(dataset), list(val)
    images, masks = stack_samples(train_set)
    val_arrays = stack_samples(val_set) if val_set else None

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "train_log.jsonl").open("w")

    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = make_optimizer(model, config)
    best_loss, best_epoch, wait = math.inf, 0, 0
    best_state = copy.deepcopy(model.state_dict())
    history: list[dict] = []
    stopped = False
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            epoch_start_state = copy.deepcopy(model.state_dict())
            model.train()
            order = rng.permutation(len(train_set))
            sums = np.zeros(3)
            for i in range(0, len(order), config.batch_size):
                idx = order[i:i + config.batch_size]
                if config.augment:
                    aug = [augment(train_set[j], rng, max_rotation=config.rotation_deg,
                                   scale_range=config.scale_range) for j in idx]
                    bi, bm = stack_samples(aug)
                else:
                    bi, bm = images[idx], masks[idx]
                x, y = _to_batch(bi, bm)
                out_ = model(x, generator=gen)
                try:
                    loss, rep = loss_from_logits(out_.logits, y, config.bce_weight, config.dice_weight, step=step)
                    diverged = not math.isfinite(rep.total)
                except DivergenceError:
                    diverged = True
                if diverged:
                    state = model.state_dict()
                    finite = all(torch.isfinite(v).all() for v in state.values() if v.is_floating_point())
                    ckpt = None
                    if out is not None:
                        ckpt = out / "last_finite.ckpt"
                        save_checkpoint(ckpt, state if finite else epoch_start_state,
                                        {"config": config.to_dict(), "epoch": epoch, "step": step})
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}",
                                          step=step, epoch=epoch, checkpoint=ckpt)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                sums += np.array([rep.total, rep.bce_term, rep.dice_term]) * len(idx)
                step += 1
            train_loss, train_bce, train_dice = sums / len(train_set)
            if val_arrays is not None:
                val_loss, val_dice = validation_loss(model, *val_arrays, config)
            else:
                val_loss, val_dice = float(train_loss), float("nan")
            improved = val_loss < best_loss
            if improved:
                best_loss, best_epoch, wait = val_loss, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                wait += 1
            rec = {"epoch": epoch, "train_loss": float(train_loss), "train_bce": float(train_bce),
                   "train_dice_loss": float(train_dice), "val_loss": float(val_loss), "val_dice": float(val_dice),
                   "improved": improved, "wall_time": round(time.perf_counter() - t0, 3)}
            history.append(rec)
            log.info("epoch %d train %.4f val %.4f dice %.4f", epoch, train_loss, val_loss, val_dice)
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            if not improved and wait >= max(config.patience, 1):
                stopped = True
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(best_epoch, len(history), float(best_loss), stopped, history)


@torch.no_grad()
def predict(model: SymSegModel, images: np.ndarray, batch_size: int = 32):
    """Inference-mode probabilities (N, H, W) and symbols (N, N_S) or None."""
    model.eval()
    probs, syms = [], []
    for i in range(0, len(images), batch_size):
        out = model(torch.from_numpy(np.asarray(images[i:i + batch_size], dtype=np.float32)).unsqueeze(1))
        probs.append(out.probs[:, 0].numpy())
        if out.symbols is not None:
            syms.append(out.symbols.numpy())
    return np.concatenate(probs), (np.concatenate(syms) if syms else None)


def evaluate(model: SymSegModel, samples: Sequence[SegmentationSample], split: str = "test",
             report: Optional[EvalReport] = None, batch_size: int = 32) -> EvalReport:
    report = report if report is not None else EvalReport()
    images, masks = stack_samples(samples)
    probs, syms = predict(model, images, batch_size)
    for k, s in enumerate(samples):
        sentence = " ".join(map(str, syms[k])) if syms is not None else ""
        report.add(f"{s.volume_id}:{s.slice_index}", probs[k], masks[k], sentence, split)
    return report

"""Segmentation quality metrics (Dice, S-measure, MAE) and the evaluation report."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError

_EPS = np.finfo(np.float64).eps


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValidationError(f"pred shape {pred.shape} != target shape {target.shape}")
    return pred, target.astype(bool)


def dice(pred, target, threshold: float = 0.5) -> float:
    """2|P∩T| / (|P|+|T|) after binarising pred at `threshold`; 1.0 when both are empty."""
    pred, target = _pair(pred, target)
    p = pred >= threshold
    denom = int(p.sum()) + int(target.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & target).sum()) / denom


def mae(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.abs(pred - target).mean())


# S-measure (structure measure) for a [0, 1] foreground map against a binary mask:
# S = alpha * S_object + (1 - alpha) * S_region.

def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + _EPS)


def s_object(pred, target) -> float:
    pred, gt = _pair(pred, target)
    u = gt.mean()
    fg = _object_score(pred[gt])
    bg = _object_score(1.0 - pred[~gt])
    return float(u * fg + (1.0 - u) * bg)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    if n > 1:
        sx = ((pred - x) ** 2).sum() / (n - 1)
        sy = ((gt - y) ** 2).sum() / (n - 1)
        sxy = ((pred - x) * (gt - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + _EPS))
    return 1.0 if b == 0 else 0.0


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(gt)
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def s_region(pred, target) -> float:
    pred, gt = _pair(pred, target)
    h, w = gt.shape
    cx, cy = _centroid(gt)
    gtf = gt.astype(np.float64)
    score = 0.0
    for rows in (slice(0, cy), slice(cy, h)):
        for cols in (slice(0, cx), slice(cx, w)):
            p, g = pred[rows, cols], gtf[rows, cols]
            if g.size:
                score += g.size / (h * w) * _ssim(p, g)
    return float(score)


def s_measure(pred, target, alpha: float = 0.5) -> float:
    pred, gt = _pair(pred, target)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    s = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt)
    return float(min(max(s, 0.0), 1.0))


# -- report -----------------------------------------------------------------

@dataclass
class EvalRow:
    sample_id: str
    dice: float
    s_measure: float
    mae: float
    sentence: str
    covid_present: bool
    infection_area: int
    split: str = "test"


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, sample_id, pred, target, sentence: str = "", split: str = "test") -> EvalRow:
        target = np.asarray(target)
        area = int(target.astype(bool).sum())
        row = EvalRow(sample_id, dice(pred, target), s_measure(pred, target), mae(pred, target),
                      sentence, area > 0, area, split)
        self.rows.append(row)
        return row

    def subset(self, split: Optional[str]) -> "EvalReport":
        return self if split is None else EvalReport([r for r in self.rows if r.split == split])

    @property
    def aggregates(self) -> dict[str, float]:
        if not self.rows:
            return {"dice": float("nan"), "s_measure": float("nan"), "mae": float("nan"), "n": 0}
        return {
            "dice": float(np.mean([r.dice for r in self.rows])),
            "s_measure": float(np.mean([r.s_measure for r in self.rows])),
            "mae": float(np.mean([r.mae for r in self.rows])),
            "n": len(self.rows),
        }

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = list(EvalRow.__dataclass_fields__)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=names)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(asdict(r))

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"evaluation CSV not found: {path}")
        rows = []
        with path.open(newline="") as fh:
            for d in csv.DictReader(fh):
                rows.append(EvalRow(d["sample_id"], float(d["dice"]), float(d["s_measure"]), float(d["mae"]),
                                    d["sentence"], d["covid_present"] == "True", int(d["infection_area"]),
                                    d.get("split", "test")))
        return cls(rows)

    def write_json(self, path, extra: Optional[dict] = None) -> None:
        payload = {"aggregates": self.aggregates}
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def overlay_figure(image, target, pred, sentence: str = "", threshold: float = 0.5, title: str = ""):
    """Matplotlib figure with ground-truth (green) and prediction (red) contours, captioned by the sentence."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4.4))
    ax.imshow(np.asarray(image), cmap="gray")
    t = np.asarray(target).astype(float)
    p = (np.asarray(pred) >= threshold).astype(float)
    if t.any() and not t.all():
        ax.contour(t, levels=[0.5], colors="lime", linewidths=1.0)
    if p.any() and not p.all():
        ax.contour(p, levels=[0.5], colors="red", linewidths=1.0)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    fig.text(0.5, 0.03, sentence, ha="center", fontsize=10, family="monospace")
    return fig


def save_overlays(items: Sequence[dict], out_dir) -> list[Path]:
    """Write one PNG per item (keys: image, target, pred, sentence, name)."""
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for it in items:
        fig = overlay_figure(it["image"], it["target"], it["pred"], it.get("sentence", ""), title=it.get("name", ""))
        path = out / f"{it['name']}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        paths.append(path)
    return paths

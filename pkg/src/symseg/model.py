"""Symbolic segmentation model: backbone -> Sender -> sentence -> Receiver -> fused mask.

The backbone logits x and the Receiver's spatialised output x' are stacked as
two channels and passed through a 3x3 convolution and a sigmoid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbones import build_backbone
from .config import SymSegConfig
from .el import Receiver, Sender, SymbolSentence
from .errors import DivergenceError, ValidationError

PROB_EPS = 1e-6


class SpatialProjector(nn.Module):
    """Linear map from a hidden vector to a coarse grid, bilinearly upsampled to the image size."""

    def __init__(self, in_dim: int, image_size: int, grid_size: int):
        super().__init__()
        if image_size % grid_size:
            raise ValidationError(f"grid {grid_size} does not tile image size {image_size}")
        self.in_dim = in_dim
        self.image_size = image_size
        self.grid_size = grid_size
        self.linear = nn.Linear(in_dim, grid_size * grid_size)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.in_dim:
            raise ValidationError(f"projector expects dim {self.in_dim}, got {h.shape[-1]}")
        g = self.linear(h).view(-1, 1, self.grid_size, self.grid_size)
        return upsample(g, self.image_size)


class SummaryNorm(nn.BatchNorm1d):
    """Batch-standardises the pooled summary so the Sender sees between-image variation.

    A single-image batch in training mode falls back to the running statistics.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] < 2:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias, False, 0.0, self.eps)
        return super().forward(x)


def upsample(grid: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(grid, size=(size, size), mode="bilinear", align_corners=False)


@dataclass
class SymSegOutput:
    logits: torch.Tensor  # (B, 1, H, W) fused, pre-sigmoid
    x: torch.Tensor  # backbone logits
    x_prime: Optional[torch.Tensor]  # Receiver channel, None for the baseline
    symbols: Optional[torch.Tensor]  # (B, N_S)
    messages: Optional[torch.Tensor]  # (B, N_S, V)

    @property
    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.logits).clamp(PROB_EPS, 1.0 - PROB_EPS)


class SymSegModel(nn.Module):
    def __init__(self, backbone: nn.Module, *, image_size: int, depth: int, symbolic: bool = True,
                 n_symbols: int = 8, vocab_size: int = 1000, embed_dim: int = 512,
                 temperature: float = 1.0, hard_mode: bool = False, sender_layers: int = 2,
                 receiver_layers: int = 1, feature_source: str = "logits", feature_dim: Optional[int] = None):
        super().__init__()
        self.backbone = backbone
        self.symbolic = symbolic
        self.image_size = image_size
        self.feature_source = feature_source
        if not symbolic:
            return
        if feature_source == "logits":
            sender_in = 1
        elif feature_source == "features":
            sender_in = feature_dim or getattr(backbone, "feature_dim", None)
            if sender_in is None:
                raise ValidationError("feature_source='features' needs the backbone feature dimension")
        else:
            raise ValidationError(f"unknown feature_source {feature_source!r}")
        self.summary_norm = SummaryNorm(sender_in)
        self.sender = Sender(sender_in, vocab_size, n_symbols, embed_dim, sender_layers, temperature, hard_mode)
        self.receiver = Receiver(vocab_size, embed_dim, receiver_layers)
        self.projector = SpatialProjector(embed_dim, image_size, image_size // 2 ** depth)
        self.fusion = nn.Conv2d(2, 1, 3, padding=1)

    @classmethod
    def from_config(cls, config: SymSegConfig) -> "SymSegModel":
        options = {"deep_supervision": config.deep_supervision}
        backbone = build_backbone(config.backbone, base_width=config.base_width, depth=config.depth,
                                  in_channels=config.in_channels, options=options)
        return cls(backbone, image_size=config.image_size, depth=config.depth, symbolic=config.symbolic,
                   n_symbols=config.n_symbols, vocab_size=config.vocab_size, embed_dim=config.embed_dim,
                   temperature=config.temperature, hard_mode=config.hard_mode,
                   sender_layers=config.sender_layers, receiver_layers=config.receiver_layers,
                   feature_source=config.feature_source)

    def feature_summary(self, out) -> torch.Tensor:
        if self.feature_source == "logits":
            return out.logits.mean(dim=(2, 3))
        return out.features

    def forward(self, image: torch.Tensor, noise: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None, drop_receiver: bool = False) -> SymSegOutput:
        if image.dim() == 3:
            image = image.unsqueeze(1)
        if image.shape[-2:] != (self.image_size, self.image_size):
            raise ValidationError(f"expected {self.image_size}x{self.image_size} input, got {tuple(image.shape[-2:])}")
        out = self.backbone(image)
        x = out.logits
        if not self.symbolic:
            return SymSegOutput(x, x, None, None, None)
        sent = self.sender(self.summary_norm(self.feature_summary(out)), noise=noise, generator=generator)
        x_prime = self.projector(self.receiver(sent.messages))
        if drop_receiver:
            x_prime = torch.zeros_like(x_prime)
        fused = self.fusion(torch.cat([x, x_prime], dim=1))
        return SymSegOutput(fused, x, x_prime, sent.symbols, sent.messages)


def spatial_project(projector: SpatialProjector, h) -> torch.Tensor:
    """Map a single hidden vector to an (H, W) map."""
    h = torch.as_tensor(h, dtype=projector.linear.weight.dtype)
    return projector(h.reshape(1, -1))[0, 0]


@torch.no_grad()
def symseg_forward(model: SymSegModel, image, mode: str = "inference",
                   generator: Optional[torch.Generator] = None):
    """Run one (H, W) image through the model.

    Returns (mask probabilities as an (H, W) array, SymbolSentence or None for a baseline model).
    """
    if mode not in ("training", "inference"):
        raise ValidationError(f"mode must be 'training' or 'inference', got {mode!r}")
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if img.dim() != 2:
        raise ValidationError(f"expected a 2D image, got shape {tuple(img.shape)}")
    was_training = model.training
    model.train(mode == "training")
    try:
        out = model(img[None, None], generator=generator)
    finally:
        model.train(was_training)
    mask = out.probs[0, 0].numpy()
    if out.symbols is None:
        return mask, None
    relaxed = out.messages[0].numpy() if mode == "training" else None
    return mask, SymbolSentence(tuple(out.symbols[0].tolist()), relaxed)


# -- loss -------------------------------------------------------------------

@dataclass(frozen=True)
class LossReport:
    total: float
    bce_term: float
    dice_term: float


def _dice_term(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    # per-sample soft Dice over all non-batch axes; a 2D input is one sample
    dims = tuple(range(1, pred.dim())) if pred.dim() > 2 else tuple(range(pred.dim()))
    inter = (pred * target).sum(dims)
    denom = pred.sum(dims) + target.sum(dims)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def _check(pred, target, step):
    if pred.shape != target.shape:
        raise ValidationError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if torch.isnan(pred).any():
        raise DivergenceError(f"NaN in predictions at step {step}", step=step)


def _report(bce, dice) -> LossReport:
    b, d = float(bce.detach()), float(dice.detach())
    return LossReport(b + d, b, d)


def loss_tensor(pred: torch.Tensor, target: torch.Tensor, bce_weight: float = 1.0, dice_weight: float = 1.0,
                step=None) -> tuple[torch.Tensor, LossReport]:
    """Differentiable BCE + soft-Dice loss on probabilities, with its report."""
    _check(pred, target, step)
    bce = bce_weight * F.binary_cross_entropy(pred, target)
    dice = dice_weight * _dice_term(pred, target)
    return bce + dice, _report(bce, dice)


def loss_from_logits(logits: torch.Tensor, target: torch.Tensor, bce_weight: float = 1.0,
                     dice_weight: float = 1.0, step=None) -> tuple[torch.Tensor, LossReport]:
    """Same loss evaluated from pre-sigmoid logits (stable BCE for training)."""
    _check(logits, target, step)
    bce = bce_weight * F.binary_cross_entropy_with_logits(logits, target)
    dice = dice_weight * _dice_term(torch.sigmoid(logits), target)
    return bce + dice, _report(bce, dice)


def compute_loss(pred, target, step=None) -> LossReport:
    pred = torch.as_tensor(np.asarray(pred) if not torch.is_tensor(pred) else pred, dtype=torch.float64)
    target = torch.as_tensor(np.asarray(target) if not torch.is_tensor(target) else target, dtype=torch.float64)
    if not ((target == 0) | (target == 1)).all():
        raise ValidationError("target must be binary")
    with torch.no_grad():
        _, report = loss_tensor(pred, target, step=step)
    if not all(math.isfinite(v) for v in (report.total, report.bce_term, report.dice_term)):
        raise DivergenceError(f"non-finite loss at step {step}", step=step)
    return report

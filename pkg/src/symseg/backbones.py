"""Encoder-decoder segmentation backbones and the backbone registry.

Every backbone returns pre-sigmoid logits with the input's spatial size plus
a pooled bottleneck feature vector; the sigmoid is applied downstream.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BackboneNotFoundError, RegistryError, ValidationError


@dataclass
class BackboneOutput:
    logits: torch.Tensor  # (B, 1, H, W), no sigmoid
    features: torch.Tensor  # (B, C) global-average-pooled bottleneck


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    base_width: int = 64
    depth: int = 4
    in_channels: int = 1
    options: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if not self.name:
            raise RegistryError("backbone name must be nonempty")
        if self.base_width < 1 or self.depth < 1 or self.in_channels < 1:
            raise ValidationError("backbone widths, depth and channels must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.depth + 1)]


def check_divisible(h: int, w: int, depth: int) -> None:
    k = 2 ** depth
    if h % k or w % k:
        ph, pw = (-h) % k, (-w) % k
        raise ValidationError(
            f"input {h}x{w} must be divisible by 2**depth={k}; pad by {ph} rows and {pw} columns")


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    def __init__(self, in_channels: int = 1, base_width: int = 64, depth: int = 4):
        super().__init__()
        ch = [base_width * 2 ** i for i in range(depth + 1)]
        self.depth = depth
        self.encoders = nn.ModuleList(ConvBlock(in_channels if i == 0 else ch[i - 1], ch[i]) for i in range(depth))
        self.bottleneck = ConvBlock(ch[depth - 1], ch[depth])
        self.ups = nn.ModuleList(nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in reversed(range(depth)))
        self.decoders = nn.ModuleList(ConvBlock(2 * ch[i], ch[i]) for i in reversed(range(depth)))
        self.head = nn.Conv2d(ch[0], 1, 1)
        self.feature_dim = ch[depth]

    def forward(self, image: torch.Tensor) -> BackboneOutput:
        check_divisible(image.shape[-2], image.shape[-1], self.depth)
        skips = []
        x = image
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        features = x.mean(dim=(2, 3))
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return BackboneOutput(self.head(x), features)


class UNetPlusPlus(nn.Module):
    """Nested UNet: node (i, j) sees all earlier nodes at level i plus the upsampled node (i+1, j-1)."""

    def __init__(self, in_channels: int = 1, base_width: int = 64, depth: int = 4, deep_supervision: bool = False):
        super().__init__()
        ch = [base_width * 2 ** i for i in range(depth + 1)]
        self.depth = depth
        self.deep_supervision = deep_supervision
        self.nodes = nn.ModuleDict()
        for i in range(depth + 1):
            self.nodes[f"{i}_0"] = ConvBlock(in_channels if i == 0 else ch[i - 1], ch[i])
        for j in range(1, depth + 1):
            for i in range(depth + 1 - j):
                self.nodes[f"{i}_{j}"] = ConvBlock(ch[i] * j + ch[i + 1], ch[i])
        n_heads = depth if deep_supervision else 1
        self.heads = nn.ModuleList(nn.Conv2d(ch[0], 1, 1) for _ in range(n_heads))
        self.feature_dim = ch[depth]

    def forward(self, image: torch.Tensor) -> BackboneOutput:
        check_divisible(image.shape[-2], image.shape[-1], self.depth)
        grid: dict[tuple[int, int], torch.Tensor] = {}
        x = image
        for i in range(self.depth + 1):
            x = self.nodes[f"{i}_0"](x if i == 0 else F.max_pool2d(x, 2))
            grid[i, 0] = x
        for j in range(1, self.depth + 1):
            for i in range(self.depth + 1 - j):
                up = F.interpolate(grid[i + 1, j - 1], scale_factor=2, mode="bilinear", align_corners=False)
                grid[i, j] = self.nodes[f"{i}_{j}"](torch.cat([grid[i, k] for k in range(j)] + [up], dim=1))
        features = grid[self.depth, 0].mean(dim=(2, 3))
        if self.deep_supervision:
            logits = torch.stack([h(grid[0, j + 1]) for j, h in enumerate(self.heads)]).mean(0)
        else:
            logits = self.heads[0](grid[0, self.depth])
        return BackboneOutput(logits, features)


# -- registry ---------------------------------------------------------------

Factory = Callable[[BackboneSpec], nn.Module]


@dataclass(frozen=True)
class RegistryEntry:
    spec: BackboneSpec
    factory: Factory

    def build(self, **overrides) -> nn.Module:
        spec = self.spec
        if overrides:
            options = dict(spec.options)
            options.update(overrides.pop("options", {}))
            spec = BackboneSpec(**{**spec.__dict__, **overrides, "options": options})
        return self.factory(spec)


_REGISTRY: dict[str, RegistryEntry] = {}


def register_backbone(spec: BackboneSpec, factory: Factory) -> RegistryEntry:
    """Make a backbone selectable by `spec.name`.

    `factory(spec)` must return an nn.Module whose forward maps an image batch
    (B, C, H, W) to a BackboneOutput with logits of shape (B, 1, H, W).
    """
    if spec.name in _REGISTRY:
        raise RegistryError(f"backbone {spec.name!r} is already registered")
    entry = RegistryEntry(spec, factory)
    _REGISTRY[spec.name] = entry
    return entry


def unregister_backbone(name: str) -> None:
    _REGISTRY.pop(name, None)


def get_backbone(name: str) -> RegistryEntry:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise BackboneNotFoundError(f"no backbone named {name!r}; known: {sorted(_REGISTRY)}") from None


def list_backbones() -> list[str]:
    return sorted(_REGISTRY)


def build_backbone(name: str, **overrides) -> nn.Module:
    return get_backbone(name).build(**overrides)


register_backbone(BackboneSpec("unet"), lambda s: UNet(s.in_channels, s.base_width, s.depth))
register_backbone(
    BackboneSpec("unetpp"),
    lambda s: UNetPlusPlus(s.in_channels, s.base_width, s.depth, s.options.get("deep_supervision", False)),
)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


# -- checkpoint archive -----------------------------------------------------
#
# Layout (little-endian):
#   8 bytes   magic b"SYMSEGCK"
#   8 bytes   uint64 header length L
#   L bytes   UTF-8 JSON header: {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
#   payload   raw tensor bytes; offsets are relative to the start of the payload

MAGIC = b"SYMSEGCK"
_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.float16: "<f2",
    torch.int64: "<i8", torch.int32: "<i4", torch.uint8: "|u1", torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def atomic_write_bytes(path, chunks) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, state_dict: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries, payloads, offset = [], [], 0
    for name, tensor in state_dict.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ValidationError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    atomic_write_bytes(path, [MAGIC, struct.pack("<Q", len(header)), header, *payloads])


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValidationError(f"{path} is not a checkpoint archive")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    state = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[e["dtype"]])
    return header["meta"], state


def state_digest(state_dict: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state_dict):
        h.update(name.encode())
        h.update(state_dict[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]

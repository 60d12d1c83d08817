import numpy as np
import pytest
import torch
from torch import nn

from symseg.backbones import (BackboneOutput, BackboneSpec, UNet, UNetPlusPlus, build_backbone, count_parameters,
                              get_backbone, list_backbones, load_checkpoint, register_backbone, save_checkpoint,
                              state_digest, unregister_backbone)
from symseg.config import SymSegConfig
from symseg.data import generate_phantoms
from symseg.errors import BackboneNotFoundError, RegistryError, ValidationError
from symseg.model import SymSegModel
from symseg.train import train

TOY = dict(base_width=4, depth=2)


@pytest.mark.parametrize("cls", [UNet, UNetPlusPlus])
def test_full_resolution_shape(cls):
    net = cls(1, base_width=2, depth=4).eval()
    with torch.no_grad():
        out = net(torch.randn(1, 1, 400, 400))
    assert out.logits.shape == (1, 1, 400, 400)
    assert torch.isfinite(out.logits).all()


@pytest.mark.parametrize("cls", [UNet, UNetPlusPlus])
def test_zero_head_gives_zero_logits(cls):
    net = cls(1, **TOY).eval()
    head = net.head if cls is UNet else net.heads[0]
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    with torch.no_grad():
        out = net(torch.zeros(1, 1, 64, 64))
    assert torch.count_nonzero(out.logits) == 0


@pytest.mark.parametrize("cls", [UNet, UNetPlusPlus])
def test_repeated_evaluation_is_stable(cls):
    net = cls(1, **TOY).eval()
    x = torch.randn(2, 1, 32, 32)
    with torch.no_grad():
        a, b = net(x).logits, net(x).logits
    assert a.shape == (2, 1, 32, 32)
    assert torch.isfinite(a).all()
    assert torch.equal(a, b)


@pytest.mark.parametrize("cls", [UNet, UNetPlusPlus])
def test_non_divisible_input_names_padding(cls):
    net = cls(1, **TOY)
    with pytest.raises(ValidationError, match="pad by 2 rows and 3 columns"):
        net(torch.randn(1, 1, 30, 29))


def test_unetpp_has_more_parameters_than_unet():
    for width, depth in [(16, 3), (64, 4), (4, 2)]:
        assert count_parameters(UNetPlusPlus(1, width, depth)) > count_parameters(UNet(1, width, depth))


def test_unetpp_deep_supervision_toggle():
    net = UNetPlusPlus(1, deep_supervision=True, **TOY).eval()
    assert len(net.heads) == 2
    with torch.no_grad():
        assert net(torch.randn(1, 1, 16, 16)).logits.shape == (1, 1, 16, 16)


def test_features_are_pooled_bottleneck():
    net = UNet(1, **TOY)
    out = net(torch.randn(3, 1, 16, 16))
    assert out.features.shape == (3, net.feature_dim) == (3, 16)


@pytest.mark.parametrize("name", ["unet", "unetpp"])
def test_gradient_flow_to_every_parameter(name):
    net = build_backbone(name, **TOY)
    x = torch.randn(4, 1, 16, 16)
    y = (torch.rand(4, 1, 16, 16) > 0.5).float()
    nn.functional.binary_cross_entropy_with_logits(net(x).logits, y).backward()
    for pname, p in net.named_parameters():
        assert p.grad is not None, pname
        assert torch.isfinite(p.grad).all(), pname
        assert p.grad.abs().sum() > 0, pname


def test_registry_lookup_identity():
    assert {"unet", "unetpp"} <= set(list_backbones())
    assert get_backbone("unet") is get_backbone("unet")
    assert isinstance(build_backbone("unet", **TOY), UNet)


def test_registry_unknown_and_duplicate():
    with pytest.raises(BackboneNotFoundError):
        get_backbone("infnet")
    with pytest.raises(RegistryError):
        register_backbone(BackboneSpec("unet"), lambda s: UNet())


class ToyBackbone(nn.Module):
    """A one-layer plug-in standing in for an external architecture."""

    def __init__(self, spec):
        super().__init__()
        self.conv = nn.Conv2d(spec.in_channels, spec.base_width, 3, padding=1)
        self.head = nn.Conv2d(spec.base_width, 1, 1)
        self.feature_dim = spec.base_width

    def forward(self, x):
        h = torch.relu(self.conv(x))
        return BackboneOutput(self.head(h), h.mean(dim=(2, 3)))


@pytest.fixture
def toy_registered():
    entry = register_backbone(BackboneSpec("toy-plugin", base_width=4, depth=2), ToyBackbone)
    yield entry
    unregister_backbone("toy-plugin")


def test_custom_backbone_trains_end_to_end(toy_registered):
    cfg = SymSegConfig(backbone="toy-plugin", base_width=4, depth=2, image_size=32, n_symbols=3, vocab_size=10,
                       embed_dim=8, epochs=1, batch_size=4, lr=1e-3, val_fraction=0.25)
    model = SymSegModel.from_config(cfg)
    assert isinstance(model.backbone, ToyBackbone)
    res = train(model, generate_phantoms(8, 32, rng=0), cfg)
    assert np.isfinite(res.history[0]["train_loss"])


def test_checkpoint_round_trip(tmp_path):
    net = UNetPlusPlus(1, **TOY)
    state = net.state_dict()
    save_checkpoint(tmp_path / "w.ckpt", state, {"backbone": "unetpp", "config_hash": "abc"})
    meta, loaded = load_checkpoint(tmp_path / "w.ckpt")
    assert meta == {"backbone": "unetpp", "config_hash": "abc"}
    assert loaded.keys() == state.keys()
    for k in state:
        assert loaded[k].dtype == state[k].dtype
        assert torch.equal(loaded[k], state[k])
    assert state_digest(loaded) == state_digest(state)


def test_checkpoint_header_is_json(tmp_path):
    save_checkpoint(tmp_path / "w.ckpt", {"a": torch.arange(3, dtype=torch.float32)}, {"backbone": "x"})
    raw = (tmp_path / "w.ckpt").read_bytes()
    assert raw[:8] == b"SYMSEGCK"
    n = int.from_bytes(raw[8:16], "little")
    import json

    header = json.loads(raw[16:16 + n])
    assert header["tensors"] == [{"name": "a", "dtype": "<f4", "shape": [3], "offset": 0, "nbytes": 12}]
    assert np.frombuffer(raw[16 + n:], "<f4").tolist() == [0.0, 1.0, 2.0]


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "bad")


def test_spec_validation():
    with pytest.raises(ValidationError):
        BackboneSpec("x", base_width=0)
    assert BackboneSpec("x", base_width=16, depth=3).widths == [16, 32, 64, 128]

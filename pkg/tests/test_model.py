import math

import numpy as np
import pytest
import torch
from torch import nn

from symseg.config import SymSegConfig
from symseg.el import Vocabulary
from symseg.errors import DivergenceError, ValidationError
from symseg.model import SpatialProjector, SymSegModel, compute_loss, loss_from_logits, loss_tensor, spatial_project, \
    symseg_forward, upsample

from .oracles import bce_dice_scalar


def toy_config(**kw):
    base = dict(base_width=4, depth=2, image_size=32, n_symbols=4, vocab_size=12, embed_dim=16)
    base.update(kw)
    return SymSegConfig(**base)


def test_full_scale_forward_shapes():
    cfg = SymSegConfig(base_width=2, depth=4, image_size=400, n_symbols=8, vocab_size=1000)
    model = SymSegModel.from_config(cfg)
    mask, sentence = symseg_forward(model, np.random.default_rng(0).normal(size=(400, 400)))
    assert mask.shape == (400, 400)
    assert len(sentence) == 8
    sentence.validate(8, Vocabulary(1000))
    assert ((mask > 0) & (mask < 1)).all()


def test_zero_fusion_gives_half_mask():
    model = SymSegModel.from_config(toy_config())
    nn.init.zeros_(model.fusion.weight)
    nn.init.zeros_(model.fusion.bias)
    mask, _ = symseg_forward(model, np.random.default_rng(0).normal(size=(32, 32)))
    np.testing.assert_array_equal(mask, np.full((32, 32), 0.5, dtype=np.float32))


def test_symbol_channel_receives_gradient():
    model = SymSegModel.from_config(toy_config()).train()
    x = torch.randn(4, 1, 32, 32)
    y = (torch.rand(4, 1, 32, 32) > 0.7).float()
    captured = {}
    orig = model.sender.forward

    def hook(inp, **kw):
        inp.retain_grad()
        captured["x"] = inp
        return orig(inp, **kw)

    model.sender.forward = hook
    out = model(x, generator=torch.Generator().manual_seed(0))
    loss, _ = loss_from_logits(out.logits, y)
    loss.backward()
    assert captured["x"].grad is not None
    assert captured["x"].grad.norm() > 0
    assert model.sender.to_vocab.weight.grad.norm() > 0
    assert model.receiver.out.weight.grad.norm() > 0


def test_inference_sentence_recomputation_identical():
    model = SymSegModel.from_config(toy_config())
    img = np.random.default_rng(3).normal(size=(32, 32))
    m1, s1 = symseg_forward(model, img)
    m2, s2 = symseg_forward(model, img)
    assert s1.symbols == s2.symbols
    np.testing.assert_array_equal(m1, m2)


def test_training_mode_returns_relaxed_sentence():
    model = SymSegModel.from_config(toy_config())
    _, s = symseg_forward(model, np.zeros((32, 32)), mode="training", generator=torch.Generator().manual_seed(0))
    s.validate(4, Vocabulary(12))
    assert s.relaxed is not None


def test_baseline_has_no_symbol_channel():
    model = SymSegModel.from_config(toy_config(symbolic=False))
    mask, sentence = symseg_forward(model, np.zeros((32, 32)))
    assert sentence is None and mask.shape == (32, 32)
    assert not hasattr(model, "sender")


def test_drop_receiver_changes_output():
    model = SymSegModel.from_config(toy_config()).eval()
    x = torch.randn(2, 1, 32, 32)
    with torch.no_grad():
        a = model(x).logits
        b = model(x, drop_receiver=True).logits
    assert not torch.equal(a, b)


def test_feature_source_features():
    model = SymSegModel.from_config(toy_config(feature_source="features"))
    assert model.sender.input_dim == model.backbone.feature_dim
    mask, s = symseg_forward(model, np.zeros((32, 32)))
    assert len(s) == 4


def test_wrong_image_size_rejected():
    model = SymSegModel.from_config(toy_config())
    with pytest.raises(ValidationError):
        symseg_forward(model, np.zeros((64, 64)))


# -- spatial projection -----------------------------------------------------

def test_projector_zero_input_zero_map():
    proj = SpatialProjector(16, 32, 8)
    nn.init.zeros_(proj.linear.bias)
    out = spatial_project(proj, torch.zeros(16))
    assert out.shape == (32, 32)
    assert torch.count_nonzero(out) == 0


def test_projector_full_scale_shape():
    proj = SpatialProjector(512, 400, 400 // 16)
    assert spatial_project(proj, torch.randn(512)).shape == (400, 400)


def test_constant_grid_upsamples_to_constant():
    grid = torch.full((1, 1, 25, 25), 0.37)
    out = upsample(grid, 400)
    np.testing.assert_allclose(out.numpy(), 0.37, atol=1e-6)


def test_projector_grid_must_tile_image():
    with pytest.raises(ValidationError):
        SpatialProjector(8, 30, 8)
    with pytest.raises(ValidationError):
        SpatialProjector(8, 32, 8)(torch.zeros(1, 9))


# -- loss -------------------------------------------------------------------

def test_perfect_prediction_loss_is_zero():
    t = (np.random.default_rng(0).random((16, 16)) > 0.5).astype(float)
    rep = compute_loss(t, t)
    assert rep.bce_term == pytest.approx(0.0, abs=1e-12)
    assert rep.dice_term == pytest.approx(0.0, abs=1e-12)


def test_half_prediction_bce_is_ln2():
    t = np.zeros((8, 8))
    t[:4] = 1
    rep = compute_loss(np.full((8, 8), 0.5), t)
    assert rep.bce_term == pytest.approx(math.log(2), abs=1e-12)


def test_loss_matches_scalar_recomputation(rng):
    for _ in range(10):
        p = rng.uniform(0.01, 0.99, size=(12, 12))
        t = (rng.random((12, 12)) > 0.6).astype(float)
        rep = compute_loss(p, t)
        bce, dice = bce_dice_scalar(p, t)
        assert rep.bce_term == pytest.approx(bce, abs=1e-8)
        assert rep.dice_term == pytest.approx(dice, abs=1e-8)


def test_loss_report_decomposes_exactly(rng):
    for _ in range(20):
        rep = compute_loss(rng.uniform(0.01, 0.99, size=(5, 5)), (rng.random((5, 5)) > 0.5).astype(float))
        assert rep.total == rep.bce_term + rep.dice_term
        assert rep.bce_term >= 0 and rep.dice_term >= 0


def test_logit_and_probability_losses_agree(rng):
    z = torch.tensor(rng.normal(size=(3, 1, 8, 8)))
    t = torch.tensor((rng.random((3, 1, 8, 8)) > 0.5).astype(float))
    _, a = loss_from_logits(z, t)
    _, b = loss_tensor(torch.sigmoid(z), t)
    assert a.total == pytest.approx(b.total, abs=1e-10)


def test_nan_prediction_raises_divergence():
    p = np.full((4, 4), 0.5)
    p[0, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        compute_loss(p, np.zeros((4, 4)), step=7)
    assert info.value.step == 7
    assert "step 7" in str(info.value)


def test_loss_shape_and_target_validation():
    with pytest.raises(ValidationError):
        compute_loss(np.full((4, 4), 0.5), np.zeros((4, 5)))
    with pytest.raises(ValidationError):
        compute_loss(np.full((4, 4), 0.5), np.full((4, 4), 0.5))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from symseg.errors import ValidationError
from symseg.metrics import EvalReport, dice, mae, s_measure, s_object, s_region, save_overlays

from .oracles import dice_bruteforce, mae_bruteforce, s_measure_ref, s_object_ref, s_region_ref


def test_dice_examples():
    t = np.zeros((4, 4), dtype=np.uint8)
    t[:2] = 1
    assert dice(t.astype(float), t) == 1.0
    assert dice(1.0 - t, t) == 0.0
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    half = t.astype(float).copy()
    half[1] = 0
    assert dice(half, t) == pytest.approx(2 * 4 / (4 + 8))


def test_mae_examples():
    assert mae(np.full((2, 2), 0.25), np.zeros((2, 2))) == 0.25
    assert mae(np.ones((3, 3)), np.ones((3, 3))) == 0.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dice_mae_match_bruteforce(rng):
    for _ in range(200):
        p = (rng.random((16, 16)) > rng.random()).astype(np.float64)
        t = (rng.random((16, 16)) > rng.random()).astype(np.uint8)
        assert dice(p, t) == dice_bruteforce(p, t)
        assert mae(p, t) == mae_bruteforce(p, t)


def random_pair(rng, size=16):
    t = np.zeros((size, size), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        y, x = rng.integers(0, size, 2)
        r = int(rng.integers(1, 5))
        t[max(0, y - r):y + r, max(0, x - r):x + r] = 1
    noise = rng.random((size, size))
    p = np.clip(0.6 * t + 0.4 * noise, 0, 1)
    return p, t


def test_s_measure_matches_reference(rng):
    for _ in range(50):
        p, t = random_pair(rng)
        assert s_object(p, t) == pytest.approx(s_object_ref(p, t.astype(bool)), abs=1e-6)
        assert s_region(p, t) == pytest.approx(s_region_ref(p, t.astype(bool)), abs=1e-6)
        assert s_measure(p, t) == pytest.approx(s_measure_ref(p, t), abs=1e-6)


def test_s_measure_identity_and_complement(rng):
    for _ in range(20):
        _, t = random_pair(rng)
        if t.all():
            continue
        assert s_measure(t.astype(float), t) == pytest.approx(1.0, abs=1e-9)
        assert s_measure(1.0 - t, t) < 0.5


def test_s_measure_alpha_one_is_object_term(rng):
    p, t = random_pair(rng)
    assert s_measure(p, t, alpha=1.0) == pytest.approx(min(max(s_object(p, t), 0.0), 1.0))


def test_s_measure_degenerate_ground_truth():
    p = np.full((4, 4), 0.2)
    assert s_measure(p, np.zeros((4, 4))) == pytest.approx(0.8)
    assert s_measure(p, np.ones((4, 4))) == pytest.approx(0.2)


unit = arrays(np.float64, (8, 8), elements=st.floats(0, 1))
mask = arrays(np.bool_, (8, 8))


@settings(max_examples=150, deadline=None)
@given(unit, mask)
def test_metric_ranges(p, t):
    for v in (dice(p, t), s_measure(p, t), mae(p, t)):
        assert 0.0 <= v <= 1.0


@settings(max_examples=150, deadline=None)
@given(mask, mask)
def test_dice_is_symmetric_on_binary_maps(a, b):
    assert dice(a.astype(float), b) == dice(b.astype(float), a)


def test_report_aggregates_and_csv_round_trip(tmp_path, rng):
    rep = EvalReport()
    for i in range(5):
        p, t = random_pair(rng)
        rep.add(f"s{i}", p, t, sentence="1 2 3", split="test" if i < 3 else "train")
    agg = rep.aggregates
    assert agg["n"] == 5
    assert agg["dice"] == pytest.approx(np.mean([r.dice for r in rep.rows]))
    rep.write_csv(tmp_path / "eval.csv")
    back = EvalReport.read_csv(tmp_path / "eval.csv")
    assert back.rows == rep.rows
    assert len(back.subset("test").rows) == 3
    rep.write_json(tmp_path / "eval.json", {"config_hash": "x"})
    assert "config_hash" in (tmp_path / "eval.json").read_text()


def test_empty_report_and_missing_csv(tmp_path):
    assert EvalReport().aggregates["n"] == 0
    with pytest.raises(ValidationError):
        EvalReport.read_csv(tmp_path / "nope.csv")


def test_overlays_written(tmp_path, rng):
    items = []
    for i in range(2):
        p, t = random_pair(rng, 32)
        items.append({"image": p, "target": t, "pred": p, "sentence": "4 8 15 16 23 42 7 9", "name": f"ov{i}"})
    paths = save_overlays(items, tmp_path)
    assert [p.name for p in paths] == ["ov0.png", "ov1.png"]
    assert all(p.stat().st_size > 0 for p in paths)

import numpy as np
import pytest

from gapfill.backbone import BackboneConfig
from gapfill.engine import Engine
from gapfill.errors import ConfigError, FormatError


def tiny_engine(seed=0, precision="32", **kw):
    base = dict(layers=2, heads=2, width=8, window_length=12, patch_length=4,
                dropout=0.0, max_seq=8)
    base.update(kw)
    return Engine.create(BackboneConfig(**base), seed=seed, precision=precision)


def test_save_load_round_trip_outputs_bit_identical(tmp_path):
    eng = tiny_engine(seed=1)
    rng = np.random.default_rng(2)
    vals = rng.standard_normal(12)
    mask = (rng.random(12) > 0.4).astype(float)
    before, _, _ = eng.impute_window(vals * mask, mask)
    path = tmp_path / "m.ckpt"
    eng.save(path)
    loaded = Engine.load(path)
    after, _, _ = loaded.impute_window(vals * mask, mask)
    assert before.tobytes() == after.tobytes()


def test_load_missing_meta_rejected(tmp_path):
    eng = tiny_engine()
    path = tmp_path / "m.ckpt"
    eng.save(path)
    (tmp_path / "m.ckpt.json").unlink()
    with pytest.raises(FormatError):
        Engine.load(path)


def test_load_shape_mismatch_names_tensor(tmp_path):
    eng = tiny_engine()
    path = tmp_path / "m.ckpt"
    eng.save(path)
    meta = Engine.read_meta(path)
    meta["model"]["window_length"] = 8
    import json

    (tmp_path / "m.ckpt.json").write_text(json.dumps(meta))
    with pytest.raises(ConfigError, match="head_w"):
        Engine.load(path)


def test_impute_fully_observed_returns_input(tmp_path):
    eng = tiny_engine(seed=3)
    rng = np.random.default_rng(4)
    vals = rng.standard_normal(12) * 5 + 2
    out, _, _ = eng.impute_window(vals, np.ones(12))
    np.testing.assert_array_equal(out, vals)


def test_impute_fills_missing_positions():
    eng = tiny_engine(seed=5)
    rng = np.random.default_rng(6)
    vals = rng.standard_normal(12)
    mask = np.ones(12)
    mask[3:6] = 0
    out, _, _ = eng.impute_window(vals * mask, mask)
    assert np.array_equal(out[mask > 0], vals[mask > 0])
    assert np.isfinite(out).all()


def test_domain_table_requires_label():
    eng = tiny_engine(seed=7, domains=["a", "b"])
    with pytest.raises(ConfigError):
        eng.impute_window(np.zeros(12), np.ones(12))
    out, _, _ = eng.impute_window(np.zeros(12), np.ones(12), domain="a")
    assert out.shape == (12,)


def test_params_namespace_is_stable():
    eng = tiny_engine(seed=8)
    names = set(eng.params())
    assert "embed.patch_w" in names
    assert "backbone.block0.attn_w" in names
    assert "backbone.wpe" in names and "contrast.w" in names

import numpy as np
import pytest

from cdfm3sf import tensor as T
from cdfm3sf.layers import Conv
from cdfm3sf.model import (BadMagicError, ChecksumError, ModelConfig, TruncatedError, VersionError,
                           audit, build_model, load_checkpoint, save_checkpoint)
from cdfm3sf.training import total_loss


def inputs(rng, b, s, variant="full13"):
    x = {"vnir": rng.random((b, s, s, 4))}
    if variant != "vnir4":
        x["vre_swir"] = rng.random((b, s // 2, s // 2, 6))
    if variant == "full13":
        x["ca_wv_cir"] = rng.random((b, s // 6, s // 6, 3))
    return x


def toy(variant="full13", seed=0):
    return build_model(ModelConfig(variant=variant, width=4, up_width=6, seed=seed))


def test_full13_output_pyramid_shapes():
    m = build_model()
    with T.no_grad():
        out = m.forward(inputs(np.random.default_rng(0), 1, 384))
    assert out.top.shape == (1, 384, 384, 1)
    assert out.middle.shape == (1, 192, 192, 1)
    assert out.bottom.shape == (1, 64, 64, 1)


def test_vnir4_shapes():
    m = toy("vnir4")
    out = m.forward({"vnir": np.random.default_rng(1).random((1, 96, 96, 4))})
    assert [p.shape[1] for p in out.levels()] == [96, 48, 16]


def test_zero_input_gives_half():
    m = toy()
    x = {k: np.zeros_like(v) for k, v in inputs(np.random.default_rng(2), 2, 24).items()}
    for level in m.forward(x).levels():
        np.testing.assert_array_equal(level.data, 0.5)


def test_outputs_finite_and_deterministic():
    rng = np.random.default_rng(3)
    x = inputs(rng, 2, 24)
    x["vnir"] *= 50.0
    a = [p.data for p in toy(seed=5).forward(x).levels()]
    b = [p.data for p in toy(seed=5).forward(x).levels()]
    for pa, pb in zip(a, b):
        assert np.all(np.isfinite(pa)) and np.all((pa >= 0) & (pa <= 1))
        np.testing.assert_array_equal(pa, pb)


def test_input_validation():
    m = toy()
    x = inputs(np.random.default_rng(4), 1, 24)
    with pytest.raises(ValueError, match="multiple of 12"):
        m.forward(inputs(np.random.default_rng(4), 1, 18))
    bad = dict(x, vre_swir=x["vre_swir"][..., :5])
    with pytest.raises(ValueError, match="vre_swir"):
        m.forward(bad)
    with pytest.raises(ValueError, match="needs inputs"):
        m.forward({"vnir": x["vnir"]})
    with pytest.raises(ValueError):
        ModelConfig(variant="rgb").validate()


@pytest.mark.parametrize("variant", ["full13", "vnir_swir10", "vnir4"])
def test_every_parameter_receives_gradient(variant):
    m = toy(variant)
    rng = np.random.default_rng(5)
    x = inputs(rng, 2, 24, variant)
    refs = tuple((rng.random((2, s, s, 1)) > 0.5).astype(np.uint8) for s in (24, 12, 4))
    T.backward(total_loss(m.forward(x, training=True), refs))
    for name, p in m.named_parameters().items():
        if ".dilated" in name and name.endswith("bias"):
            # a bias right before train-mode batch norm is cancelled by it
            assert np.max(np.abs(p.grad)) < 1e-12, name
        else:
            assert p.grad is not None and np.any(p.grad != 0), name


def test_shared_stage_specs_identical_across_variants():
    rows = {v: {n: s for n, s, _ in build_model(ModelConfig(variant=v)).layer_rows()}
            for v in ("full13", "vnir_swir10", "vnir4")}
    for v in ("vnir_swir10", "vnir4"):
        for name, spec in rows[v].items():
            assert rows["full13"][name] == spec, (v, name)
    assert set(rows["vnir4"]) < set(rows["vnir_swir10"]) < set(rows["full13"])


# ---------------------------------------------------------------------------
# audit

def test_audit_single_conv():
    report = audit(Conv(4, 64, 3))
    assert report.total == 2560 and report.ok


def test_audit_full13_band_and_subtotals():
    m = build_model()
    report = audit(m)
    assert report.ok
    assert 850_000 <= report.total <= 1_150_000
    assert report.total == report.instantiated_total == m.trainable_count()
    dilated = sum(p.data.size for n, p in m.named_parameters().items() if ".dilated" in n)
    assert dilated == 12 * (64 * 9 * 64 + 64 * 64) == 491_520
    assert audit(build_model(ModelConfig(variant="vnir4"))).total < report.total
    assert "TOTAL" in report.to_tsv() and "status: OK" in report.to_text()


def test_audit_flags_tampered_layer():
    m = toy()
    m.top_conv.bias.data = np.zeros((4, 5))
    assert not audit(m).ok


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip(tmp_path):
    m = toy(seed=3)
    rng = np.random.default_rng(6)
    x = inputs(rng, 2, 24)
    m.forward(x, training=True)  # moves the running statistics
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(m, p1)
    m2 = load_checkpoint(p1)
    save_checkpoint(m2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for a, b in zip(m.forward(x).levels(), m2.forward(x).levels()):
        np.testing.assert_array_equal(a.data, b.data)
    assert m2.config == m.config


def test_checkpoint_float32_round_trip(tmp_path):
    T.set_default_dtype(np.float32)
    try:
        m = toy()
    finally:
        T.set_default_dtype(np.float64)
    save_checkpoint(m, tmp_path / "m.ckpt")
    m2 = load_checkpoint(tmp_path / "m.ckpt")
    assert m2.top_conv.kernel.data.dtype == np.float32
    np.testing.assert_array_equal(m2.top_conv.kernel.data, m.top_conv.kernel.data)


def test_checkpoint_corruption_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(toy(), path)
    raw = bytearray(path.read_bytes())

    flipped = raw.copy()
    flipped[-10] ^= 0xFF
    (tmp_path / "crc.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "crc.ckpt")

    (tmp_path / "short.ckpt").write_bytes(bytes(raw[:-100]))
    with pytest.raises(TruncatedError):
        load_checkpoint(tmp_path / "short.ckpt")

    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "magic.ckpt")

    version = raw.copy()
    version[8] = 99
    (tmp_path / "ver.ckpt").write_bytes(bytes(version))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "ver.ckpt")

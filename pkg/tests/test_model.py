import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphoformer import model as M
from morphoformer import tensor as T
from morphoformer.dataset import FormatError, VersionError
from morphoformer.model import ModelConfig, MorphoFormer

from helpers import TOL, activate_relus, model_gradient_check


def tiny(**kw):
    base = dict(patch=10, d0=24, d=12)
    base.update(kw)
    return M.desk_config(**base)


def scenes(rng, b=2, scale=1.0):
    x = scale * rng.normal(size=(b, 9, 90, 90))
    x[:, 7] = 0.0
    x[:, 8] = (rng.random((b, 90, 90)) > 0.2).astype(float)
    return x


@pytest.fixture(scope="module")
def std_model():
    return MorphoFormer(ModelConfig(), seed=0)


# ---------------------------------------------------------------- config and counts

def test_standard_parameter_budgets(std_model):
    m = std_model
    assert m.count("surrogate") == 48 * 24 + 24 + 24 * 1 + 1 == 1201
    assert m.count("encoder") < 400_000
    assert 5_000 <= m.count("bgtd_pathway") <= 50_000
    assert sum(m.count(s) for s in M.SCOPES[:-1]) == m.count("total")
    rows = M.param_breakdown(m.params)
    assert sum(r[2] for r in rows if r[3] == "bgtd_pathway") == m.count("bgtd_pathway")


def test_unknown_scope():
    with pytest.raises(ValueError, match="unknown scope"):
        M.count_params({}, "heads")


@pytest.mark.parametrize("kw", [dict(d0=0, d=0), dict(d=40), dict(heads=5), dict(window=7),
                                dict(crops=(3, 4, 9)), dict(shift=9)])
def test_config_rejects_bad_geometry(kw):
    with pytest.raises(M.ConfigError):
        ModelConfig(**kw).validate()


def test_config_round_trip_and_unknown_keys():
    cfg = tiny(ablate_msmp=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(M.ConfigError, match="depth"):
        ModelConfig.from_dict({"depth": 3})


@pytest.mark.parametrize("flag,prefixes", [("ablate_bgtd", ("dec.m.", "dec.ln_m.", "dec.g.")),
                                           ("ablate_mcl_head", ("sur.",)),
                                           ("ablate_amge", ("amge.",)),
                                           ("ablate_msmp", ("msmp.",))])
def test_ablation_flags_remove_exactly_their_submodule(flag, prefixes):
    full = M.init_params(ModelConfig(), 0)
    cut = M.init_params(ModelConfig(**{flag: True}), 0)
    removed = sum(p.size for n, p in full.items() if n.startswith(prefixes))
    assert removed > 0
    assert M.count_params(full) - M.count_params(cut) == removed
    assert set(full) - set(cut) == {n for n in full if n.startswith(prefixes)}
    # the shared weights are identical across variants
    for n in cut:
        np.testing.assert_array_equal(cut[n].data, full[n].data)


def test_init_conventions():
    p = M.init_params(tiny(), 3)
    assert np.all(p["dec.g.b"].data == 0)
    assert np.all(p["blocks.0.ln1.g"].data == 1)
    w = p["blocks.0.qkv.w"].data
    assert np.all(np.abs(w) <= 2 * M.INIT_STD) and 0.01 < w.std() < 0.02


# ---------------------------------------------------------------- windows

def test_window_round_trip_on_token_grid():
    g, w = 45, 9
    idx = np.arange(g * g, dtype=np.float64).reshape(1, g, g, 1)
    win = M.window_partition_array(idx, w)
    assert win.shape == (25, 81, 1)
    # brute-force oracle for where each token lands
    for r in range(0, g, 7):
        for c in range(0, g, 5):
            k = (r // w) * (g // w) + c // w
            assert win[k, (r % w) * w + c % w, 0] == r * g + c
    np.testing.assert_array_equal(M.window_reverse_array(win, w, g), idx)
    shifted = np.roll(idx, (-4, -4), (1, 2))
    back = np.roll(M.window_reverse_array(M.window_partition_array(shifted, w), w, g), (4, 4), (1, 2))
    np.testing.assert_array_equal(back, idx)


def test_tensor_window_ops_match_array_versions():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 18, 18, 3))
    win = M.window_partition(T.Tensor(a), 9)
    np.testing.assert_array_equal(win.data, M.window_partition_array(a, 9))
    np.testing.assert_array_equal(M.window_reverse(win, 9, 18).data, a)


def test_shift_mask_blocks_cross_region_attention():
    cfg = ModelConfig(image=36, d0=12, d=6)
    assert cfg.grid == 18
    params = M.init_params(cfg, 1)
    geo = M._Geometry(cfg)
    y = T.Tensor(np.random.default_rng(1).normal(size=(2, 18, 18, 12)))
    _, attn = M.window_attention(params, cfg, geo, y, "blocks.1", shifted=True)
    ids = M.shift_region_ids(18, 9, 4)
    win = M.window_partition_array(ids[None, :, :, None].astype(float), 9)[:, :, 0]
    cross = win[:, :, None] != win[:, None, :]
    assert cross.any()
    a = attn.data.reshape(2, -1, 3, 81, 81)
    k, i, j = cross.nonzero()
    assert a[:, k, :, i, j].max() < 1e-8
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)


def test_uniform_tokens_attend_to_their_own_value():
    cfg = ModelConfig(image=18, d0=12, d=6)
    params = M.init_params(cfg, 2)
    tok = np.random.default_rng(2).normal(size=12)
    y = T.Tensor(np.broadcast_to(tok, (1, 9, 9, 12)).copy())
    out, _ = M.window_attention(params, cfg, M._Geometry(cfg), y, "blocks.0", shifted=False)
    v = (tok @ params["blocks.0.qkv.w"].data + params["blocks.0.qkv.b"].data)[24:]
    expect = v @ params["blocks.0.proj.w"].data + params["blocks.0.proj.b"].data
    np.testing.assert_allclose(out.data.reshape(-1, 12), np.broadcast_to(expect, (81, 12)), atol=1e-12)


# ---------------------------------------------------------------- modules

def test_amge_passthrough_and_forced_weights():
    cfg = tiny()
    params = M.init_params(cfg, 0)
    x = scenes(np.random.default_rng(4))
    gated, scale = M.amge_forward(params, cfg, x)
    np.testing.assert_array_equal(gated.data[:, 8], x[:, 8])
    np.testing.assert_array_equal(scale.data[:, 7:], 1.0)
    assert np.all((scale.data > 0) & (scale.data < 1) | (scale.data == 1))
    ones, _ = M.amge_forward(params, cfg, x, force_weight=1.0)
    np.testing.assert_array_equal(ones.data, x)
    zero, _ = M.amge_forward(params, cfg, np.zeros_like(x))
    assert not zero.data.any()
    with pytest.raises(T.DimensionError):
        M.amge_forward(params, cfg, x[:, :8])


def test_crop_bounds():
    assert M.crop_bounds(45, 3) == (21, 24)
    assert M.crop_bounds(45, 9) == (18, 27)
    assert M.crop_bounds(9, 9) == (0, 9)


def test_msmp_uniform_tokens_and_alpha_normalised():
    cfg = ModelConfig(image=18, d0=12, d=6)
    params = M.init_params(cfg, 0)
    rng = np.random.default_rng(5)
    vec = rng.normal(size=(2, 1, 1, 12))
    h, alpha = M.msmp_forward(params, cfg, T.Tensor(np.broadcast_to(vec, (2, 9, 9, 12)).copy()))
    np.testing.assert_allclose(h.data, vec[:, 0, 0], atol=1e-14)
    _, alpha = M.msmp_forward(params, cfg, T.Tensor(rng.normal(size=(2, 9, 9, 12))))
    assert np.all(np.abs(alpha.data.sum(1) - 1) < 1e-12)


def test_gate_endpoints():
    rng = np.random.default_rng(6)
    x = scenes(rng)
    full = MorphoFormer(tiny(), seed=4)
    plain = MorphoFormer(tiny(ablate_bgtd=True), seed=4)
    a = full.forward(x, gate_override=1.0)
    b = plain.forward(x)
    assert a.h_pred.data.tobytes() == b.h_pred.data.tobytes()
    z = full.forward(x, gate_override=0.0)
    assert z.b_h_tilde.data.tobytes() == z.m.data.tobytes()
    g = full.forward(x).gate.data
    assert g.shape == (2, 12) and np.all((g > 0) & (g < 1))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 20), st.floats(0.1, 20.0))
def test_output_ranges(seed, scale):
    rng = np.random.default_rng(seed)
    model = MorphoFormer(tiny(), seed=seed % 7)
    for name in ("dec.h.b", "sur.fc2.b"):
        model.params[name].data[...] = rng.normal()
    out = model.forward(scenes(rng, scale=scale))
    lam = out.lambda_pred.data
    assert np.all((lam > 0) & (lam < 1))
    assert np.all(out.h_pred.data >= 0) and np.all(out.h_from_bf.data >= 0)


def test_standard_geometry_shapes(std_model):
    x = scenes(np.random.default_rng(7), b=1)
    cfg = std_model.cfg
    gated, _ = M.amge_forward(std_model.params, cfg, x)
    tokens = M.backbone_forward(std_model.params, cfg, gated)
    assert tokens.shape == (1, 45, 45, 96)
    out = std_model.forward(x)
    assert out.h.shape == (1, 96) and out.gate.shape == (1, 48) and out.b_f.shape == (1, 48)


def test_predict_matches_forward():
    model = MorphoFormer(tiny(), seed=1)
    x = scenes(np.random.default_rng(8), b=5)
    pred = model.predict(x, batch_size=2)
    out = model.forward(x)
    np.testing.assert_allclose(pred["h_pred"], out.h_pred.data, rtol=0, atol=1e-12)
    assert pred["gate"].shape == (5, 12)


def test_small_model_gradient_check():
    rng = np.random.default_rng(9)
    model = activate_relus(MorphoFormer(tiny(), seed=2))
    x = scenes(rng, b=2)
    target = np.array([[0.3, 12.0], [0.1, 6.0]])
    worst, probed, _ = model_gradient_check(model, x, target, fraction=0.01, rng=rng)
    assert probed > 80
    assert worst < TOL


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    model = MorphoFormer(tiny(ablate_msmp=True), seed=11)
    model.params["loss.log_var_h"].data[...] = 0.25
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(model, path, {"epoch": 3, "val_combined": 1.5})
    back, header = M.load_checkpoint(path)
    assert header["epoch"] == 3 and back.cfg == model.cfg and back.seed == 11
    for n in model.params:
        assert back.params[n].data.tobytes() == model.params[n].data.tobytes()
    assert path.read_bytes().startswith(b"MRPH-CKPT\x01")
    assert M.checkpoint_bytes(back, {"epoch": 3, "val_combined": 1.5}) == path.read_bytes()


def test_checkpoint_errors():
    blob = M.checkpoint_bytes(MorphoFormer(tiny(), seed=0))
    with pytest.raises(FormatError, match="magic"):
        M.parse_checkpoint(b"NOPE" + blob)
    with pytest.raises(VersionError):
        M.parse_checkpoint(blob[:9] + b"\x02" + blob[10:])
    bad = bytearray(blob)
    bad[len(bad) // 2] ^= 1
    with pytest.raises(FormatError, match="checksum"):
        M.parse_checkpoint(bytes(bad))


def test_load_state_rejects_mismatch():
    model = MorphoFormer(tiny(), seed=0)
    state = model.state()
    state.pop("dec.h.b")
    with pytest.raises(KeyError):
        model.load_state(state)

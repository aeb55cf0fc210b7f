import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphoformer import model as M
from morphoformer import tensor as T
from morphoformer import training as TR
from morphoformer.dataset import SyntheticCityConfig, generate_city
from morphoformer.model import ModelOutput, MorphoFormer
from morphoformer.training import LossConfig, TrainConfig


def tiny(**kw):
    return M.desk_config(d0=24, d=12, **kw)


@pytest.fixture(scope="module")
def data():
    cities = [generate_city(SyntheticCityConfig(city_id=f"c{k}", grid_size=40, r0=7.0, seed=20 + k))[:2]
              for k in range(2)]
    return TR.prepare(cities)


def fake_output(h, lam, h_bf=None):
    wrap = lambda a: None if a is None else T.Tensor(np.asarray(a, float), requires_grad=True)  # noqa: E731
    return ModelOutput(wrap(h), wrap(lam), wrap(h_bf), None, None, None, None, None, None)


# ---------------------------------------------------------------- loss

def test_perfect_prediction_zero_loss():
    out = fake_output([10.0, 4.0], [0.2, 0.5], [10.0, 4.0])
    loss, parts = TR.total_loss(out, [[0.2, 10.0], [0.5, 4.0]], 0.0, 0.0, 0.0)
    assert loss.item() == 0.0 and parts["mcl"] == 0.0


def test_log_variance_halves_weight():
    out = fake_output([13.0], [0.2])
    target = [[0.2, 10.0]]
    l_bh = 2.0 * (3.0 - 1.0)  # linear Huber branch, beta 2
    loss, _ = TR.total_loss(out, target, np.log(2.0), 0.0, 0.0)
    assert loss.item() == pytest.approx(0.25 * l_bh + 0.5 * np.log(2.0), abs=1e-12)


def test_consistency_targets_ground_truth():
    out = fake_output([12.0], [0.2], [12.0])
    _, parts = TR.total_loss(out, [[0.2, 10.0]], 0.0, 0.0, 0.2)
    assert parts["mcl"] > 0
    with pytest.raises(ValueError):
        TR.total_loss(out, [[0.2, 10.0]], 0.0, 0.0, -0.1)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 20))
def test_log_variance_gradient_is_analytic(s_h, s_f, seed):
    rng = np.random.default_rng(seed)
    out = fake_output(rng.uniform(0, 30, 6), rng.uniform(0.05, 0.9, 6), rng.uniform(0, 30, 6))
    target = np.column_stack([rng.uniform(0.02, 0.9, 6), rng.uniform(3, 30, 6)])
    lv_h = T.Tensor(np.array(s_h), requires_grad=True)
    lv_f = T.Tensor(np.array(s_f), requires_grad=True)
    with T.Tape() as tape:
        loss, parts = TR.total_loss(out, target, lv_h, lv_f, 0.2)
    g = T.backward(tape, loss)
    assert abs(g[lv_h] - 0.5 * (1 - np.exp(-s_h) * parts["bh"])) < 1e-10
    assert abs(g[lv_f] - 0.5 * (1 - np.exp(-s_f) * parts["bf"])) < 1e-10


def test_consistency_weight_schedule():
    assert TR.consistency_weight(0) == 0.0
    assert TR.consistency_weight(5) == pytest.approx(0.1)
    assert TR.consistency_weight(10) == TR.consistency_weight(50) == pytest.approx(0.2)
    inclusive = LossConfig(warmup_inclusive=True)
    assert TR.consistency_weight(9, inclusive) == pytest.approx(0.2)
    vals = [TR.consistency_weight(t) for t in range(30)]
    assert vals == sorted(vals) and all(0 <= v <= 0.2 for v in vals)


def test_mcl_leaves_footprint_head_gradients_unchanged():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 9, 90, 90))
    target = np.array([[0.2, 9.0], [0.4, 14.0], [0.1, 5.0]])
    grads = {}
    for name, cfg, lam_c in (("on", tiny(), 0.2), ("off", tiny(), 0.0), ("cut", tiny(ablate_mcl_head=True), 0.0)):
        model = MorphoFormer(cfg, seed=5)
        p = model.params
        if "sur.fc2.b" in p:
            p["sur.fc2.b"].data[...] = 1.0  # keep the surrogate ReLU active
        with T.Tape() as tape:
            loss, _ = TR.total_loss(model.forward(x), target, p["loss.log_var_h"], p["loss.log_var_f"], lam_c)
        g = T.backward(tape, loss)
        grads[name] = {n: g[p[n]] for n in ("dec.f.w", "dec.f.b", "dec.bf.w")}
    for n in ("dec.f.w", "dec.f.b"):
        assert grads["on"][n].tobytes() == grads["off"][n].tobytes() == grads["cut"][n].tobytes()
    assert grads["off"]["dec.bf.w"].tobytes() == grads["cut"]["dec.bf.w"].tobytes()
    assert not np.array_equal(grads["on"]["dec.bf.w"], grads["off"]["dec.bf.w"])


# ---------------------------------------------------------------- optimiser pieces

def test_clip_global_norm():
    g = [np.array([3.0]), np.array([4.0]), None]
    assert TR.clip_global_norm(g, 1.0) == 5.0
    assert np.hypot(g[0][0], g[1][0]) == pytest.approx(1.0)
    h = [np.array([0.3])]
    TR.clip_global_norm(h, 1.0)
    assert h[0][0] == 0.3


def test_adam_first_step_moves_by_lr():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    TR.Adam([p], lr=0.1).step([np.array([0.5, -3.0])])
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        LossConfig(beta_h=0).validate()
    with pytest.raises(ValueError, match="momentum"):
        TrainConfig.from_dict({"momentum": 0.9})


# ---------------------------------------------------------------- loop

def test_zero_learning_rate_keeps_parameters(data):
    model = MorphoFormer(tiny(), seed=1)
    before = model.state()
    TR.train(model, data.train, data.val, TrainConfig(lr=0.0, epochs=2, batch_size=16, samples_per_epoch=32))
    for n, arr in model.state().items():
        assert arr.tobytes() == before[n].tobytes()


def test_overfit_single_batch(data):
    model = MorphoFormer(tiny(), seed=3)
    x, y = data.train.batch(np.arange(4))
    p = model.params
    opt = TR.Adam(model.trainable(), lr=1e-3)
    losses = []
    for _ in range(200):
        with T.Tape() as tape:
            loss, _ = TR.total_loss(model.forward(x), y, p["loss.log_var_h"], p["loss.log_var_f"], 0.2)
        g = T.backward(tape, loss)
        opt.step([g.get(t) for t in model.trainable()])
        for t in model.trainable():
            t.grad = None
        losses.append(loss.item())
    tail = np.array(losses[20:])
    assert np.all(np.diff(tail) < 0)
    assert tail[-1] < 0.6 * losses[0]


def test_training_is_deterministic_and_checkpoint_reproduces_metric(data, tmp_path):
    tcfg = TrainConfig(epochs=3, batch_size=16, samples_per_epoch=48, seed=4)
    logs = []
    for k in range(2):
        model = MorphoFormer(tiny(), seed=2)
        res = TR.train(model, data.train, data.val, tcfg, log_path=tmp_path / f"{k}.jsonl",
                       ckpt_path=tmp_path / f"{k}.ckpt")
        logs.append((tmp_path / f"{k}.jsonl").read_bytes())
    assert logs[0] == logs[1]
    assert (tmp_path / "0.ckpt").read_bytes() == (tmp_path / "1.ckpt").read_bytes()
    records = [json.loads(line) for line in logs[0].decode().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert set(records[0]) == {"epoch", "lambda_c", "train", "val_mae_bh", "val_mae_bf", "combined",
                               "log_var_h", "log_var_f"}
    assert records[res.best_epoch]["combined"] == min(r["combined"] for r in records)
    back, header = M.load_checkpoint(tmp_path / "0.ckpt")
    _, _, comb = TR.evaluate_val(back, data.val)
    assert abs(comb - header["val_combined"]) < 1e-12
    assert header["epoch"] == res.best_epoch


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_is_reported(data):
    model = MorphoFormer(tiny(), seed=0)
    with pytest.raises(TR.TrainingDivergedError, match="epoch 0 batch 0"):
        TR.train(model, data.train, data.val, TrainConfig(epochs=1, batch_size=8, samples_per_epoch=8),
                 LossConfig(log_var_h_init=-1e6))


def test_no_mcl_variant_logs_no_consistency_term(data):
    model = MorphoFormer(tiny(ablate_mcl_head=True), seed=0)
    res = TR.train(model, data.train, data.val, TrainConfig(epochs=1, batch_size=8, samples_per_epoch=8))
    assert res.log[0]["lambda_c"] == 0.0 and res.log[0]["train"]["mcl"] is None


def test_ablation_suite_needs_three_seeds(data):
    with pytest.raises(ValueError, match="three seeds"):
        TR.run_ablation_suite(data, seeds=(0, 1))


def test_prepared_splits_are_disjoint(data):
    seen = set()
    for src in (data.train, data.val, data.test):
        keys = {tuple(r) for r in src.index.tolist()}
        assert not keys & seen
        seen |= keys

import json

import numpy as np
import pytest

from hemisit.data import SynthSpec, generate_synthetic, make_dataset, read_manifest
from hemisit.errors import ConfigurationError, InputError
from hemisit.heads import joint_loss
from hemisit.model import VARIANTS, SITModel
from hemisit.tensor import Tape
from hemisit.train import (ModelConfig, TrainState, build_model, evaluate, fit, lr_schedule, run_variant,
                           train_epoch, train_step)

SPEC = SynthSpec()


def batch(n=4, seed=0):
    xs, ys = [], []
    for i in range(n):
        v, _ = generate_synthetic(SPEC, i % 2, seed * 1000 + i)
        xs.append(v.data)
        ys.append(i % 2)
    return np.stack(xs), np.array(ys)


def loss_of(cfg, model, xb, yb):
    model.train()
    fwd = model(xb, update_stats=False)
    total, _ = joint_loss(fwd.logits_l, fwd.logits_r, fwd.logits_all, yb, cfg.lam, cfg.gam)
    return total.item()


# --- schedule and config ----------------------------------------------------------

def test_schedule_points():
    assert [lr_schedule(e) for e in (0, 29, 30, 49, 50, 69)] == [1e-4, 1e-4, 3e-5, 3e-5, 1e-5, 1e-5]


def test_schedule_non_increasing():
    lrs = [lr_schedule(e) for e in range(200)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_config_round_trip_and_unknown_keys():
    cfg = ModelConfig(variant="lrcnn_it", lam=0.5)
    d = cfg.to_dict()
    assert d["lambda"] == 0.5 and "lam" not in d
    assert ModelConfig.from_dict(json.loads(json.dumps(d))) == cfg
    with pytest.raises(ConfigurationError, match="lamda"):
        ModelConfig.from_dict({"lamda": 0.1})


def test_config_defaults():
    cfg = ModelConfig()
    assert (cfg.patch_size, cfg.n_units, cfg.n_heads, cfg.lam, cfg.gam, cfg.batch_size, cfg.epochs) == \
        (8, 5, 4, 0.25, 0.25, 4, 70)


def test_unknown_variant():
    with pytest.raises(ConfigurationError):
        ModelConfig(variant="lrcnn_x")
    with pytest.raises(ConfigurationError):
        SITModel("nope")


def test_six_variants_share_backbone():
    assert len(VARIANTS) == 6
    counts = {v: SITModel(v).param_counts()["encoder"] for v in VARIANTS}
    assert len(set(counts.values())) == 1


# --- mechanism reductions ---------------------------------------------------------

def test_sit_flip_with_pinned_beta_equals_it_with_flip():
    xb, yb = batch()
    a_cfg = ModelConfig(variant="lrcnn_sit_flip", freeze_beta=True)
    b_cfg = ModelConfig(variant="lrcnn_it", flip=True)
    a, b = build_model(a_cfg), build_model(b_cfg)
    assert loss_of(a_cfg, a, xb, yb) == loss_of(b_cfg, b, xb, yb)
    sa, sb = TrainState(), TrainState()
    va, _ = train_step(a, a_cfg, a.parameters(), sa, xb, yb, 1e-4)
    vb, _ = train_step(b, b_cfg, b.parameters(), sb, xb, yb, 1e-4)
    assert va == vb
    assert loss_of(a_cfg, a, xb, yb) == loss_of(b_cfg, b, xb, yb)


def test_sit_with_zero_beta_equals_it():
    xb, yb = batch(seed=1)
    a_cfg, b_cfg = ModelConfig(variant="lrcnn_sit"), ModelConfig(variant="lrcnn_it")
    assert abs(loss_of(a_cfg, build_model(a_cfg), xb, yb) - loss_of(b_cfg, build_model(b_cfg), xb, yb)) <= 1e-12


def test_it_with_silenced_branches_equals_lrcnn():
    xb, yb = batch(seed=2)
    it_cfg, lr_cfg = ModelConfig(variant="lrcnn_it"), ModelConfig(variant="lrcnn")
    it, lr = build_model(it_cfg), build_model(lr_cfg)
    lr.load_state_dict(it.state_dict(), strict=False)
    for unit in it.sit.units:
        for lin in (unit.left.o, unit.right.o, unit.mlp.fc2):
            lin.weight.data[:] = 0
            lin.bias.data[:] = 0
    assert abs(loss_of(it_cfg, it, xb, yb) - loss_of(lr_cfg, lr, xb, yb)) <= 1e-12


def test_zero_units_equals_lrcnn():
    xb, yb = batch(seed=3)
    a_cfg, b_cfg = ModelConfig(variant="lrcnn_it", n_units=0), ModelConfig(variant="lrcnn")
    assert loss_of(a_cfg, build_model(a_cfg), xb, yb) == loss_of(b_cfg, build_model(b_cfg), xb, yb)


# --- gradients --------------------------------------------------------------------

def _grads(cfg, xb, yb):
    model = build_model(cfg)
    model.train()
    with Tape() as tape:
        fwd = model(xb)
        total, _ = joint_loss(fwd.logits_l, fwd.logits_r, fwd.logits_all, yb, cfg.lam, cfg.gam)
    tape.backward(total)
    return model


def test_zero_aux_weights_give_zero_aux_gradients():
    xb, yb = batch()
    model = _grads(ModelConfig(variant="lrcnn_sit_flip", lam=0, gam=0), xb, yb)
    for head in (model.head_l, model.head_r):
        for p in head.parameters():
            assert p.grad is None or not np.any(p.grad)


@pytest.mark.parametrize("variant", ["lrcnn", "lrcnn_t", "lrcnn_it", "lrcnn_sit_flip"])
def test_every_parameter_receives_gradient(variant):
    xb, yb = batch()
    cfg = ModelConfig(variant=variant, n_units=2)
    model = _grads(cfg, xb, yb)
    for name, p in model.named_parameters():
        assert p.grad is not None and np.linalg.norm(p.grad) > 0, name


def test_wcnn_uses_main_loss_only():
    xb, yb = batch()
    cfg = ModelConfig(variant="wcnn")
    model = build_model(cfg)
    vals, _ = train_step(model, cfg, model.parameters(), TrainState(), xb, yb, 1e-4)
    assert vals["loss"] == vals["loss_all"] and vals["loss_l"] is None


# --- loops ------------------------------------------------------------------------

def _overfit(seed, epochs):
    xb, yb = batch(16, seed=seed)
    cfg = ModelConfig(variant="lrcnn_sit_flip", seed=seed, epochs=epochs)
    model = build_model(cfg)
    state = TrainState()
    return [train_epoch(state, model, xb, yb, cfg) for _ in range(epochs)]


@pytest.mark.parametrize("seed", range(3))
def test_second_epoch_lowers_loss(seed):
    recs = _overfit(seed, 2)
    assert recs[1]["loss"] < recs[0]["loss"]


def test_training_is_deterministic():
    assert _overfit(0, 2) == _overfit(0, 2)


def test_partial_final_batch_kept():
    xb, yb = batch(5)
    cfg = ModelConfig(variant="lrcnn", epochs=1)
    model = build_model(cfg)
    rec = train_epoch(TrainState(), model, xb, yb, cfg)
    assert rec["epoch"] == 0 and 0 <= rec["train_acc"] <= 1


def test_evaluate_twice_identical_and_schema():
    xb, yb = batch(6)
    model = build_model(ModelConfig(variant="lrcnn_sit_flip"))
    a, b = evaluate(model, xb, yb), evaluate(model, xb, yb)
    assert a == b
    assert {"acc", "sen", "spe", "auc"} <= set(a.to_dict())


def test_evaluate_empty_split():
    with pytest.raises(InputError):
        evaluate(build_model(ModelConfig()), np.zeros((0, 32, 36, 32)), np.zeros(0, dtype=int))


def test_run_variant_writes_artifacts(tmp_path):
    man = make_dataset(SPEC, 7, seed=0, root=tmp_path / "data")
    cfg = ModelConfig(variant="lrcnn_sit_flip", epochs=2, n_units=1)
    model, state, report = run_variant(cfg, read_manifest(tmp_path / "data/manifest.jsonl"), out_dir=tmp_path / "run")
    lines = (tmp_path / "run/train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert {"epoch", "lr", "loss_all", "loss_l", "loss_r", "val_acc"} <= set(rec)
    assert (tmp_path / "run/best.ckpt").exists()
    saved = json.loads((tmp_path / "run/test_metrics.json").read_text())
    assert saved["acc"] == report.acc
    assert state.best_epoch in (0, 1)


def test_run_variant_requires_all_splits(tmp_path):
    man = make_dataset(SPEC, 3, fractions=(1, 0, 0), root=tmp_path)
    with pytest.raises(InputError):
        run_variant(ModelConfig(epochs=1), man)


def test_fit_selects_best_validation_state():
    xb, yb = batch(8)
    cfg = ModelConfig(variant="lrcnn", epochs=3)
    model = build_model(cfg)
    state = fit(model, cfg, (xb, yb), (xb[:4], yb[:4]))
    accs = [r["val_acc"] for r in state.history]
    assert state.best_val_acc == max(accs)
    assert state.best_epoch == accs.index(max(accs)) or accs.count(max(accs)) > 1

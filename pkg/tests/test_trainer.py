import csv
import dataclasses
import json

import numpy as np
import pytest

from spectral_lora import lora as L
from spectral_lora import optim as O
from spectral_lora import tasks
from spectral_lora import trainer as T


def small_cfg(**over) -> T.TrainConfig:
    base = {
        "model": {"vocab_size": tasks.VOCAB_SIZE, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 24,
                  "max_seq": 40},
        "lora": {"r": 2},
        "optim": {"lr": 5e-3},
        "data": {"n_samples": 60, "max_ops": 3},
        "epochs": 2,
        "eval_every": 5,
    }
    return T.with_overrides(T.config_from_dict(base), over)


def read_metrics(path):
    with open(path) as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- config


def test_defaults_mirror_table():
    c = T.TrainConfig()
    assert (c.lora.r, c.lora.alpha, c.lora.dropout) == (8, 16.0, 0.05)
    assert (c.batch_size, c.optim.lr, c.epochs) == (4, 2e-4, 3)
    assert c.model.vocab_size == tasks.VOCAB_SIZE


def test_config_round_trip(tmp_path):
    cfg = small_cfg(**{"fourier.reduction": "mean", "optim.name": "sophia"})
    T.save_config(cfg, tmp_path / "c.json")
    assert T.load_config(tmp_path / "c.json") == cfg
    assert T.config_from_dict({}) == T.TrainConfig()


@pytest.mark.parametrize(
    "data",
    [{"bogus": 1}, {"lora": {"rank": 4}}, {"lora": 3}, {"batch_size": 0}, {"loss_on": "some"},
     {"optim": {"name": "sgd"}}, {"model": {"vocab_size": 10}}],
)
def test_config_errors(data):
    with pytest.raises((ValueError, TypeError)):
        T.config_from_dict(data)


def test_overrides_and_env(monkeypatch):
    cfg = T.with_overrides(T.TrainConfig(), {"fourier.lam": 0.0, "seed": 3})
    assert cfg.fourier.lam == 0.0 and cfg.seed == 3
    with pytest.raises(ValueError, match="unknown"):
        T.with_overrides(cfg, {"fourier.nope": 1})
    with pytest.raises(ValueError, match="unknown"):
        T.with_overrides(cfg, {"nope.x": 1})
    monkeypatch.setenv(T.SEED_ENV, "11")
    assert T.seed_from_env(cfg).seed == 11
    monkeypatch.setenv(T.SEED_ENV, "")
    assert T.seed_from_env(cfg).seed == 3


def test_make_batch_masks():
    s = tasks.Sample(0, (10, 11, tasks.QUERY), (5, tasks.EOS), "lang_a")
    t = tasks.Sample(1, (10, tasks.QUERY), (6, 7, tasks.EOS), "lang_a")
    x, y, mask = T.make_batch([s, t], "all")
    assert x.tolist() == [[10, 11, 2, 5], [10, 2, 6, 7]]
    assert y.tolist() == [[11, 2, 5, 1], [2, 6, 7, 1]]
    assert mask.all()
    u = tasks.Sample(2, (10, tasks.QUERY), (5, tasks.EOS), "lang_a")
    x, y, mask = T.make_batch([s, u], "target")
    assert mask.tolist() == [[False, False, True, True], [False, True, True, False]]
    assert y[mask].tolist() == [5, 1, 5, 1]


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return T.train(small_cfg(), out), out


def test_outputs_written(run):
    res, out = run
    for name in ("config.json", "metrics.csv", "adapters.slra", "adapters.slra.json", "optim_state.npz",
                 "epochs.csv", "batches.log"):
        assert (out / name).is_file(), name
    assert (out / "metrics.csv").read_text().splitlines()[0] == T.METRICS_HEADER
    assert res.checkpoint == out / "adapters.slra"
    assert len(read_metrics(out / "metrics.csv")) == len(res.metrics.steps) == 2 * 14
    assert isinstance(O.load_state(out / "optim_state.npz"), O.AdamWState)


def test_additivity_every_logged_step(run):
    res, out = run
    lam = res.config.fourier.lam
    rows = read_metrics(out / "metrics.csv")
    assert any(float(r["fourier_loss"]) > 0 for r in rows)
    for r in rows:
        total = float(r["task_loss"]) + lam * float(r["fourier_loss"])
        assert abs(float(r["total_loss"]) - total) <= 1e-12


def test_base_frozen_and_loss_decreases(run):
    res, _ = run
    fresh = T.build_model(res.config)
    assert all(np.array_equal(fresh.params[k], res.model.params[k]) for k in fresh.params)
    before = T.dataset_loss(res.model, None, res.train_set)
    assert T.dataset_loss(res.model, res.adapters, res.train_set) < before


def test_epoch_records(run):
    res, _ = run
    assert [e.epoch for e in res.metrics.epochs] == [0, 1]
    assert all(0.0 <= e.pass_at_1 <= 1.0 for e in res.metrics.epochs)
    assert res.metrics.val_series[-1] == (28, res.metrics.epochs[-1].val_loss)
    assert [s for s, _ in res.metrics.val_series] == [5, 10, 14, 15, 20, 25, 28]


def test_lambda_zero_fourier_column_zero(tmp_path):
    res = T.train(small_cfg(**{"fourier.lam": 0.0, "epochs": 1}), tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert all(float(r["fourier_loss"]) == 0.0 for r in rows)
    assert all(r["total_loss"] == r["task_loss"] for r in rows)


def test_smoke_default_width_learns():
    cfg = T.config_from_dict({"data": {"n_samples": 200}, "epochs": 1})
    res = T.train(cfg)
    assert T.dataset_loss(res.model, res.adapters, res.train_set) < T.dataset_loss(res.model, None, res.train_set)


def _strip_wall(text):
    return [line.rsplit(",", 1)[0] for line in text.splitlines()]


@pytest.mark.parametrize("opt", ["adamw", "sophia"])
def test_determinism(tmp_path, opt):
    cfg = small_cfg(**{"optim.name": opt, "epochs": 1})
    T.train(cfg, tmp_path / "a")
    T.train(cfg, tmp_path / "b")
    for name in ("adapters.slra", "adapters.slra.json", "optim_state.npz", "epochs.csv", "batches.log"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    a = (tmp_path / "a" / "metrics.csv").read_text()
    b = (tmp_path / "b" / "metrics.csv").read_text()
    assert _strip_wall(a) == _strip_wall(b)


def test_seed_changes_run(tmp_path):
    a = T.train(small_cfg(epochs=1))
    b = T.train(small_cfg(epochs=1, seed=1))
    assert a.metrics.batch_hashes != b.metrics.batch_hashes


def test_sophia_clip_checked_every_step():
    res = T.train(small_cfg(**{"optim.name": "sophia", "optim.hessian_interval": 3}))
    assert res.metrics.clip_checks == len(res.metrics.steps)


def test_clip_bound_violation_detected():
    p = {"w": np.array([0.0])}
    with pytest.raises(T.ClipBoundViolation):
        T._assert_clip_bound(0, {"w": np.array([0.2])}, {"w": np.array([0.0])}, p, 0.1)


def test_divergence_aborts_with_step_and_term(monkeypatch):
    real = T.S.regularizer_term
    calls = []

    def poisoned(adapters, cfg):
        calls.append(1)
        loss, grads = real(adapters, cfg)
        return (float("nan") if len(calls) == 4 else loss), grads

    monkeypatch.setattr(T.S, "regularizer_term", poisoned)
    with pytest.raises(T.TrainingDivergedError, match="non-finite fourier_loss at step 3"):
        T.train(small_cfg(epochs=1))


def test_check_finite_names_gradient():
    with pytest.raises(T.TrainingDivergedError, match="gradient at step 7: b"):
        T._check_finite(7, task_loss=1.0, gradient={"a": np.zeros(2), "b": np.array([np.inf])})


# ---------------------------------------------------------------- evaluation


def test_merged_and_unmerged_eval_agree(run):
    res, out = run
    ckpt = out / "adapters.slra"
    for ds in (res.val_set, res.train_set):
        a = T.evaluate(ckpt, ds, merged=False)
        b = T.evaluate(ckpt, ds, merged=True)
        assert a.outcomes == b.outcomes
        assert 0.0 <= a.pass_at_1 <= 1.0


def test_untrained_adapters_equal_base(tmp_path):
    cfg = small_cfg()
    model = T.build_model(cfg)
    ad = L.init_adapters(model, "attention_mlp", 2, 16, 0.0, np.random.default_rng(0))
    L.save_checkpoint(ad, tmp_path / "u.slra")
    T.save_config(cfg, T.sidecar_path(tmp_path / "u.slra"))
    _, test = T.build_data(cfg)
    rep = T.evaluate(tmp_path / "u.slra", test)
    assert rep.outcomes == tasks.pass_at_1(model, None, test, cfg.decode).outcomes


def test_load_run_shape_mismatch(run, tmp_path):
    res, out = run
    bad = dataclasses.replace(res.config, model=dataclasses.replace(res.config.model, d_model=8, d_ff=24))
    (tmp_path / "adapters.slra").write_bytes((out / "adapters.slra").read_bytes())
    T.save_config(bad, T.sidecar_path(tmp_path / "adapters.slra"))
    with pytest.raises(ValueError, match="adapter"):
        T.load_run(tmp_path / "adapters.slra")


def test_loaded_checkpoint_matches_trained(run):
    res, out = run
    cfg, model, ad = T.load_run(out / "adapters.slra")
    assert cfg == res.config
    for k, p in res.adapters.params().items():
        assert np.array_equal(p, ad.params()[k])
    assert json.loads((out / "config.json").read_text()) == T.config_to_dict(res.config)


def test_partial_section_keeps_parent_defaults():
    cfg = T.config_from_dict({"model": {"d_model": 16}})
    assert cfg.model.vocab_size == tasks.VOCAB_SIZE and cfg.model.d_model == 16

import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from hetsolver import autodiff as ad
from hetsolver.datagen import Inflow, OracleGeometry, PhysicsParams, ScenarioSampler, load_dataset, \
    make_dataset, simulate
from hetsolver.model import Ablation, init_params, load_checkpoint
from hetsolver.trainer import (VARIANTS, AdamW, TrainConfig, ablation_suite, batch_of,
                               clip_global_norm, collect_samples, cosine_lr, evaluate, parse_loss,
                               rollout, step_loss, train)

SMALL = ScenarioSampler(n_fluid=(5, 7), n_solid=(2, 3), frames=14, stride=(2, 3), warmup_time=6.0)
TINY = TrainConfig(epochs=2, batch_size=8, window=3, d=8, layers=1, time_dim=4, seed=1)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainer_ds")
    make_dataset(10, SMALL, root, seed=0)
    return load_dataset(root)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3, 1e-6) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-6) == pytest.approx(1e-6, abs=1e-18)
    assert cosine_lr(50, 100, 1e-3, 1e-6) == pytest.approx((1e-3 + 1e-6) / 2, rel=1e-15)
    values = [cosine_lr(s, 100, 1e-3, 1e-6) for s in range(101)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_parse_loss():
    assert parse_loss("igbl")[0] == "igbl"
    assert parse_loss("fixed:1:3") == ("fixed", 1.0, 3.0)
    for bad in ("fixed:1", "fixed:0:1", "mse"):
        with pytest.raises(ValueError):
            parse_loss(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_max=1e-6, lr_min=1e-3)


def test_zero_gradient_step_is_pure_decay():
    params = init_params(TINY.model_config(1, 7), 0)
    before = [t.data.copy() for t in params]
    opt = AdamW(params, weight_decay=1e-4)
    lr = 3e-3
    opt.step([np.zeros_like(b) for b in before], lr)
    for t, b in zip(params, before):
        assert np.array_equal(t.data, b - lr * (1e-4 * b))


def test_adamw_first_step_is_sign_like():
    params = init_params(TINY.model_config(1, 7), 0)
    before = [t.data.copy() for t in params]
    grads = [np.full_like(b, 0.5) for b in before]
    AdamW(params, weight_decay=0.0).step(grads, 1e-2)
    for t, b in zip(params, before):
        np.testing.assert_allclose(b - t.data, 1e-2 * 0.5 / (0.5 + 1e-8), rtol=1e-12)


def test_clipping_never_increases_norm():
    rng = np.random.default_rng(0)
    for _ in range(200):
        grads = [rng.normal(scale=rng.uniform(0.01, 10), size=s) for s in [(3, 4), (5,), ()]]
        limit = rng.uniform(0.1, 5)
        clipped, norm = clip_global_norm(grads, limit)
        new = math.sqrt(sum(float(np.sum(g * g)) for g in clipped))
        assert new <= norm + 1e-12
        assert new <= max(limit, norm) * (1 + 1e-12)
        if norm > limit:
            assert new == pytest.approx(limit, rel=1e-12)


def test_single_sample_overfit_is_monotone(dataset):
    norm = dataset.normalizer
    sample = collect_samples(dataset.split("train")[:1], TINY.window, norm)[:1]
    params = init_params(TINY.model_config(dataset.pos_dim, len(norm.phys_mean)), 2)
    opt = AdamW(params)
    batch, target = batch_of(sample, norm)
    losses = []
    for _ in range(60):
        with ad.Tape() as tape:
            total, _, _ = step_loss(batch, target, params, Ablation(), "igbl")
        grads, _ = clip_global_norm(ad.grad(tape, total, params), 1.0)
        opt.step(grads, 1e-3)
        losses.append(float(total.data))
    tail = losses[10:]
    assert all(b < a for a, b in zip(tail, tail[1:]))


def test_one_epoch_smoke(dataset, tmp_path):
    cfg = replace(TINY, epochs=1)
    res = train(dataset, cfg, tmp_path, train_trajs=dataset.split("train")[:1], val_trajs=[])
    params, ablation = load_checkpoint(res.checkpoint)
    assert ablation == Ablation()
    assert [t.data.tobytes() for t in params] == [t.data.tobytes() for t in res.params]
    assert (tmp_path / "best.ckpt").exists()
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("# ablation=full ")
    assert rows[1] == "epoch,split,l_fluid,l_solid,sigma2_f,sigma2_s,rel_l2_fluid,rel_l2_solid,rel_l2_combined"


def test_training_is_deterministic(dataset):
    a = train(dataset, TINY)
    b = train(dataset, TINY)
    assert a.final_loss == b.final_loss
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.params, b.params))
    assert a.history == b.history


def test_metrics_header_records_ablation_and_loss(dataset, tmp_path):
    cfg = replace(TINY, epochs=1, ablation=Ablation(no_pcgm=True), loss="fixed:1:3")
    train(dataset, cfg, tmp_path)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert "ablation=no_pcgm" in header and "loss=fixed:1:3" in header
    rows = list(csv.DictReader((tmp_path / "metrics.csv").read_text().splitlines()[1:]))
    assert {r["split"] for r in rows} == {"train", "val"}
    assert rows[0]["sigma2_f"] == "1.0"  # fixed weights leave the log-variances untouched


def test_fifty_epochs_beat_persistence(dataset):
    cfg = replace(TINY, epochs=50)
    res = train(dataset, cfg)
    norm = dataset.normalizer
    samples = collect_samples(dataset.split("train"), cfg.window, norm)
    model = evaluate(res.params, samples, norm)
    still = evaluate(res.params, samples, norm, persistence=True)
    assert model.l_fluid + model.l_solid < still.l_fluid + still.l_solid


def test_rollout_horizon_one_matches_single_step(dataset):
    norm = dataset.normalizer
    params = init_params(TINY.model_config(dataset.pos_dim, len(norm.phys_mean)), 3)
    traj = dataset.split("test")[0]
    roll = rollout(params, traj, 1, norm)
    sample = [s for s in collect_samples([traj], TINY.window, norm) if s.t == TINY.window - 1]
    single = evaluate(params, sample, norm)
    assert roll.rel_fluid[0] == single.rel_fluid
    assert roll.rel_solid[0] == single.rel_solid


def test_rollout_on_zero_trajectory(dataset):
    norm = dataset.normalizer
    params = init_params(TINY.model_config(dataset.pos_dim, len(norm.phys_mean)), 3)
    geom = OracleGeometry(6, 2)
    traj = simulate(geom, PhysicsParams(), Inflow(), T=12)
    res = rollout(params, traj, 5, norm)
    assert res.frames.shape == (5, 8, 2)
    assert np.all(np.isnan(res.rel_fluid)) and res.diverged_at is None
    persist = rollout(None, traj, 5, norm, window=TINY.window)
    assert np.all(persist.frames == 0.0)


def test_rollout_horizon_guard(dataset):
    traj = dataset.split("test")[0]
    from hetsolver.errors import TooShort
    with pytest.raises(TooShort):
        rollout(None, traj, traj.num_frames, dataset.normalizer, window=3)


def test_ablation_csv_format(dataset, tmp_path):
    cfg = replace(TINY, epochs=1)
    report = ablation_suite(dataset, cfg, tmp_path, ratios=((1, 1), (1, 3)))
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == [v[0] for v in VARIANTS]
    for r in rows:
        assert math.isfinite(float(r["fluid"])) and math.isfinite(float(r["solid"]))
    with open(tmp_path / "pareto.csv") as fh:
        pareto = list(csv.DictReader(fh))
    assert [p["loss"] for p in pareto] == ["fixed:1:1", "fixed:1:3", "igbl"]
    # fixed 1:1 and no_igbl are the same run
    assert report.row("no_igbl")["val_fluid"] == report.pareto[0]["val_fluid"]

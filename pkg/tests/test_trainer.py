from __future__ import annotations

import csv
import io
import math

import numpy as np
import pytest

from oracles import brute_force_optimum
from qroute import autodiff as ad
from qroute import checkpoint as ckpt
from qroute import env
from qroute.autodiff import Tensor
from qroute.config import Config
from qroute.env import GeneratorSpec, Instance
from qroute.policy import AttentionPolicy
from qroute.trainer import (
    METRICS_COLUMNS,
    baseline_test,
    epoch_instances,
    evaluate,
    load_checkpoint,
    lr_schedule,
    reinforce_batch,
    reinforce_no_baseline,
    rng_stream,
    save_checkpoint,
    train,
)

POLICY = {"d_h": 8, "n_layers": 1, "n_heads": 2, "d_k": 4, "d_ff": 8, "decoder_heads": 2}


def small(**train_values) -> Config:
    values = {"num_epochs": 2, "batches_per_epoch": 2, "batch_size": 4, "seed": 5, **train_values}
    return Config().with_values(env={"n_nodes": 5}, policy=POLICY, train=values)


def without_seconds(metrics):
    return [{k: v for k, v in vars(m).items() if k != "seconds"} for m in metrics]


# -- schedule and baseline test ----------------------------------------------------------------


def test_lr_schedule_examples():
    assert lr_schedule(0, 2.0**-11, 0.96, 90) == 2.0**-11
    assert all(lr_schedule(n, 1e-3, 1.0, 90) == 1e-3 for n in range(200))
    assert lr_schedule(90, 1.0, 0.96, 90) == lr_schedule(140, 1.0, 0.96, 90) == 0.96**89
    assert lr_schedule(3, 1.0, 0.5, 90) == 0.125
    with pytest.raises(ValueError):
        lr_schedule(-1, 1.0, 0.5, 90)


def test_baseline_test_examples():
    assert baseline_test([0.71])
    streak = [0.55] * 10
    assert [baseline_test(streak[:k]) for k in range(1, 11)] == [False] * 9 + [True]
    assert not baseline_test([0.55] * 9 + [0.45])
    assert not baseline_test([0.7])  # strict
    assert not baseline_test([])


# -- one batch -------------------------------------------------------------------------------------


def test_shared_seeds_and_equal_parameters_give_zero_gradient():
    cfg = small()
    pol = AttentionPolicy(cfg.policy, seed=1)  # dropout on: masks come from the shared stream too
    insts = epoch_instances(cfg, 1, 0)
    out = reinforce_batch(pol, pol.snapshot(), insts, lambda: rng_stream(0, 9))
    assert np.array_equal(out.costs, out.baseline_costs) and out.loss == 0.0
    assert all(np.all(g == 0) for g in out.grads.values())


def test_gradient_is_advantage_times_score():
    cfg = small().with_values(policy={"dropout": 0.0})
    pol = AttentionPolicy(cfg.policy, seed=2)
    base = AttentionPolicy(cfg.policy, seed=3)
    insts = epoch_instances(cfg, 1, 0)[:1]
    out = reinforce_batch(pol, base, insts, lambda: rng_stream(0, 8))
    adv = float(out.costs[0] - out.baseline_costs[0])
    assert adv != 0
    pol.store.zero_grad()
    replay = pol.rollout(insts, rng=rng_stream(0, 8), train=True)
    ad.backward(ad.sum(replay.log_prob))
    score = pol.store.grads()
    for name, g in out.grads.items():
        assert np.allclose(g, adv * score[name], rtol=1e-12, atol=1e-15), name


def test_no_baseline_gradient_is_cost_weighted_score():
    cfg = small().with_values(policy={"dropout": 0.0})
    pol = AttentionPolicy(cfg.policy, seed=4)
    inst = epoch_instances(cfg, 1, 0)[0]
    out = reinforce_batch(pol, None, [inst] * 3, lambda: rng_stream(1, 1))
    assert np.all(np.isnan(out.baseline_costs))
    pol.store.zero_grad()
    replay = pol.rollout([inst] * 3, rng=rng_stream(1, 1), train=True)
    ad.backward(ad.mean(Tensor(replay.costs) * replay.log_prob))
    for name, g in pol.store.grads().items():
        assert np.allclose(out.grads[name], g, rtol=1e-12, atol=1e-15)


def test_gradient_clipping_bounds_the_norm():
    cfg = small()
    pol = AttentionPolicy(cfg.policy, seed=5)
    out = reinforce_batch(pol, None, epoch_instances(cfg, 1, 0), lambda: rng_stream(0, 1), max_grad_norm=1e-3)
    assert np.linalg.norm(np.concatenate([g.ravel() for g in out.grads.values()])) == pytest.approx(1e-3)


def test_non_finite_loss_aborts(monkeypatch):
    cfg = small()
    pol = AttentionPolicy(cfg.policy, seed=6)
    original = AttentionPolicy.rollout

    def broken(self, *a, **k):
        res = original(self, *a, **k)
        res.log_prob = res.log_prob * Tensor(np.array([np.inf, 1, 1, 1]))
        return res

    monkeypatch.setattr(AttentionPolicy, "rollout", broken)
    with pytest.raises(FloatingPointError, match="non-finite loss"):
        reinforce_batch(pol, None, epoch_instances(cfg, 1, 0), lambda: rng_stream(0, 1))


def test_epoch_instances_are_fresh_and_reproducible():
    cfg = small()
    a, b = epoch_instances(cfg, 1, 0), epoch_instances(cfg, 1, 0)
    assert a == b and len(a) == 4 and all(i.n == 5 for i in a)
    assert epoch_instances(cfg, 1, 1) != a and epoch_instances(cfg, 2, 0) != a


def test_epoch_instances_from_pool(tmp_path):
    pool = env.generate_instance(GeneratorSpec(40, seed=1))
    path = tmp_path / "pool.csv"
    env.write_csv(pool, path)
    cfg = small().with_values(env={"pool_csv": str(path), "n_nodes": 6})
    supplier_rows = {tuple(r) for r in pool.supplier_xy}
    for inst in epoch_instances(cfg, 1, 0, env.load_csv(path)):
        assert inst.n == 6 and {tuple(r) for r in inst.supplier_xy} <= supplier_rows


# -- the loop ------------------------------------------------------------------------------------


def test_smoke_single_epoch_single_batch():
    res = train(small(num_epochs=1, batches_per_epoch=1, batch_size=2))
    assert len(res.metrics) == 1
    m = res.metrics[0]
    assert m.epoch == 1 and 0.0 <= m.win_fraction <= 1.0 and m.min_cost <= m.mean_cost


def test_training_is_deterministic():
    a, b = train(small()), train(small())
    assert without_seconds(a.metrics) == without_seconds(b.metrics)
    assert all(np.array_equal(a.policy.store[k].data, b.policy.store[k].data) for k in a.policy.store)


def test_gamma_is_inert():
    a = train(small(gamma=1.0, algorithm="no_baseline"))
    b = train(small(gamma=0.3, algorithm="no_baseline"))
    assert all(np.array_equal(a.policy.store[k].data, b.policy.store[k].data) for k in a.policy.store)


def test_no_baseline_variant_reports_nan_baseline():
    res = reinforce_no_baseline(small(num_epochs=1))
    assert math.isnan(res.metrics[0].win_fraction) and math.isnan(res.metrics[0].baseline_mean_cost)


def test_baseline_updates_only_when_test_fires():
    cfg = small(num_epochs=3, baseline_instant_threshold=1e-9)  # any win fraction > 0 fires
    res = train(cfg)
    for m in res.metrics:
        assert m.baseline_updated == (m.win_fraction > 0.0)
    cfg = small(num_epochs=2, baseline_instant_threshold=0.999, baseline_streak=50)
    res = train(cfg)
    assert not any(m.baseline_updated for m in res.metrics)
    init = AttentionPolicy(cfg.policy, seed=int(rng_stream(cfg.train.seed, 0).integers(2**63)))
    assert all(np.array_equal(res.baseline.policy.store[k].data, init.store[k].data) for k in init.store)
    assert len(res.baseline.history) == 2


def test_outputs_and_resume_match_uninterrupted_run(tmp_path):
    full = train(small(num_epochs=3), tmp_path / "full")
    train(small(num_epochs=2), tmp_path / "part")
    resumed = train(small(num_epochs=3), tmp_path / "part", resume=tmp_path / "part" / "ckpt_epoch2.ckpt")
    assert without_seconds(resumed.metrics) == without_seconds(full.metrics)
    for k in full.policy.store:
        assert np.array_equal(resumed.policy.store[k].data, full.policy.store[k].data)
    assert sorted(p.name for p in (tmp_path / "full").iterdir()) == [
        "ckpt_epoch1.ckpt", "ckpt_epoch2.ckpt", "ckpt_epoch3.ckpt", "metrics.csv"
    ]
    rows = list(csv.reader(io.StringIO((tmp_path / "full" / "metrics.csv").read_text())))
    assert tuple(rows[0]) == METRICS_COLUMNS and [r[1] for r in rows[1:]] == ["-1"] * 3


def test_batch_rows_in_metrics(tmp_path):
    train(small(log_batches=True), tmp_path)
    rows = list(csv.DictReader(io.StringIO((tmp_path / "metrics.csv").read_text())))
    assert [(r["epoch"], r["batch"]) for r in rows] == [
        ("1", "0"), ("1", "1"), ("1", "-1"), ("2", "0"), ("2", "1"), ("2", "-1")
    ]


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    res = train(small(), tmp_path)
    loaded = load_checkpoint(res.checkpoint)
    again = save_checkpoint(tmp_path / "again.ckpt", loaded.cfg, loaded.policy, loaded.baseline,
                            loaded.adam, loaded.epoch, loaded.metrics, loaded.batch_rows)
    assert again.read_bytes() == res.checkpoint.read_bytes()
    assert loaded.cfg == small() and loaded.epoch == 2 and loaded.adam.step == 4


def test_checkpoint_rejects_mismatched_config(tmp_path):
    res = train(small(num_epochs=1), tmp_path)
    bigger = small().with_values(policy={"d_h": 16})
    with pytest.raises(ckpt.CheckpointError):
        load_checkpoint(res.checkpoint, bigger)


def test_non_finite_gradient_names_parameter(monkeypatch):
    from qroute import trainer

    original = trainer.reinforce_batch

    def wrapped(policy, *a, **k):
        out = original(policy, *a, **k)
        policy.store["decoder.out"].grad = np.full(policy.store["decoder.out"].shape, np.nan)
        return out

    monkeypatch.setattr(trainer, "reinforce_batch", wrapped)
    with pytest.raises(FloatingPointError, match="decoder.out"):
        train(small(num_epochs=1))


# -- evaluation ------------------------------------------------------------------------------------


def test_greedy_evaluation_is_deterministic_and_mixed_sizes():
    pol = AttentionPolicy(small().policy, seed=7)
    rng = np.random.default_rng(0)
    insts = [env.generate_instance(GeneratorSpec(int(n)), rng) for n in (4, 6, 4, 5)]
    a, b = evaluate(pol, insts), evaluate(pol, insts)
    assert np.array_equal(a.costs, b.costs) and a.routes == b.routes
    for inst, route, cost in zip(insts, a.routes, a.costs):
        assert env.route_cost(inst, route) == pytest.approx(cost)
    assert a.min <= a.median and "mode=greedy" in a.to_text()
    s1, s2 = evaluate(pol, insts, "sample", seed=1), evaluate(pol, insts, "sample", seed=1)
    assert np.array_equal(s1.costs, s2.costs)


def test_greedy_cost_never_beats_brute_force_optimum():
    pol = AttentionPolicy(small().policy, seed=8)
    rng = np.random.default_rng(1)
    insts = [env.generate_instance(GeneratorSpec(3), rng) for _ in range(10)]
    report = evaluate(pol, insts)
    for inst, cost in zip(insts, report.costs):
        assert cost >= brute_force_optimum(inst.coords, inst.demands) - 1e-12


def test_reevaluation_reproduces_logged_mean(tmp_path):
    cfg = small(num_epochs=1, batches_per_epoch=4, batch_size=16)
    res = train(cfg)
    insts = [i for b in range(4) for i in epoch_instances(cfg, 1, b)]
    costs = evaluate(res.policy, insts, "sample", seed=3).costs
    assert abs(costs.mean() - res.metrics[0].mean_cost) <= 3 * costs.std() / math.sqrt(len(costs)) * math.sqrt(2)


def test_empty_eval_set_rejected():
    with pytest.raises(ValueError):
        evaluate(AttentionPolicy(small().policy), [])

import hashlib
import multiprocessing
import time

import numpy as np
import pytest

from rail.discriminator import DiscriminatorParams
from rail.errors import DomainError, EngineError
from rail.policy import NormalizerState, PolicyParams, sample_directions
from rail.training import (RailConfig, RolloutEngine, RolloutSnapshot,
                           RolloutTask, rail_train, rollout_engine_run,
                           task_seed)

from conftest import small_config


def build_run(n_directions, seed=3, cfg=None):
    cfg = cfg or small_config(traffic_density=30.0)
    params = PolicyParams.zeros("two_layer", cfg.observation_dim, 8)
    rng = np.random.default_rng(seed)
    directions = sample_directions(rng, n_directions, params)
    disc = DiscriminatorParams.random_init(params.n + params.p, 16,
                                           np.random.default_rng(1))
    snapshot = RolloutSnapshot(
        snapshot_id=1, params=params, mu=np.zeros(params.n),
        inv_sigma=np.ones(params.n), disc=disc, nu=0.05)
    tasks = [RolloutTask(k, sign, 1, task_seed(seed, 1, k, sign),
                         directions[k])
             for k in range(n_directions) for sign in (1, -1)]
    return cfg, snapshot, tasks


def results_digest(results):
    h = hashlib.sha256()
    for r in results:
        h.update(np.int64(r.k).tobytes())
        h.update(np.int64(r.sign).tobytes())
        h.update(np.float64(r.reward).tobytes())
        h.update(r.trajectory.observations.tobytes())
        h.update(r.trajectory.actions.tobytes())
    return h.hexdigest()


def test_results_identical_across_worker_counts():
    cfg, snapshot, tasks = build_run(6)
    digests = []
    for workers in (1, 2, 3):
        results = rollout_engine_run(cfg, snapshot, tasks, workers)
        digests.append(results_digest(results))
    assert digests[0] == digests[1] == digests[2]


def test_task_accounting():
    cfg, snapshot, tasks = build_run(5)
    results = rollout_engine_run(cfg, snapshot, tasks, 2)
    assert len(results) == 10
    keys = [(r.k, r.sign) for r in results]
    assert len(set(keys)) == 10
    assert keys == sorted(keys)
    for r in results:
        assert len(r.trajectory) >= 1
        assert np.isfinite(r.reward)


def test_duplicate_task_keys_rejected():
    cfg, snapshot, tasks = build_run(2)
    with pytest.raises(DomainError):
        rollout_engine_run(cfg, snapshot, tasks + [tasks[0]], 1)


@pytest.mark.parametrize("workers", [1, 3])
def test_task_failure_identifies_direction_and_sign(workers):
    cfg, snapshot, tasks = build_run(4)
    broken = RolloutTask(2, -1, 1, tasks[0].seed, None)  # missing direction
    tasks = [t for t in tasks if not (t.k == 2 and t.sign == -1)] + [broken]
    with pytest.raises(EngineError) as err:
        rollout_engine_run(cfg, snapshot, tasks, workers)
    assert err.value.direction == 2
    assert err.value.sign == -1


def test_engine_rejects_empty_and_closed():
    cfg, snapshot, tasks = build_run(1)
    engine = RolloutEngine(cfg, 1)
    with pytest.raises(DomainError):
        engine.run(snapshot, [])
    engine.close()
    with pytest.raises(EngineError):
        engine.run(snapshot, tasks)


def test_rail_train_metrics_identical_across_worker_counts(tiny_demos):
    cfg, demos = tiny_demos
    outputs = {}
    for workers in (1, 2):
        rail = RailConfig(directions=4, iterations=4, workers=workers,
                          seed=11, eval_period=2)
        params, norm, disc, reports = rail_train(cfg, demos, rail,
                                                 kind="two_layer", hidden=6)
        outputs[workers] = (params, norm, disc, reports)
    p1, n1, d1, r1 = outputs[1]
    p2, n2, d2, r2 = outputs[2]
    assert np.array_equal(p1.w_in, p2.w_in)
    assert np.array_equal(p1.w_out, p2.w_out)
    assert np.array_equal(n1.mean, n2.mean)
    assert np.array_equal(n1.m2, n2.m2)
    assert np.array_equal(d1.w1, d2.w1)
    for a, b in zip(r1, r2):
        assert (a.iteration, a.mean_reward, a.max_reward, a.sigma_r,
                a.disc_loss, a.nu) == \
               (b.iteration, b.mean_reward, b.max_reward, b.sigma_r,
                b.disc_loss, b.nu)


@pytest.mark.skipif(multiprocessing.cpu_count() < 8,
                    reason="throughput bound assumes >= 8 cores")
def test_parallel_throughput_soft_bound():
    cfg = small_config(traffic_density=30.0, episode_horizon=200)
    cfg, snapshot, tasks = build_run(32, cfg=cfg)
    start = time.perf_counter()
    rollout_engine_run(cfg, snapshot, tasks, 1)
    serial = time.perf_counter() - start
    start = time.perf_counter()
    rollout_engine_run(cfg, snapshot, tasks, 8)
    parallel = time.perf_counter() - start
    assert serial >= 3.0 * parallel

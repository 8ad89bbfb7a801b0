import math
from dataclasses import replace

import numpy as np
import pytest

from privgfl import engine, graph, privacy, tasks
from privgfl import rng as _rng
from privgfl.engine import TrainConfig
from privgfl.tasks import AgentShard, Loss

QUAD = Loss("quadratic", 0.1)


@pytest.fixture(scope="module")
def small():
    data = tasks.generate_regression(4, 8, 20, 2, seed=11)
    A = graph.build_metropolis(graph.Topology.ring(4))
    w_o = tasks.closed_form_optimum(data, 0.1).w_o
    return data, A, w_o


# ---------------------------------------------------------- client update

def test_full_batch_single_epoch_is_gradient_step():
    shard = tasks.generate_regression(1, 1, 15, 3, seed=0).shard(0, 0)
    w0 = np.array([0.3, -0.2, 1.0])
    out = engine.client_update(w0, shard, QUAD, 0.05, 1, 15, np.random.default_rng(0))
    expected = w0 - 0.05 * QUAD.gradients(w0, shard.features, shard.labels).mean(axis=0)
    assert np.allclose(out, expected, rtol=1e-14, atol=1e-15)


def test_zero_step_returns_start():
    shard = tasks.generate_regression(1, 1, 15, 2, seed=0).shard(0, 0)
    w0 = np.array([0.3, -0.2])
    out = engine.client_update(w0, shard, QUAD, 0.0, 4, 5, np.random.default_rng(0))
    assert np.array_equal(out, w0)


def test_two_epochs_match_hand_unrolled_replay():
    shard = tasks.generate_regression(1, 1, 30, 2, seed=1).shard(0, 0)
    w0 = np.array([0.5, 0.5])
    mu, B = 0.2, 7
    out = engine.client_update(w0, shard, QUAD, mu, 2, B, np.random.default_rng(42))
    # replay: the same generator state yields the same batches
    keys = np.random.default_rng(42).random((2, 30))
    w = w0.copy()
    for e in range(2):
        idx = np.sort(np.argsort(keys[e])[:B])
        g = np.mean([tasks.per_sample_gradient(QUAD, w, shard.features[n], shard.labels[n])
                     for n in idx], axis=0)
        w = w - (mu / 2) * g
    assert np.allclose(out, w, rtol=1e-13, atol=1e-15)


def test_batches_are_without_replacement():
    idx = engine.draw_batches(np.random.default_rng(0), 12, 5, 7)
    assert idx.shape == (5, 7)
    assert all(len(set(row.tolist())) == 7 for row in idx)
    assert not all(np.array_equal(np.sort(idx[0]), np.sort(r)) for r in idx[1:])


def test_client_update_rejects_bad_batch():
    shard = AgentShard(np.ones((3, 2)), np.ones(3))
    with pytest.raises(ValueError):
        engine.client_update(np.zeros(2), shard, QUAD, 0.1, 1, 4, np.random.default_rng(0))


# ----------------------------------------------------------- server round

def test_single_agent_server_round_is_client_update():
    data = tasks.generate_regression(1, 1, 20, 2, seed=3)
    cfg = TrainConfig(mu=0.3, L=1, epochs=(3, 3), batch=(6, 6), seed=5)
    sched = engine.Schedule.draw(cfg, data)
    w = np.array([1.0, -1.0])
    psi = engine.server_round(0, w, data, QUAD, cfg, sched, 4)
    ref = engine.client_update(w, data.shard(0, 0), QUAD, 0.3, 3, 6,
                               _rng.stream(5, _rng.BATCHES, 0, 0, 4))
    assert np.allclose(psi, ref, rtol=1e-14, atol=1e-15)


def test_batched_round_matches_per_client_reference(small):
    data, _, _ = small
    cfg = TrainConfig(mu=0.4, L=5, seed=2)
    sched = engine.Schedule.draw(cfg, data)
    w = np.array([0.2, 0.1])
    psi = engine.server_round(2, w, data, QUAD, cfg, sched, 7)
    ks = engine.sample_participants(2, 2, 7, data.K, 5)
    ref = np.mean([engine.client_update(w, data.shard(2, k), QUAD, 0.4, sched.epochs[2, k],
                                        sched.batch[2, k], _rng.stream(2, _rng.BATCHES, 2, k, 7))
                   for k in ks], axis=0)
    assert np.allclose(psi, ref, rtol=1e-12, atol=1e-14)


def test_masks_cancel_in_server_round(small):
    data, _, _ = small
    cfg = TrainConfig(mu=0.4, L=2, seed=2)
    sched = engine.Schedule.draw(cfg, data)
    w = np.array([0.2, 0.1])
    plain = engine.server_round(1, w, data, QUAD, cfg, sched, 3)
    masked_cfg = replace(cfg, client_masking=engine.MASKING_SECRET_SHARING, mask_scale=100.0)
    kr = privacy.KeyRing(masked_cfg.dh, cfg.seed, 1)
    masked = engine.server_round(1, w, data, QUAD, masked_cfg, sched, 3, kr)
    assert np.allclose(masked, plain, rtol=0, atol=1e-10)


def test_participant_sampling_replay():
    ks = engine.sample_participants(9, 3, 12, 100, 11)
    oracle = np.sort(_rng.stream(9, _rng.PARTICIPANTS, 3, 12).choice(100, 11, replace=False))
    assert np.array_equal(ks, oracle)
    assert len(set(ks.tolist())) == 11


def test_schedule_ranges(small):
    data, _, _ = small
    sched = engine.Schedule.draw(TrainConfig(epochs=(1, 10), batch=(5, 10)), data)
    assert sched.epochs.min() >= 1 and sched.epochs.max() <= 10
    assert sched.batch.min() >= 5 and sched.batch.max() <= 10


# ---------------------------------------------------------------- combine

def test_identity_combination_passes_through():
    psi = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(engine.combine(np.eye(3), psi).models, psi)


def test_uniform_pair_averages():
    psi = np.array([[1.0, 2.0], [3.0, -2.0]])
    out = engine.combine(np.full((2, 2), 0.5), psi).models
    assert np.array_equal(out, [[2.0, 0.0], [2.0, 0.0]])


def test_ghp_leaves_centroid_unchanged():
    A = graph.build_metropolis(graph.Topology.erdos_renyi(9, 0.4, 0)).weights
    psi = np.random.default_rng(0).standard_normal((9, 3))
    noise = privacy.draw_link_noise(privacy.PerturbationScheme(privacy.HOMOMORPHIC, 3.0), A, 3, 1, 0)
    noisy = engine.combine(A, psi, noise)
    clean = engine.combine(A, psi)
    assert np.allclose(engine.centroid(noisy), engine.centroid(clean), rtol=0, atol=1e-10)
    assert not np.allclose(noisy.models, clean.models)


# ------------------------------------------------------- metrics helpers

def test_centroid_examples():
    assert np.array_equal(engine.centroid(np.array([[1.0, 2.0]] * 4)), [1.0, 2.0])
    assert np.array_equal(engine.centroid(np.array([[0.5, -3.0], [-0.5, 3.0]])), [0.0, 0.0])


def test_centroid_matches_compensated_sum():
    W = np.random.default_rng(1).standard_normal((37, 4)) * 1e3
    oracle = np.array([math.fsum(W[:, j]) / 37 for j in range(4)])
    assert np.allclose(engine.centroid(W), oracle, rtol=1e-12, atol=0)


def test_test_error_ties_go_to_class_zero():
    test = AgentShard(np.random.default_rng(0).standard_normal((10, 2)),
                      np.array([1, 0, 1, 1, 0, 0, 0, 1, 1, 1], dtype=float))
    assert engine.test_error(np.zeros(2), test) == pytest.approx(0.6)


def test_test_error_separator_is_perfect():
    U = np.random.default_rng(0).standard_normal((200, 2))
    w = np.array([1.0, -2.0])
    assert engine.test_error(w, AgentShard(U, (U @ w > 0).astype(float))) == 0.0


def test_test_error_random_model_near_half():
    gen = np.random.default_rng(5)
    test = AgentShard(gen.standard_normal((1000, 3)), gen.integers(0, 2, 1000).astype(float))
    assert abs(engine.test_error(gen.standard_normal(3), test) - 0.5) <= 0.05


# -------------------------------------------------------------------- run

def test_metrics_rows_and_decomposition(small):
    data, A, w_o = small
    for kind in privacy.SCHEMES:
        cfg = TrainConfig(mu=0.5, rounds=30, L=4, seed=1,
                          scheme=privacy.PerturbationScheme.from_variance(kind, 0.5))
        res = engine.run(cfg, A, data, QUAD, w_o)
        assert [r.i for r in res.metrics] == list(range(1, 31))
        for r in res.metrics:
            assert r.msd_avg == pytest.approx(r.msd_centroid + r.disagreement, rel=1e-9)
            assert r.test_error is None and r.epsilon is None


def test_masking_does_not_change_metrics(small):
    data, A, w_o = small
    cfg = TrainConfig(mu=0.5, rounds=20, L=4, seed=3)
    a = engine.run(cfg, A, data, QUAD, w_o)
    b = engine.run(replace(cfg, client_masking=engine.MASKING_SECRET_SHARING), A, data, QUAD, w_o)
    for ra, rb in zip(a.metrics, b.metrics):
        assert ra.msd_centroid == pytest.approx(rb.msd_centroid, abs=1e-10)
        assert ra.msd_avg == pytest.approx(rb.msd_avg, abs=1e-10)


def test_zero_sigma_equals_no_noise(small):
    data, A, w_o = small
    base = TrainConfig(mu=0.5, rounds=10, L=4, seed=3)
    ref = engine.run(base, A, data, QUAD, w_o).series("msd_avg")
    for kind in (privacy.HOMOMORPHIC, privacy.INDEPENDENT):
        cfg = replace(base, scheme=privacy.PerturbationScheme(kind, 0.0))
        assert np.array_equal(engine.run(cfg, A, data, QUAD, w_o).series("msd_avg"), ref)


def test_worker_count_does_not_change_results(small):
    data, A, w_o = small
    cfg = TrainConfig(mu=0.5, rounds=15, L=4, seed=8,
                      scheme=privacy.PerturbationScheme.from_variance(privacy.INDEPENDENT, 0.1))
    one = engine.run(cfg, A, data, QUAD, w_o)
    four = engine.run(replace(cfg, workers=4), A, data, QUAD, w_o)
    assert np.array_equal(one.state.models, four.state.models)
    assert one.metrics == four.metrics


def test_single_unit_full_batch_is_gradient_descent():
    data = tasks.generate_regression(1, 1, 25, 2, seed=4)
    shard = data.shard(0, 0)
    cfg = TrainConfig(mu=0.1, rounds=200, L=1, epochs=(1, 1), batch=(25, 25), seed=0)
    res = engine.run(cfg, graph.build_metropolis(graph.Topology(1)), data, QUAD, keep_history=True)
    w = np.zeros(2)
    for i in range(1, 201):
        w = w - 0.1 * QUAD.gradients(w, shard.features, shard.labels).mean(axis=0)
        assert np.allclose(res.history[i][0], w, rtol=1e-12, atol=1e-14)
    assert np.allclose(w, tasks.shard_optimum(shard, QUAD), atol=1e-8)


def test_noise_free_convergence(small):
    data, A, w_o = small
    res = engine.run(TrainConfig(mu=0.05, rounds=400, L=4, seed=0), A, data, QUAD, w_o)
    s = res.series("msd_centroid")
    assert s[-50:].mean() < 1e-3
    means = s[: len(s) // 50 * 50].reshape(-1, 50).mean(axis=1)
    # smoothed trace descends until it reaches the floor and never climbs back above it
    above = means[:-1] > 1e-3
    assert np.all(np.diff(means)[above] <= 0)
    first_below = int(np.argmax(means <= 1e-3))
    assert np.all(means[first_below:] <= 1e-3)


def test_step_size_floor_scaling():
    data = tasks.generate_regression(5, 20, 50, 2, seed=0)
    A = graph.build_metropolis(graph.Topology.ring(5))
    w_o = tasks.closed_form_optimum(data, 0.1).w_o
    floors = []
    for mu, T in ((0.5, 300), (0.05, 1500)):
        vals = [engine.steady_state(engine.run(TrainConfig(mu=mu, rounds=T, L=5, seed=s),
                                               A, data, QUAD, w_o), window=T // 4)
                for s in range(3)]
        floors.append(np.mean(vals))
    assert 3 <= floors[0] / floors[1] <= 30


def test_accountant_column(small):
    data, A, w_o = small
    cfg = TrainConfig(mu=0.1, rounds=10, L=4, account_B=1.0,
                      scheme=privacy.PerturbationScheme(privacy.HOMOMORPHIC, 15.5563))
    eps = [r.epsilon for r in engine.run(cfg, A, data, QUAD, w_o).metrics]
    assert eps[-1] == pytest.approx(1.0, abs=1e-4)
    assert all(a < b for a, b in zip(eps, eps[1:]))


def test_classification_reports_test_error():
    data = tasks.generate_classification(3, 4, 30, 2, seed=0, test_size=64)
    A = graph.build_metropolis(graph.Topology.complete(3))
    res = engine.run(TrainConfig(mu=0.5, rounds=5, L=2, seed=0), A, data, Loss("logistic", 0.03))
    assert all(r.msd_centroid is None and 0 <= r.test_error <= 1 for r in res.metrics)


def test_run_checks_configuration(small):
    data, A, _ = small
    with pytest.raises(engine.ConfigError, match="L = 9"):
        engine.run(TrainConfig(L=9), A, data, QUAD)
    with pytest.raises(engine.ConfigError):
        engine.run(TrainConfig(L=2), graph.build_metropolis(graph.Topology.ring(3)), data, QUAD)
    bad = graph.from_weights(np.array([[0.0, 1.0], [1.0, 0.0]]))
    two = tasks.generate_regression(2, 2, 5, 2, seed=0)
    cfg = TrainConfig(L=1, scheme=privacy.PerturbationScheme(privacy.HOMOMORPHIC, 1.0))
    with pytest.raises(privacy.PrivacyConfigError):
        engine.run(cfg, bad, two, QUAD)


def test_ghp_beats_independent_at_scale():
    data = tasks.generate_regression(10, 100, 100, 2, seed=0)
    A = graph.build_metropolis(graph.Topology.erdos_renyi(10, 0.3, 1))
    w_o = tasks.closed_form_optimum(data, 0.1).w_o
    out = {}
    for kind in (privacy.HOMOMORPHIC, privacy.INDEPENDENT):
        cfg = TrainConfig(mu=0.7, rounds=300, L=11, seed=0,
                          scheme=privacy.PerturbationScheme.from_variance(kind, 0.1))
        out[kind] = engine.steady_state(engine.run(cfg, A, data, QUAD, w_o))
    assert out[privacy.HOMOMORPHIC] < out[privacy.INDEPENDENT]

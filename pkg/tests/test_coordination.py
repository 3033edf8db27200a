import math

import numpy as np
import pytest

from tma.coordination import (
    ProtocolError,
    RunConfig,
    TrainerSpec,
    inject_failure,
    run_training,
)
from tma.graph import build_splits, generate_synthetic
from tma.nn import ModelConfig
from tma.partition import induce_subgraphs, partition_random_node
from tma.runtime import (
    ChannelClosed,
    ChannelTimeout,
    DeadlockError,
    SimRuntime,
    ThreadRuntime,
)


# ---------------------------------------------------------------------------
# sim kernel


class TestSimKernel:
    def test_virtual_time_advances_on_sleep(self):
        rt = SimRuntime()
        seen = []

        def actor():
            rt.clock.sleep(5.0)
            seen.append(rt.clock.now())
            rt.clock.sleep(2.5)
            seen.append(rt.clock.now())

        rt.spawn("a", actor)
        rt.run_all()
        assert seen == [5.0, 7.5]

    def test_interleaving_is_time_ordered(self):
        rt = SimRuntime()
        order = []

        def actor(name, delay):
            rt.clock.sleep(delay)
            order.append((name, rt.clock.now()))

        rt.spawn("slow", actor, "slow", 3.0)
        rt.spawn("fast", actor, "fast", 1.0)
        rt.run_all()
        assert order == [("fast", 1.0), ("slow", 3.0)]

    def test_channel_passes_messages_between_actors(self):
        rt = SimRuntime()
        ch = rt.channel()
        got = []

        def producer():
            for i in range(3):
                rt.clock.sleep(1.0)
                ch.put(i)

        def consumer():
            for _ in range(3):
                got.append((ch.get(), rt.clock.now()))

        rt.spawn("p", producer)
        rt.spawn("c", consumer)
        rt.run_all()
        assert got == [(0, 1.0), (1, 2.0), (2, 3.0)]

    def test_recv_timeout_fires_at_virtual_deadline(self):
        rt = SimRuntime()
        ch = rt.channel()
        seen = {}

        def actor():
            try:
                ch.get(timeout=4.0)
            except ChannelTimeout:
                seen["t"] = rt.clock.now()

        rt.spawn("a", actor)
        rt.run_all()
        assert seen["t"] == 4.0

    def test_deadlock_detected(self):
        rt = SimRuntime()
        ch = rt.channel()
        rt.spawn("a", lambda: ch.get())
        with pytest.raises(DeadlockError):
            rt.run_all()

    def test_closed_channel_unblocks(self):
        rt = SimRuntime()
        ch = rt.channel()
        outcome = {}

        def waiter():
            try:
                ch.get()
            except ChannelClosed:
                outcome["closed"] = True

        def closer():
            rt.clock.sleep(1.0)
            ch.close()

        rt.spawn("w", waiter)
        rt.spawn("c", closer)
        rt.run_all()
        assert outcome["closed"]

    def test_actor_error_propagates(self):
        rt = SimRuntime()

        def bad():
            raise ValueError("boom")

        rt.spawn("bad", bad)
        with pytest.raises(ValueError, match="boom"):
            rt.run_all()

    def test_deterministic_schedule(self):
        def trace():
            rt = SimRuntime()
            log = []

            def actor(name, period):
                for _ in range(5):
                    rt.clock.sleep(period)
                    log.append((name, rt.clock.now()))

            rt.spawn("x", actor, "x", 0.3)
            rt.spawn("y", actor, "y", 0.5)
            rt.spawn("z", actor, "z", 0.3)
            rt.run_all()
            return log

        assert trace() == trace()


# ---------------------------------------------------------------------------
# protocol runs (sim clock)


def make_dataset(n=240, h=0.8, seed=0, k_neg=10, mean_degree=6.0):
    g, x, y = generate_synthetic(n, mean_degree, h, seed=seed)
    train, splits = build_splits(g, 0.05, 0.05, k_neg, seed=seed)
    return train, x, y, splits


def make_specs(train, x, m, seed=0, step_time=0.05, partition_seed=0):
    p = partition_random_node(train, m, seed=partition_seed)
    subs = induce_subgraphs(train, x, p)
    return [
        TrainerSpec(trainer_id=i, subgraph=subs[i], seed=seed * 1000 + i, step_time=step_time)
        for i in range(m)
    ]


def small_model(x, seed=0):
    return ModelConfig(in_dim=x.shape[1], encoder="gcn", layers=2, hidden_dim=8, seed=seed)


class TestTmaProtocol:
    def test_round_count_matches_schedule(self):
        train, x, y, splits = make_dataset()
        specs = make_specs(train, x, 2, step_time=0.1)
        cfg = RunConfig(
            model=small_model(x), train_budget=30.0, agg_interval=5.0,
            batch_size=16, fanouts=(3, 3), server_poll=0.01,
        )
        res = run_training(cfg, specs, train, x, splits)
        assert abs(res.rounds - 6) <= 1
        assert res.rounds == len(res.round_times)

    def test_single_trainer_global_equals_local(self):
        train, x, y, splits = make_dataset(seed=1)
        specs = make_specs(train, x, 1, step_time=0.1)
        cfg = RunConfig(
            model=small_model(x), train_budget=4.0, agg_interval=1.0,
            batch_size=16, fanouts=(3, 3),
        )
        res = run_training(cfg, specs, train, x, splits)
        # with one trainer the average is the identity: every global round
        # must equal the weights that the single trainer submitted
        assert res.rounds >= 2
        log = res.trainer_logs[0]
        assert log.steps > 0
        assert len(log.send_rounds) == res.rounds

    def test_identical_trainers_average_is_either(self):
        train, x, y, splits = make_dataset(seed=2)
        p = partition_random_node(train, 1, seed=0)
        sub = induce_subgraphs(train, x, p)[0]
        specs = [
            TrainerSpec(trainer_id=i, subgraph=sub, seed=7, step_time=0.1)
            for i in range(2)
        ]
        cfg = RunConfig(
            model=small_model(x), train_budget=3.0, agg_interval=1.0,
            batch_size=16, fanouts=(3, 3),
        )
        res = run_training(cfg, specs, train, x, splits)
        # identical seeds + identical subgraphs + lockstep clock => identical
        # trajectories; the average equals either trainer's submission
        assert res.rounds >= 2
        assert res.trainer_logs[0].steps == res.trainer_logs[1].steps

    def test_metrics_rows_complete(self):
        train, x, y, splits = make_dataset(seed=3)
        specs = make_specs(train, x, 3, step_time=0.07)
        cfg = RunConfig(
            model=small_model(x), train_budget=6.0, agg_interval=2.0,
            batch_size=16, fanouts=(3, 3),
        )
        res = run_training(cfg, specs, train, x, splits)
        val_rows = [r for r in res.metrics if r.split == "val"]
        test_rows = [r for r in res.metrics if r.split == "test"]
        assert len(val_rows) == res.rounds
        assert len(test_rows) == 1
        assert all(not math.isnan(r.mrr) for r in val_rows)
        assert 0 < res.best_val_mrr <= 1
        assert 0 < res.test_mrr <= 1
        assert res.best_round in res.weights_by_round
        for row in val_rows:
            assert set(row.steps) == {0, 1, 2}

    def test_stop_is_monotone_no_late_steps(self):
        train, x, y, splits = make_dataset(seed=4)
        specs = make_specs(train, x, 2, step_time=0.05)
        cfg = RunConfig(
            model=small_model(x), train_budget=3.0, agg_interval=1.0,
            batch_size=16, fanouts=(3, 3),
        )
        res = run_training(cfg, specs, train, x, splits)
        for log in res.trainer_logs.values():
            assert not math.isnan(log.stop_seen_at)
            late = [t for t in log.step_times if t > log.stop_seen_at]
            assert late == []

    def test_submission_tags_unique_per_round(self):
        train, x, y, splits = make_dataset(seed=5)
        specs = make_specs(train, x, 3, step_time=0.03)
        cfg = RunConfig(
            model=small_model(x), train_budget=4.0, agg_interval=0.8,
            batch_size=16, fanouts=(3, 3),
        )
        res = run_training(cfg, specs, train, x, splits)
        for log in res.trainer_logs.values():
            rounds = [r for r, _ in log.send_rounds]
            assert rounds == sorted(set(rounds))
            assert rounds == list(range(len(rounds)))

    def test_heterogeneous_speed_fast_trainer_does_more(self):
        train, x, y, splits = make_dataset(seed=6)
        p = partition_random_node(train, 2, seed=1)
        subs = induce_subgraphs(train, x, p)
        specs = [
            TrainerSpec(trainer_id=0, subgraph=subs[0], seed=1, step_time=0.05),
            TrainerSpec(trainer_id=1, subgraph=subs[1], seed=2, step_time=0.10),
        ]
        cfg = RunConfig(
            model=small_model(x), train_budget=10.0, agg_interval=2.5,
            batch_size=16, fanouts=(3, 3),
        )
        res = run_training(cfg, specs, train, x, splits)
        assert res.trainer_logs[0].steps > 1.5 * res.trainer_logs[1].steps
        # rounds still fire roughly on schedule
        assert abs(res.rounds - 4) <= 1

    def test_degenerate_trainer_keeps_protocol_alive(self):
        train, x, y, splits = make_dataset(seed=7)
        p = partition_random_node(train, 2, seed=0)
        subs = induce_subgraphs(train, x, p)
        from tma.graph import Graph
        from tma.partition import Subgraph

        empty = Subgraph(
            parent=train,
            local_graph=Graph.from_edges(3, np.empty((0, 2))),
            features=x[:3],
            global_ids=np.arange(3),
            train_edges=np.empty((0, 2), dtype=np.int32),
            trainer_id=1,
        )
        specs = [
            TrainerSpec(trainer_id=0, subgraph=subs[0], seed=1, step_time=0.05),
            TrainerSpec(trainer_id=1, subgraph=empty, seed=2, step_time=0.05),
        ]
        cfg = RunConfig(
            model=small_model(x), train_budget=3.0, agg_interval=1.0,
            batch_size=16, fanouts=(3, 3),
        )
        res = run_training(cfg, specs, train, x, splits)
        assert res.rounds >= 2
        assert res.trainer_logs[1].steps == 0
        assert res.trainer_logs[1].degenerate
        assert len(res.trainer_logs[1].send_rounds) == res.rounds


class TestFailureInjection:
    def test_no_failures_identical_to_plain_run(self):
        train, x, y, splits = make_dataset(seed=8)
        specs = make_specs(train, x, 2, step_time=0.05)
        cfg = RunConfig(
            model=small_model(x), train_budget=3.0, agg_interval=1.0,
            batch_size=16, fanouts=(3, 3),
        )
        a = run_training(cfg, specs, train, x, splits)
        b = run_training(inject_failure(cfg, []), specs, train, x, splits)
        assert a.best_val_mrr == b.best_val_mrr
        assert a.test_mrr == b.test_mrr
        for t in a.weights_by_round:
            assert a.weights_by_round[t].equal_bits(b.weights_by_round[t])

    def test_failed_trainer_excluded_from_rounds(self):
        train, x, y, splits = make_dataset(seed=9)
        specs = make_specs(train, x, 3, step_time=0.05)
        cfg = RunConfig(
            model=small_model(x), train_budget=3.0, agg_interval=1.0,
            batch_size=16, fanouts=(3, 3), readiness_timeout=0.5,
        )
        res = run_training(inject_failure(cfg, [1]), specs, train, x, splits)
        assert res.live_ids == [0, 2]
        assert res.rounds >= 2
        for row in res.metrics:
            assert set(row.steps) == {0, 2}

    def test_failure_subset_bitwise_equivalence(self):
        train, x, y, splits = make_dataset(seed=10)
        specs = make_specs(train, x, 3, step_time=0.05)
        cfg = RunConfig(
            model=small_model(x), train_budget=3.0, agg_interval=1.0,
            batch_size=16, fanouts=(3, 3), readiness_timeout=0.5,
        )
        failed = run_training(inject_failure(cfg, [1]), specs, train, x, splits)
        survivors = [s for s in specs if s.trainer_id != 1]
        direct = run_training(cfg, survivors, train, x, splits)
        assert failed.rounds == direct.rounds
        for t in failed.weights_by_round:
            assert failed.weights_by_round[t].equal_bits(direct.weights_by_round[t])
        assert failed.best_round == direct.best_round
        assert failed.test_mrr == direct.test_mrr
        wall_a = [r.wall_s for r in failed.metrics]
        wall_b = [r.wall_s for r in direct.metrics]
        assert wall_a == wall_b

    def test_all_failed_rejected(self):
        train, x, y, splits = make_dataset(seed=11)
        specs = make_specs(train, x, 2)
        cfg = RunConfig(
            model=small_model(x), train_budget=2.0, agg_interval=1.0,
            batch_size=16, fanouts=(3, 3),
        )
        with pytest.raises(ProtocolError):
            run_training(inject_failure(cfg, [0, 1]), specs, train, x, splits)


class TestGgs:
    def test_m1_matches_centralized_semantics(self):
        train, x, y, splits = make_dataset(seed=12)
        specs = make_specs(train, x, 1, step_time=0.05)
        cfg = RunConfig(
            model=small_model(x), mode="ggs", train_budget=3.0, agg_interval=1.0,
            batch_size=16, fanouts=(3, 3),
        )
        res = run_training(cfg, specs, train, x, splits)
        assert res.rounds >= 2
        assert res.trainer_logs[0].steps > 0

    def test_shard_gradient_linearity(self):
        # average of shard gradients equals gradient of the concatenated batch
        # when shards share weights (linearity of the mean loss)
        from tma import nn as tnn

        train, x, _, _ = make_dataset(seed=13)
        cfg_model = small_model(x)
        w = tnn.init_weights(cfg_model)
        blocks = tnn.full_graph_blocks(train, cfg_model.layers)
        rng = np.random.default_rng(0)
        u = rng.integers(0, train.num_nodes, 8)
        v = rng.integers(0, train.num_nodes, 8)
        labels = rng.integers(0, 2, 8).astype(float)
        _, g_full = tnn.link_loss_and_grads(cfg_model, w, blocks, x, u, v, labels)
        halves = [slice(0, 4), slice(4, 8)]
        parts = [
            tnn.link_loss_and_grads(cfg_model, w, blocks, x, u[s], v[s], labels[s])[1]
            for s in halves
        ]
        for name in g_full:
            avg = (parts[0][name] + parts[1][name]) / 2
            assert np.allclose(avg, g_full[name], atol=1e-12)

    def test_ggs_paced_by_slowest(self):
        train, x, y, splits = make_dataset(seed=14)
        p = partition_random_node(train, 2, seed=0)
        subs = induce_subgraphs(train, x, p)
        base = dict(train_budget=10.0, agg_interval=2.5, batch_size=16, fanouts=(3, 3))
        specs = [
            TrainerSpec(trainer_id=0, subgraph=subs[0], seed=1, step_time=0.05),
            TrainerSpec(trainer_id=1, subgraph=subs[1], seed=2, step_time=0.10),
        ]
        tma = run_training(
            RunConfig(model=small_model(x), **base), specs, train, x, splits
        )
        ggs = run_training(
            RunConfig(model=small_model(x), mode="ggs", **base), specs, train, x, splits
        )
        # synchronous mode steps at the slow trainer's pace for everyone
        assert ggs.trainer_logs[0].steps == ggs.trainer_logs[1].steps
        median_tma = np.median([log.steps for log in tma.trainer_logs.values()])
        assert ggs.trainer_logs[0].steps < median_tma


class TestThreadRuntimeAndTcp:
    def test_threads_real_clock_smoke(self):
        train, x, y, splits = make_dataset(seed=15, n=120)
        specs = make_specs(train, x, 2, step_time=0.0)
        cfg = RunConfig(
            model=small_model(x), train_budget=1.2, agg_interval=0.3,
            batch_size=8, fanouts=(2, 2), server_poll=0.005,
        )
        res = run_training(cfg, specs, train, x, splits, runtime="threads")
        assert res.rounds >= 1
        assert 0 < res.test_mrr <= 1

    def test_tcp_transport_end_to_end(self):
        train, x, y, splits = make_dataset(seed=16, n=120)
        specs = make_specs(train, x, 2, step_time=0.0)
        cfg = RunConfig(
            model=small_model(x), train_budget=1.2, agg_interval=0.3,
            batch_size=8, fanouts=(2, 2), server_poll=0.005,
        )
        res = run_training(
            cfg, specs, train, x, splits, runtime="threads", transport="tcp"
        )
        assert res.rounds >= 1
        assert 0 < res.test_mrr <= 1
        for log in res.trainer_logs.values():
            assert log.steps > 0

    def test_tcp_rejected_under_sim(self):
        train, x, y, splits = make_dataset(seed=17, n=120)
        specs = make_specs(train, x, 2)
        cfg = RunConfig(
            model=small_model(x), train_budget=1.0, agg_interval=0.3,
            batch_size=8, fanouts=(2, 2),
        )
        with pytest.raises(ProtocolError):
            run_training(cfg, specs, train, x, splits, runtime="sim", transport="tcp")


def test_config_validation():
    cfg_model = ModelConfig(in_dim=2, hidden_dim=4)
    with pytest.raises(ProtocolError):
        RunConfig(model=cfg_model, train_budget=1.0, agg_interval=2.0)
    with pytest.raises(ProtocolError):
        RunConfig(model=cfg_model, train_budget=1.0, agg_interval=0.5, mode="other")

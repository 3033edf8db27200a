"""Time-based aggregation protocol: server, trainers, evaluator, and a
synchronous-gradient baseline mode.

The server owns the round clock: every ``agg_interval`` it raises the
``agg`` flag, collects exactly one tagged weight set per live trainer,
averages them, broadcasts the new global weights, and queues a validation
evaluation. Trainers run local steps continuously and only synchronize
when they observe the flag between steps, so heterogeneous trainer speeds
never block each other outside the collection window. The ``stop`` flag is
monotone; a trainer finishes its current step and exits cleanly.

Everything runs against injected clock/channel primitives, so the same
protocol code executes on real threads, over TCP, or inside the
deterministic simulation used by the acceptance tests.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .evaluate import evaluate
from .graph import EdgeSplits, Graph
from .nn import AdamState, ModelConfig, ModelWeights, aggregate_average, init_weights
from .partition import Subgraph
from .runtime import ChannelClosed, SimRuntime, ThreadRuntime
from .sampling import sample_minibatch
from .transport import InProcTransports, TcpCoordinator, TcpTrainerEndpoint

LOSS_EMA_ALPHA = 0.1


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerSpec:
    """One trainer's identity, data, seed, and per-step cost.

    ``step_time`` is charged after every local step: virtual seconds under
    the sim clock, a real sleep under the wall clock (the heterogeneity
    knob either way). ``step_jitter`` adds a seeded uniform random extra of
    up to that fraction of ``step_time`` per step, from an rng stream
    independent of the sampling one.
    """

    trainer_id: int
    subgraph: Subgraph
    seed: int
    step_time: float = 0.01
    step_jitter: float = 0.0

    def делay_stream(self):
        raise NotImplementedError


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train_budget: float
    agg_interval: float
    mode: str = "tma"
    batch_size: int = 256
    fanouts: tuple = (10, 5)
    failed: frozenset = frozenset()
    readiness_timeout: float = 30.0
    server_poll: float = 0.01
    idle_poll: float = 0.05
    eval_queue_limit: int = 64

    def __post_init__(self):
        if self.mode not in ("tma", "ggs"):
            raise ProtocolError(f"unknown mode {self.mode!r}")
        if not 0 < self.agg_interval < self.train_budget:
            raise ProtocolError("need 0 < agg_interval < train_budget")
        if self.batch_size < 1:
            raise ProtocolError("batch_size must be positive")


def inject_failure(cfg: RunConfig, fail_ids) -> RunConfig:
    """Mark trainers as failing to start; the server proceeds with the rest."""
    return dataclasses.replace(cfg, failed=frozenset(int(i) for i in fail_ids))


@dataclass
class TrainerLog:
    trainer_id: int
    steps: int = 0
    loss_ema: float = math.nan
    degenerate: bool = False
    step_times: list = field(default_factory=list)
    send_rounds: list = field(default_factory=list)  # (round, wall time)
    stop_seen_at: float = math.nan


@dataclass
class MetricsRecord:
    wall_s: float
    round: int
    split: str
    mrr: float
    steps: dict
    loss: dict


@dataclass
class RunResult:
    best_weights: ModelWeights
    best_round: int
    best_val_mrr: float
    test_mrr: float
    rounds: int
    metrics: list[MetricsRecord]
    trainer_logs: dict[int, TrainerLog]
    weights_by_round: dict[int, ModelWeights]
    round_times: list[float]
    live_ids: list[int]


# ---------------------------------------------------------------------------
# server (time-based aggregation rounds)


def run_server(cfg: RunConfig, endpoint, initial: ModelWeights, clock, eval_jobs, eval_results):
    trainer_ids = list(endpoint.trainer_ids)
    t0 = clock.now()
    while True:
        ready = [i for i in trainer_ids if endpoint.kv_get(f"ready/{i}")]
        if len(ready) == len(trainer_ids):
            break
        if clock.now() - t0 >= cfg.readiness_timeout:
            break
        clock.sleep(cfg.server_poll)
    live = sorted(ready)
    if not live:
        raise ProtocolError("no trainer became ready before the readiness timeout")

    endpoint.kv_set("agg", False)
    endpoint.kv_set("stop", False)
    w_global = initial.copy()
    for i in live:
        endpoint.send_global(i, 0, w_global)

    t_start = t_agg = clock.now()
    t = 0
    weights_by_round = {0: w_global.copy()}
    rows: dict[int, MetricsRecord] = {}
    round_times: list[float] = []
    pending: set[tuple[str, int]] = set()
    results_by_round: dict[tuple[str, int], float] = {}

    def drain_results(block_for: set | None = None):
        while pending and (block_for is None or block_for & pending):
            try:
                split, round_t, mrr = eval_results.get(timeout=None if block_for else 0.0)
            except Exception:
                if block_for is None:
                    return
                raise
            pending.discard((split, round_t))
            if split == "val" and round_t in rows:
                rows[round_t].mrr = mrr
            results_by_round[(split, round_t)] = mrr

    while not endpoint.kv_get("stop"):
        if clock.now() - t_agg >= cfg.agg_interval:
            endpoint.kv_set("agg", True)
            collected = []
            for i in list(live):
                try:
                    tag, w_i = endpoint.recv_weights(i)
                except ChannelClosed:
                    live.remove(i)
                    continue
                if tag != t:
                    raise ProtocolError(
                        f"trainer {i} submitted weights for round {tag} during round {t}"
                    )
                collected.append(w_i)
            if not live:
                raise ProtocolError("all trainers dead; aborting the run")
            endpoint.kv_set("agg", False)
            w_global = aggregate_average(collected)
            t += 1
            weights_by_round[t] = w_global.copy()
            for i in live:
                endpoint.send_global(i, t, w_global)
            wall = round(clock.now() - t_start, 6)
            round_times.append(wall)
            steps = {i: endpoint.kv_get(f"steps/{i}", 0) for i in live}
            losses = {i: endpoint.kv_get(f"loss/{i}", math.nan) for i in live}
            rows[t] = MetricsRecord(
                wall_s=wall, round=t, split="val", mrr=math.nan, steps=steps, loss=losses
            )
            if len(pending) < cfg.eval_queue_limit:
                eval_jobs.put(("val", t, w_global.copy()))
                pending.add(("val", t))
            t_agg = clock.now()
        if clock.now() - t_start > cfg.train_budget:
            endpoint.kv_set("stop", True)
        drain_results()
        clock.sleep(cfg.server_poll)

    drain_results(block_for={p for p in pending if p[0] == "val"})
    if t == 0:
        # budget shorter than one interval: score the initial weights
        eval_jobs.put(("val", 0, w_global.copy()))
        pending.add(("val", 0))
        drain_results(block_for={("val", 0)})
        rows[0] = MetricsRecord(
            wall_s=round(clock.now() - t_start, 6),
            round=0,
            split="val",
            mrr=results_by_round[("val", 0)],
            steps={i: 0 for i in live},
            loss={i: math.nan for i in live},
        )
    scored = [(r.mrr, -r.round) for r in rows.values() if not math.isnan(r.mrr)]
    if not scored:
        raise ProtocolError("no validation evaluation completed")
    best_mrr, neg_round = max(scored)
    best_round = -neg_round
    best_weights = weights_by_round[best_round]

    eval_jobs.put(("test", best_round, best_weights.copy()))
    pending.add(("test", best_round))
    drain_results(block_for={("test", best_round)})
    test_mrr = results_by_round[("test", best_round)]

    metrics = [rows[k] for k in sorted(rows)]
    metrics.append(
        MetricsRecord(
            wall_s=round(clock.now() - t_start, 6),
            round=best_round,
            split="test",
            mrr=test_mrr,
            steps={i: endpoint.kv_get(f"steps/{i}", 0) for i in live},
            loss={i: endpoint.kv_get(f"loss/{i}", math.nan) for i in live},
        )
    )
    return RunResult(
        best_weights=best_weights,
        best_round=best_round,
        best_val_mrr=float(best_mrr),
        test_mrr=float(test_mrr),
        rounds=t,
        metrics=metrics,
        trainer_logs={},
        weights_by_round=weights_by_round,
        round_times=round_times,
        live_ids=live,
    )


# ---------------------------------------------------------------------------
# trainer (local steps, flag-driven synchronization)


def run_trainer(spec: TrainerSpec, cfg: RunConfig, endpoint, clock, log: TrainerLog):
    endpoint.kv_set(f"ready/{spec.trainer_id}", False)
    sub = spec.subgraph
    rng = np.random.default_rng(spec.seed)
    degenerate = sub.num_edges == 0 or sub.num_nodes < 2
    log.degenerate = degenerate
    features = sub.features
    endpoint.kv_set(f"ready/{spec.trainer_id}", True)

    try:
        tag, w = endpoint.recv_global()
    except ChannelClosed:
        return
    if tag != 0:
        raise ProtocolError(f"trainer {spec.trainer_id} expected round 0, got {tag}")
    opt = AdamState()
    t = 0
    try:
        while not endpoint.kv_get("stop"):
            if degenerate:
                clock.sleep(cfg.idle_poll)
            else:
                batch = sample_minibatch(
                    sub.local_graph, sub.train_edges, cfg.batch_size, cfg.fanouts, rng
                )
                u, v, labels = batch.pair_indices()
                loss = nn.link_step(
                    cfg.model, w, opt, batch.mfg.blocks,
                    features[batch.mfg.input_nodes], u, v, labels,
                )
                log.steps += 1
                log.step_times.append(clock.now())
                log.loss_ema = (
                    loss
                    if math.isnan(log.loss_ema)
                    else (1 - LOSS_EMA_ALPHA) * log.loss_ema + LOSS_EMA_ALPHA * loss
                )
                clock.sleep(spec.step_time)
            if endpoint.kv_get("agg"):
                endpoint.kv_set(f"steps/{spec.trainer_id}", log.steps)
                endpoint.kv_set(f"loss/{spec.trainer_id}", float(log.loss_ema))
                endpoint.send_weights(t, w)
                log.send_rounds.append((t, clock.now()))
                tag, w = endpoint.recv_global()
                if tag != t + 1:
                    raise ProtocolError(
                        f"trainer {spec.trainer_id} expected round {t + 1}, got {tag}"
                    )
                t = tag
        log.stop_seen_at = clock.now()
    finally:
        endpoint.close()


# ---------------------------------------------------------------------------
# evaluator worker


def run_evaluator(eval_jobs, eval_results, eval_fn):
    while True:
        try:
            split, round_t, weights = eval_jobs.get()
        except ChannelClosed:
            return
        eval_results.put((split, round_t, eval_fn(weights, split, round_t)))


# ---------------------------------------------------------------------------
# synchronous-gradient baseline: full graph access, per-step gradient averaging


def run_ggs(
    cfg: RunConfig,
    specs: list[TrainerSpec],
    train_graph: Graph,
    features: np.ndarray,
    initial: ModelWeights,
    clock,
    eval_jobs,
    eval_results,
):
    """All trainers see the whole training graph; every step averages their
    gradient shards and applies one shared optimizer update, so the slowest
    trainer paces the system."""
    w = initial.copy()
    opt = AdamState()
    edges = train_graph.edge_array()
    rngs = {s.trainer_id: np.random.default_rng(s.seed) for s in specs}
    logs = {s.trainer_id: TrainerLog(trainer_id=s.trainer_id) for s in specs}
    step_cost = max(s.step_time for s in specs)

    t_start = t_agg = clock.now()
    t = 0
    rows: dict[int, MetricsRecord] = {}
    round_times: list[float] = []
    pending: set[tuple[str, int]] = set()
    results: dict[tuple[str, int], float] = {}
    weights_by_round = {0: w.copy()}

    def drain(block_for=None):
        while pending and (block_for is None or block_for & pending):
            try:
                split, round_t, mrr = eval_results.get(timeout=None if block_for else 0.0)
            except ChannelClosed:
                raise
            except Exception:
                if block_for is None:
                    return
                raise
            pending.discard((split, round_t))
            results[(split, round_t)] = mrr
            if split == "val" and round_t in rows:
                rows[round_t].mrr = mrr

    while clock.now() - t_start <= cfg.train_budget:
        shard_grads = []
        shard_losses = []
        for spec in specs:
            batch = sample_minibatch(
                train_graph, edges, cfg.batch_size, cfg.fanouts, rngs[spec.trainer_id]
            )
            u, v, labels = batch.pair_indices()
            loss, grads = nn.link_loss_and_grads(
                cfg.model, w, batch.mfg.blocks, features[batch.mfg.input_nodes], u, v, labels
            )
            shard_grads.append(grads)
            shard_losses.append(loss)
        avg = {
            name: sum(g[name] for g in shard_grads) / len(shard_grads)
            for name in shard_grads[0]
        }
        nn.adam_step(opt, w, avg, cfg.model.lr)
        for spec, loss in zip(specs, shard_losses):
            log = logs[spec.trainer_id]
            log.steps += 1
            log.loss_ema = (
                loss
                if math.isnan(log.loss_ema)
                else (1 - LOSS_EMA_ALPHA) * log.loss_ema + LOSS_EMA_ALPHA * loss
            )
        clock.sleep(step_cost)
        if clock.now() - t_agg >= cfg.agg_interval:
            t += 1
            weights_by_round[t] = w.copy()
            wall = round(clock.now() - t_start, 6)
            round_times.append(wall)
            rows[t] = MetricsRecord(
                wall_s=wall,
                round=t,
                split="val",
                mrr=math.nan,
                steps={s.trainer_id: logs[s.trainer_id].steps for s in specs},
                loss={s.trainer_id: logs[s.trainer_id].loss_ema for s in specs},
            )
            if len(pending) < cfg.eval_queue_limit:
                eval_jobs.put(("val", t, w.copy()))
                pending.add(("val", t))
            t_agg = clock.now()
        drain()

    drain(block_for={p for p in pending if p[0] == "val"})
    if t == 0:
        eval_jobs.put(("val", 0, w.copy()))
        pending.add(("val", 0))
        drain(block_for={("val", 0)})
        rows[0] = MetricsRecord(
            wall_s=round(clock.now() - t_start, 6), round=0, split="val",
            mrr=results[("val", 0)], steps={s.trainer_id: 0 for s in specs},
            loss={s.trainer_id: math.nan for s in specs},
        )
    scored = [(r.mrr, -r.round) for r in rows.values() if not math.isnan(r.mrr)]
    best_mrr, neg_round = max(scored)
    best_round = -neg_round
    best_weights = weights_by_round[best_round]
    eval_jobs.put(("test", best_round, best_weights.copy()))
    pending.add(("test", best_round))
    drain(block_for={("test", best_round)})
    test_mrr = results[("test", best_round)]

    metrics = [rows[k] for k in sorted(rows)]
    metrics.append(
        MetricsRecord(
            wall_s=round(clock.now() - t_start, 6), round=best_round, split="test", mrr=test_mrr,
            steps={s.trainer_id: logs[s.trainer_id].steps for s in specs},
            loss={s.trainer_id: logs[s.trainer_id].loss_ema for s in specs},
        )
    )
    return RunResult(
        best_weights=best_weights,
        best_round=best_round,
        best_val_mrr=float(best_mrr),
        test_mrr=float(test_mrr),
        rounds=t,
        metrics=metrics,
        trainer_logs=logs,
        weights_by_round=weights_by_round,
        round_times=round_times,
        live_ids=[s.trainer_id for s in specs],
    )


# ---------------------------------------------------------------------------
# harness: wire runtime + transport + actors and run to completion


def run_training(
    cfg: RunConfig,
    specs: list[TrainerSpec],
    train_graph: Graph,
    features: np.ndarray,
    splits: EdgeSplits,
    runtime: str = "sim",
    transport: str = "inproc",
    tcp_host: str = "127.0.0.1",
) -> RunResult:
    """Run one full training (tma or ggs mode) and return the server result."""
    if not specs:
        raise ProtocolError("need at least one trainer spec")
    ids = [s.trainer_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate trainer ids")
    unknown = cfg.failed - set(ids)
    if unknown:
        raise ProtocolError(f"failure set names unknown trainers {sorted(unknown)}")
    if cfg.failed and len(cfg.failed) >= len(specs):
        raise ProtocolError("cannot fail every trainer")

    rt = SimRuntime() if runtime == "sim" else ThreadRuntime()
    if runtime == "sim" and transport == "tcp":
        raise ProtocolError("tcp transport requires the thread runtime")

    initial = init_weights(cfg.model)
    eval_jobs = rt.channel()
    eval_results = rt.channel()

    def eval_fn(weights, split, round_t):
        return evaluate(
            weights, cfg.model, train_graph, features, splits, split, round_t
        ).mrr

    result_box: dict[str, RunResult] = {}
    logs = {s.trainer_id: TrainerLog(trainer_id=s.trainer_id) for s in specs}

    if cfg.mode == "ggs":
        live_specs = [s for s in specs if s.trainer_id not in cfg.failed]

        def ggs_actor():
            try:
                result_box["result"] = run_ggs(
                    cfg, live_specs, train_graph, features, initial,
                    rt.clock, eval_jobs, eval_results,
                )
            finally:
                eval_jobs.close()

        rt.spawn("ggs", ggs_actor)
        rt.spawn("evaluator", run_evaluator, eval_jobs, eval_results, eval_fn)
        rt.run_all()
        result = result_box["result"]
        return result

    if transport == "inproc":
        hub = InProcTransports(rt, ids)
        server_ep = hub.server_endpoint()
        trainer_ep = hub.trainer_endpoint
    else:
        coordinator = TcpCoordinator(ids, cfg.model.fingerprint(), host=tcp_host)
        server_ep = coordinator

        def trainer_ep(trainer_id):
            return TcpTrainerEndpoint(
                coordinator.address, trainer_id, cfg.model.fingerprint()
            )

    def server_actor():
        try:
            result_box["result"] = run_server(
                cfg, server_ep, initial, rt.clock, eval_jobs, eval_results
            )
        finally:
            eval_jobs.close()
            if transport == "tcp":
                coordinator.close()
            else:
                server_ep.close()

    def trainer_actor(spec):
        endpoint = trainer_ep(spec.trainer_id)
        run_trainer(spec, cfg, endpoint, rt.clock, logs[spec.trainer_id])

    rt.spawn("server", server_actor)
    for spec in specs:
        if spec.trainer_id not in cfg.failed:
            rt.spawn(f"trainer-{spec.trainer_id}", trainer_actor, spec)
    rt.spawn("evaluator", run_evaluator, eval_jobs, eval_results, eval_fn)
    rt.run_all()

    result = result_box.get("result")
    if result is None:
        raise ProtocolError("server did not produce a result")
    result.trainer_logs = logs
    return result

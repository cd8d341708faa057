"""Experiment orchestration: single runs in every mode, ablations with a seed
noise band, all-reduce benchmarks and checkpoint/resume."""

from __future__ import annotations

import json
import os
import statistics
import threading
import time
from dataclasses import dataclass

import numpy as np

from .. import engine, netsim, optim, tasks
from ..collective.ring import reference_ring, round_bytes_per_peer
from ..errors import CollectiveError, ConfigError, NumericError
from ..netsim import SEC, UtilizationLedger, WorkerTime, utilization
from ..tensor import PseudoGradient, make_layout
from .config import RunConfig, load_config
from .metrics import MetricsWriter, read_metrics


def analytic_round_bytes(cfg: RunConfig, n: int, k: int) -> int:
    """REDUCE_CHUNK bytes moved by all peers in one fault-free outer round."""
    return sum(round_bytes_per_peer(n, k, cfg.reduce_precision, cfg.chunk_size_bytes))


def _ledger_seconds(ledger: UtilizationLedger) -> dict:
    s = ledger.seconds()
    return {f"{k}_s": v for k, v in s.items()}


def _summary(cfg: RunConfig, params, n_params: int, rounds: int, reduce_bytes: int,
             control_bytes: int, ledger: UtilizationLedger | None, extra: dict) -> dict:
    loss = tasks.evaluate(cfg.task(), params) if params is not None else float("nan")
    rec = {"kind": "summary", "mode": cfg.mode, "num_workers": cfg.num_workers,
           "local_steps": cfg.local_steps, "total_inner_steps": cfg.total_inner_steps,
           "reduce_precision": cfg.reduce_precision, "seed": cfg.seed, "params": n_params,
           "final_loss": loss if np.isfinite(loss) else None,
           "final_perplexity": tasks.perplexity(loss) if np.isfinite(loss) else None,
           "outer_rounds": rounds, "reduce_bytes_total": reduce_bytes,
           "control_bytes_total": control_bytes,
           "reduce_bytes_per_round_analytic": analytic_round_bytes(cfg, n_params, cfg.num_workers)}
    if ledger is not None and ledger.workers:
        rec["utilization"] = utilization(ledger)
        rec.update(_ledger_seconds(ledger))
    rec.update(extra)
    return rec


# -- modes -----------------------------------------------------------------------

def _baseline_single(cfg: RunConfig, emit, checkpoint_dir=None, resume=None) -> dict:
    """Plain AdamW on one worker, written without the engine so it can serve as
    an independent reference."""
    task = cfg.task()
    dcfg = cfg.diloco()
    sh = tasks.shard(task, 0, 1)
    schedule = dcfg.schedule()
    if resume is not None:
        params, state, start = resume
    else:
        params = tasks.init_params(task)
        state = optim.AdamWState.init(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                                      weight_decay=cfg.weight_decay, base_lr=cfg.inner_lr)
        start = 0
    for step in range(start, cfg.total_inner_steps):
        batch = tasks.make_batch(task, sh, step * cfg.batch_size, cfg.batch_size)
        loss, grad = tasks.loss_and_grad(task, params, batch)
        lr = optim.lr_at(schedule, step)
        params, state = optim.adamw_step(state, params, grad, lr)
        emit({"kind": "inner", "inner_step": step + 1, "outer_epoch": 0, "loss": float(loss),
              "perplexity": tasks.perplexity(float(loss)), "lr": lr,
              "compute_ms": cfg.step_seconds * 1e3, "comm_ms": 0.0, "bytes_sent": 0,
              "contributors": None, "skipped": False, "worker": 0})
        if checkpoint_dir and (step + 1) % cfg.local_steps == 0 and step + 1 < cfg.total_inner_steps:
            _save_single(checkpoint_dir, cfg, params, state, step + 1)
    ledger = UtilizationLedger.single(cfg.step_seconds * cfg.total_inner_steps, 0.0)
    return _summary(cfg, params, len(params), 0, 0, 0, ledger, {})


def _baseline_dp(cfg: RunConfig, emit) -> dict:
    """Synchronous data parallelism: gradients averaged over K shards every step."""
    task = cfg.task()
    dcfg = cfg.diloco()
    k = cfg.num_workers
    shards = [tasks.shard(task, i, k) for i in range(k)]
    params = tasks.init_params(task)
    state = optim.AdamWState.init(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                                  weight_decay=cfg.weight_decay, base_lr=cfg.inner_lr)
    per_step = analytic_round_bytes(cfg, len(params), k)
    total = 0
    for step in range(cfg.total_inner_steps):
        losses, grads = [], []
        for sh in shards:
            batch = tasks.make_batch(task, sh, step * cfg.batch_size, cfg.batch_size)
            loss, g = tasks.loss_and_grad(task, params, batch)
            losses.append(float(loss))
            grads.append(g.data)
        avg = reference_ring(grads, cfg.reduce_precision) if k > 1 else grads[0]
        lr = optim.lr_at(dcfg.schedule(), step)
        params, state = optim.adamw_step(state, params, params.with_data(avg), lr)
        loss = float(np.mean(losses))
        total += per_step
        emit({"kind": "inner", "inner_step": step + 1, "outer_epoch": step + 1, "loss": loss,
              "perplexity": tasks.perplexity(loss), "lr": lr, "compute_ms": cfg.step_seconds * 1e3,
              "comm_ms": 0.0, "bytes_sent": 0, "contributors": None, "skipped": False, "worker": 0})
        emit({"kind": "outer", "inner_step": step + 1, "outer_epoch": step + 1, "bytes_sent": per_step,
              "reduce_bytes": per_step, "contributors": k, "comm_ms": 0.0, "wait_ms": 0.0,
              "applied": True, "attempt": 0, "worker": 0})
    return _summary(cfg, params, len(params), cfg.total_inner_steps, total, 0, None, {})


def _simulate(cfg: RunConfig, emit, checkpoint_dir=None, resume=None, faults=()) -> dict:
    # a positive payload_elements selects the communication-only dry run
    task = None if cfg.payload_elements else cfg.task()
    dcfg = cfg.diloco()
    k = cfg.num_workers
    ledger = UtilizationLedger()
    initial = starts = None
    totals = {"reduce": 0, "control": 0, "epochs": []}
    if resume is not None:
        initial, starts, ledger, totals = resume

    def sink(rec):
        if rec["kind"] == "outer":
            totals["reduce"] += rec["reduce_bytes"]
            totals["control"] += rec["bytes_sent"] - rec["reduce_bytes"]
            if rec["outer_epoch"] not in totals["epochs"]:
                totals["epochs"].append(rec["outer_epoch"])
        emit(rec)

    pending: dict = {}

    def on_round_end(i, state, now_ns):
        if not checkpoint_dir or state.inner_step >= dcfg.total_inner_steps:
            return
        pending.setdefault(state.outer_epoch, {})[i] = (state, now_ns)
        if len(pending[state.outer_epoch]) == k:
            _save_sim(checkpoint_dir, cfg, state.outer_epoch, pending.pop(state.outer_epoch),
                      ledger, totals)

    res = netsim.run_simulated(dcfg, task, cfg.links(), cfg.step_time(), settings=cfg.settings(),
                               payload_elements=cfg.payload_elements or None,
                               faults=faults, seed=cfg.seed, emit=sink,
                               detect_after=cfg.detect_after_s, evaluate=cfg.evaluate,
                               initial_states=initial, start_times=starts,
                               on_round_end=on_round_end, ledger=ledger)
    for err in res.errors.values():
        if isinstance(err, NumericError):
            raise err
    survivors = [i for i in range(k) if i not in res.errors]
    if not survivors:
        raise CollectiveError(f"no worker finished the run; {len(totals['epochs'])} outer rounds "
                              f"completed: {next(iter(res.errors.values()))}")
    extra = {"workers_finished": len(survivors), "failed_workers": sorted(res.errors),
             "wall_s": res.wall_seconds}
    if task is None:
        reports = [r for rs in res.reports.values() for r in rs]
        rounds = len({r.outer_epoch for r in reports})
        return _summary(cfg, None, cfg.payload_elements, rounds, sum(r.reduce_bytes_sent for r in reports),
                        sum(r.control_bytes_sent for r in reports), ledger, extra)
    first = res.states[survivors[0]]
    return _summary(cfg, first.theta_t, len(first.theta_t), len(totals["epochs"]), totals["reduce"],
                    totals["control"], ledger, extra)


def _worker(cfg: RunConfig, emit, checkpoint_dir=None) -> dict:
    """One real peer over TCP."""
    from ..collective.tcp import TcpCollective

    host, _, port = cfg.listen.rpartition(":")
    coll = TcpCollective(cfg.run_id, host or "127.0.0.1", int(port or 0), cfg.settings())
    try:
        coll.join(cfg.rendezvous or None, cfg.join_timeout_s)
        coll.wait_for_peers(cfg.num_workers, cfg.join_timeout_s)
        task = cfg.task()
        dcfg = cfg.diloco()
        live = coll.membership.ids("live")
        index = sorted(live).index(coll.peer_id)
        sh = tasks.shard(task, index, cfg.num_workers)
        state = engine.init_engine(dcfg, tasks.init_params(task))

        def round_end(st):
            if checkpoint_dir:
                os.makedirs(checkpoint_dir, exist_ok=True)
                engine.save_checkpoint(os.path.join(checkpoint_dir, f"worker{index}.ckpt"), st,
                                       cfg.digest())

        ctx = engine.LoopContext(dcfg, task, sh, emit=emit, on_round_end=round_end,
                                 evaluate=cfg.evaluate, extra={"worker": index})
        try:
            final = engine.drive(engine.training_loop(state, ctx), coll.all_reduce_avg)
        except CollectiveError as exc:
            raise type(exc)(f"{exc}; {len(coll.reports)} outer rounds completed") from None
        reduce_bytes = sum(r.reduce_bytes_sent for r in coll.reports)
        control = sum(r.control_bytes_sent for r in coll.reports)
        coll.leave()
        return _summary(cfg, final.theta_t, len(final.theta_t), len(coll.reports), reduce_bytes,
                        control, None, {"worker": index})
    finally:
        coll.close()


def run_experiment(cfg: RunConfig, output: str | None = None, checkpoint_dir: str | None = None,
                   faults=(), append: bool = False, resume=None) -> dict:
    """Run ``cfg`` and write its JSON-lines metrics; returns the summary record."""
    path = cfg.output if output is None else output
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with MetricsWriter(path, append=append) as out:
        if cfg.mode == "baseline_single":
            summary = _baseline_single(cfg, out, checkpoint_dir, resume)
        elif cfg.mode == "baseline_dp":
            summary = _baseline_dp(cfg, out)
        elif cfg.mode == "simulate":
            summary = _simulate(cfg, out, checkpoint_dir, resume, faults)
        else:
            summary = _worker(cfg, out, checkpoint_dir)
        out(summary)
    return summary


# -- checkpoints -------------------------------------------------------------------

def _save_single(directory, cfg, params, state, step):
    d = os.path.join(directory, f"step_{step:07d}")
    os.makedirs(d, exist_ok=True)
    dcfg = cfg.diloco()
    est = engine.EngineState(params, params, state, optim.NesterovState.init(params), optim.LossScaler(
        enabled=False), step, step // dcfg.local_steps)
    engine.save_checkpoint(os.path.join(d, "worker0.ckpt"), est, cfg.digest())
    _write_meta(d, cfg, {"kind": "baseline_single", "step": step})


def _save_sim(directory, cfg, epoch, entries, ledger, totals):
    d = os.path.join(directory, f"round_{epoch:05d}")
    os.makedirs(d, exist_ok=True)
    for i, (state, _) in entries.items():
        engine.save_checkpoint(os.path.join(d, f"worker{i}.ckpt"), state, cfg.digest())
    meta = {"kind": "simulate", "outer_epoch": epoch,
            "start_ns": {str(i): ns for i, (_, ns) in entries.items()},
            "ledger": {name: [w.compute_ns, w.comm_ns, w.idle_ns] for name, w in ledger.workers.items()},
            "totals": totals}
    _write_meta(d, cfg, meta)


def _write_meta(d, cfg, meta):
    with open(os.path.join(d, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    with open(os.path.join(d, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)


def latest_checkpoint(directory: str) -> str:
    found = sorted(d for d in os.listdir(directory) if d.startswith(("round_", "step_")))
    if not found:
        raise ConfigError(f"no checkpoint under {directory}")
    return os.path.join(directory, found[-1])


def resume_experiment(checkpoint: str, output: str | None = None, checkpoint_dir: str | None = None,
                      append: bool = True) -> dict:
    """Continue a run from a checkpoint directory (one ``round_*``/``step_*``
    folder, or their parent to take the latest)."""
    if not os.path.exists(os.path.join(checkpoint, "meta.json")):
        checkpoint = latest_checkpoint(checkpoint)
    cfg = load_config(os.path.join(checkpoint, "config.txt"))
    with open(os.path.join(checkpoint, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    states = {}
    for name in sorted(os.listdir(checkpoint)):
        if name.endswith(".ckpt"):
            st, digest = engine.load_checkpoint(os.path.join(checkpoint, name))
            if digest != cfg.digest():
                raise ConfigError(f"{name}: checkpoint does not belong to this config")
            states[int(name[len("worker"):-len(".ckpt")])] = st
    if meta["kind"] == "baseline_single":
        st = states[0]
        resume = (st.theta_local, st.inner, meta["step"])
    elif meta["kind"] == "simulate":
        if sorted(states) != list(range(cfg.num_workers)):
            raise ConfigError("simulate checkpoint is missing worker states")
        ledger = UtilizationLedger({name: WorkerTime(*v) for name, v in meta["ledger"].items()})
        starts = {int(i): ns for i, ns in meta["start_ns"].items()}
        resume = (states, starts, ledger, meta["totals"])
    else:
        raise ConfigError(f"cannot resume a {meta['kind']} checkpoint")
    return run_experiment(cfg, output=output, checkpoint_dir=checkpoint_dir, append=append,
                          resume=resume)


# -- ablations ---------------------------------------------------------------------

AXES = {"workers": "num_workers", "local_steps": "local_steps", "precision": "reduce_precision"}


@dataclass
class AblationResult:
    axis: str
    values: list
    seeds: list
    final_losses: dict          # value -> [loss per seed]
    curves: list                # rows (value, seed, local_step, global_step, local_tokens, global_tokens, loss)
    summaries: list

    def mean(self, value) -> float:
        return statistics.fmean(self.final_losses[value])

    def noise_band(self) -> float:
        """Twice the pooled seed standard deviation across all settings."""
        variances = [statistics.variance(v) for v in self.final_losses.values() if len(v) > 1]
        return 2.0 * (statistics.fmean(variances) ** 0.5) if variances else 0.0

    def table(self) -> list[dict]:
        band = self.noise_band()
        return [{"axis": self.axis, "value": v, "mean_loss": self.mean(v),
                 "std_loss": statistics.stdev(self.final_losses[v]) if len(self.seeds) > 1 else 0.0,
                 "noise_band": band} for v in self.values]


def _coerce_axis_value(axis: str, raw):
    if axis == "precision":
        return str(raw)
    return int(raw)


def ablation_suite(base: RunConfig, axis: str, values, seeds=(0, 1, 2), output_dir: str | None = None,
                   progress=None) -> AblationResult:
    """Sweep one axis over ``values`` for each seed, keeping the total number of
    inner steps per worker fixed. Loss curves are keyed both by local steps
    and by global steps (workers times local steps)."""
    if axis not in AXES:
        raise ConfigError(f"ablation axis must be one of {sorted(AXES)}, got {axis!r}")
    key = AXES[axis]
    values = [_coerce_axis_value(axis, v) for v in values]
    finals: dict = {v: [] for v in values}
    curves, summaries = [], []
    for v in values:
        for seed in seeds:
            cfg = base.with_overrides(**{key: v, "seed": seed, "evaluate": True})
            out = None
            if output_dir:
                os.makedirs(output_dir, exist_ok=True)
                out = os.path.join(output_dir, f"{axis}-{v}-seed{seed}.jsonl")
            rows = []

            def tap(rec, rows=rows):
                if rec.get("kind") == "outer" and rec.get("worker", 0) == 0 and rec.get("loss") is not None:
                    rows.append((rec["inner_step"], rec["loss"]))

            summary = _run_tapped(cfg, out, tap)
            finals[v].append(summary["final_loss"])
            summaries.append(summary)
            tokens = cfg.batch_size * cfg.task_context_len
            for step, loss in rows:
                curves.append((v, seed, step, step * cfg.num_workers, step * tokens,
                               step * tokens * cfg.num_workers, loss))
            if progress is not None:
                progress(axis, v, seed, summary)
    result = AblationResult(axis, values, list(seeds), finals, curves, summaries)
    if output_dir:
        with open(os.path.join(output_dir, f"{axis}-curves.csv"), "w", encoding="utf-8") as fh:
            fh.write("value,seed,local_step,global_step,local_tokens,global_tokens,loss\n")
            for row in curves:
                fh.write(",".join(str(x) for x in row) + "\n")
        with open(os.path.join(output_dir, f"{axis}-table.jsonl"), "w", encoding="utf-8") as fh:
            for row in result.table():
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return result


def _run_tapped(cfg: RunConfig, output, tap) -> dict:
    path = output or ""
    with MetricsWriter(path) as out:
        def emit(rec):
            tap(rec)
            out(rec)
        if cfg.mode == "baseline_single":
            summary = _baseline_single(cfg, emit)
        elif cfg.mode == "baseline_dp":
            summary = _baseline_dp(cfg, emit)
        elif cfg.mode == "simulate":
            summary = _simulate(cfg, emit)
        else:
            raise ConfigError("ablations run in simulate or baseline modes")
        out(summary)
    return summary


# -- all-reduce benchmark ----------------------------------------------------------------

def bench_allreduce(k: int, elements: int, precision: str = "fp32", transport: str = "sim",
                    bandwidth_mbits: float = 1000.0, chunk_size: int = 1 << 20, seed: int = 0,
                    timeout: float = 60.0) -> dict:
    """All-reduce ``elements`` random values across ``k`` peers once and report
    per-peer REDUCE_CHUNK bytes against the ring bound ``2(K-1)/K * payload``."""
    from ..collective.protocol import ProtocolSettings
    from ..netsim import LinkMatrix, ring_time_bound, simulate_allreduce

    if k < 1 or elements < 1:
        raise ConfigError("bench needs k >= 1 and elements >= 1")
    rng = tasks.keyed_rng(seed, "noise", 77)
    contributions = [rng.standard_normal(elements) for _ in range(k)]
    width = 2 if precision == "fp16" else 4
    payload = elements * width
    settings = ProtocolSettings(chunk_size=chunk_size, barrier_timeout=timeout, ring_timeout=timeout)
    bound = None
    if transport == "sim":
        links = LinkMatrix.uniform(k, bandwidth_mbits)
        results, reports, seconds = simulate_allreduce(contributions, links, precision, settings, seed)
        order = list(range(k))
        bound = ring_time_bound(payload, links)
        reduce_seconds = max(r.finished - r.decided for r in reports)
    elif transport == "tcp":
        results, reports, seconds, order = _tcp_allreduce(contributions, precision, settings, timeout)
        reduce_seconds = seconds
    else:
        raise ConfigError(f"transport must be sim or tcp, got {transport!r}")
    ring = [contributions[i] for i in order]
    reference = reference_ring(ring, precision) if k > 1 else contributions[0]
    exact = all(np.array_equal(r, reference) for r in results)
    per_peer = [r.reduce_bytes_sent for r in reports]
    analytic = 2 * (k - 1) / k * payload
    return {"kind": "bench", "transport": transport, "workers": k, "elements": elements,
            "precision": precision, "payload_bytes": payload, "chunk_size": chunk_size,
            "reduce_bytes_per_peer": per_peer, "analytic_bytes_per_peer": analytic,
            "max_bytes_ratio": max(p / analytic for p in per_peer) if analytic else None,
            "reduce_seconds": reduce_seconds, "bound_seconds": bound,
            "matches_reference": exact}


def _tcp_allreduce(contributions, precision, settings, timeout):
    from ..collective.tcp import TcpCollective

    k = len(contributions)
    layout = make_layout([("payload", len(contributions[0]))])
    peers = [TcpCollective("bench", settings=settings) for _ in range(k)]
    try:
        peers[0].join(None)
        for p in peers[1:]:
            p.join(peers[0].address, timeout)
        for p in peers:
            p.wait_for_peers(k, timeout)
        out: dict = {}
        errors: dict = {}

        def work(i):
            try:
                pg = PseudoGradient(np.asarray(contributions[i], np.float64), layout, precision, 0)
                out[i] = peers[i].all_reduce_avg(pg)
            except Exception as exc:  # surfaced below
                errors[i] = exc

        threads = [threading.Thread(target=work, args=(i,)) for i in range(k)]
        t0 = time.perf_counter()
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout)
        seconds = time.perf_counter() - t0
        if errors or len(out) < k:
            raise CollectiveError(f"tcp all-reduce failed: {errors or 'timeout'}")
        order = sorted(range(k), key=lambda i: peers[i].peer_id)
        return [out[i][0].data for i in range(k)], [out[i][1] for i in range(k)], seconds, order
    finally:
        for p in peers:
            p.close()


# -- utilization ----------------------------------------------------------------------

def utilization_config(round_comm_s: float = 300.0, window_s: float = 4050.0, local_steps: int = 500,
                       rounds: int = 4, payload_elements: int = 16384,
                       multipliers=(1.0, 1.005, 1.01, 1.02), precision: str = "fp32",
                       **overrides) -> RunConfig:
    """Four simulated workers on the sample bandwidth matrix, with links scaled
    so the analytic ring time of one round is ``round_comm_s``."""
    from ..netsim import LinkMatrix, ring_time_bound

    width = 2 if precision == "fp16" else 4
    links = LinkMatrix.sample()
    bound = ring_time_bound(payload_elements * width, links)
    cfg = RunConfig(mode="simulate", num_workers=links.size, link_matrix="sample",
                    bandwidth_scale=bound / round_comm_s, payload_elements=payload_elements,
                    reduce_precision=precision, local_steps=local_steps,
                    total_inner_steps=local_steps * rounds, step_seconds=window_s / local_steps,
                    step_multipliers=tuple(multipliers), evaluate=False, output="",
                    barrier_timeout_s=10 * window_s, ring_timeout_s=10 * round_comm_s)
    return cfg.with_overrides(**overrides) if overrides else cfg

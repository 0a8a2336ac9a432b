"""Master-worker particle filter runtime.

One coordinating thread drives W worker threads through the filtering
pass over an observation series:

1.  broadcast the parameter vector
2.  workers initialize their share of the ensemble, each particle on its
    own deterministically derived stream
3.  broadcast the next observation event
4.  workers advance their particles to the event time
5.  workers evaluate observation likelihoods, gathered by the master in
    lineage order
6.  after the last event the master sends exit and forms the estimate
7.  the master resamples the ensemble (virtually: counts only)
8.  the master computes the routing that rebalances the resampled
    ensemble across workers
9.  routing slices are scattered to the workers
10. workers prune, start asynchronous state transfers, replicate local
    survivors while transfers are in flight, replicate received states,
    drop sent-away particles, reseed everything, and wait for step 3

Every random stream involved is derived from (chain, sample, observation,
lineage, purpose) alone, so the estimate is invariant to the number of
workers: weights are gathered by lineage id and replica identities are
assigned by the deterministic routing, never by arrival order.
"""

from __future__ import annotations

import math
import threading
import queue
from dataclasses import dataclass, field
from time import monotonic, perf_counter
from typing import Callable, Mapping

import numpy as np

from .core import (
    MODEL_STREAM,
    RESAMPLE_STREAM,
    ObservationSeries,
    Parameters,
    ProtocolError,
    SeedKey,
    ValidationError,
    derive_seed,
)
from .filtering import (
    LikelihoodEstimate,
    estimate_marginal_from_log,
    normalize_weights,
    redraw_rate,
    resample_multinomial,
)
from .instrumentation import MASTER_RANK, StageTiming
from .models.base import Model
from .routing import ParticleLocation, Routing, compute_routing, traffic_metrics
from .transport import (
    Advance,
    Broadcast,
    Channel,
    ErrorReport,
    ExitCommand,
    ExitReport,
    InitReport,
    ParticleTransfer,
    RouteCommand,
    WorkerReport,
)

__all__ = ["DEFAULT_TIMEOUT", "FilterDiagnostics", "FilterResult", "run_particle_filter", "worker_lineages"]

DEFAULT_TIMEOUT = 120.0


def worker_lineages(rank: int, ensemble_size: int, workers: int) -> range:
    """Contiguous, nearly equal lineage partition assigned to a worker."""
    return range(ensemble_size * rank // workers, ensemble_size * (rank + 1) // workers)


@dataclass(frozen=True)
class FilterDiagnostics:
    """Everything measured during one filtering pass.

    Observation indices here are the 1-based event numbers used on the
    wire and in stage timings (0 marks initialization); the estimate
    object flags 0-based rows of the weight matrix instead.
    """

    workers: int
    wall_time: float
    resample_counts: tuple          # one counts tuple per resampling event
    redraw_rates: tuple
    move_fractions: tuple
    copy_fractions: tuple
    timings: tuple                  # StageTiming records, master rank -1
    marks: tuple                    # (worker, name, observation_index, timestamp)
    degenerate_observations: tuple


@dataclass(frozen=True)
class FilterResult:
    estimate: LikelihoodEstimate
    diagnostics: FilterDiagnostics


class _WorkerRuntime:
    """State machine run by one worker thread."""

    def __init__(
        self,
        rank: int,
        model_factory: Callable[[], Model],
        chain_index: int,
        commands: Channel,
        reports: Channel,
        inbox: Channel,
        peers: Mapping[int, Channel],
        timeout: float,
    ):
        self.rank = rank
        self.model_factory = model_factory
        self.chain_index = chain_index
        self.commands = commands
        self.reports = reports
        self.inbox = inbox
        self.peers = peers
        self.timeout = timeout
        self.particles: dict[int, Model] = {}
        self.sample_index = 0
        self.pending: list[StageTiming] = []
        self.marks: list[tuple] = []
        self._init_done_at: float | None = None
        # retired instances recycled for replicas; loading into a live model
        # skips generator construction, the dominant replication cost
        self._pool: list[Model] = []

    # -- command loop ---------------------------------------------------

    def run(self) -> None:
        step = "2/command-loop"
        try:
            while True:
                try:
                    command = self.commands.recv(self.timeout)
                except queue.Empty:
                    raise ProtocolError("timed out waiting for a command", rank=self.rank, step=step)
                if self._init_done_at is not None:
                    self.pending.append(StageTiming(
                        "init-sync", self.rank, self.sample_index, 0, perf_counter() - self._init_done_at))
                    self._init_done_at = None
                if isinstance(command, Broadcast):
                    step = "2/init"
                    self._initialize(command)
                elif isinstance(command, Advance):
                    step = f"4/advance[{command.observation_index}]"
                    self._advance(command)
                elif isinstance(command, RouteCommand):
                    step = f"10/routing[{command.observation_index}]"
                    self._apply_routing(command)
                elif isinstance(command, ExitCommand):
                    self._exit()
                    return
                else:
                    raise ProtocolError(f"unexpected command {type(command).__name__}",
                                        rank=self.rank, step=step)
        except ProtocolError as exc:
            self.reports.send(ErrorReport(self.rank, exc.step or step, str(exc)))
        except Exception as exc:
            self.reports.send(ErrorReport(self.rank, step, f"{type(exc).__name__}: {exc}"))

    # -- steps ----------------------------------------------------------

    def _seed(self, observation_index: int, lineage_id: int) -> int:
        return derive_seed(SeedKey(self.chain_index, self.sample_index,
                                   observation_index, lineage_id, MODEL_STREAM))

    def _initialize(self, command: Broadcast) -> None:
        self.sample_index = command.sample_index
        t0 = perf_counter()
        self.particles = {}
        for lineage in self.my_lineages:
            model = self.model_factory()
            model.init(command.parameters, self._seed(0, lineage))
            self.particles[lineage] = model
        self.pending.append(StageTiming("init", self.rank, self.sample_index, 0, perf_counter() - t0))
        self.reports.send(InitReport(self.rank, tuple(self.my_lineages), self._flush_timings()))
        self._init_done_at = perf_counter()

    def _advance(self, command: Advance) -> None:
        j = command.observation_index
        run_time = 0.0
        observe_time = 0.0
        weights = []
        for lineage in sorted(self.particles):
            model = self.particles[lineage]
            t0 = perf_counter()
            model.run(command.target_time)
            t1 = perf_counter()
            value = model.log_observe(command.data)
            observe_time += perf_counter() - t1
            run_time += t1 - t0
            if math.isnan(value) or value == math.inf:
                raise ProtocolError(f"invalid log weight {value!r} from lineage {lineage}",
                                    rank=self.rank, step=f"5/observe[{j}]")
            weights.append((lineage, float(value)))
        self.pending.append(StageTiming("run", self.rank, self.sample_index, j, run_time))
        self.pending.append(StageTiming("observe", self.rank, self.sample_index, j, observe_time))
        self.reports.send(WorkerReport(self.rank, j, tuple(weights), self._flush_timings()))

    def _apply_routing(self, command: RouteCommand) -> None:
        j = command.observation_index
        keeps: dict[int, list] = {}
        sends: dict[tuple, list] = {}
        recvs: dict[tuple, list] = {}
        for lineage, source, destination, new_id in command.entries:
            if source == self.rank and destination == self.rank:
                keeps.setdefault(lineage, []).append(new_id)
            elif source == self.rank:
                sends.setdefault((lineage, destination), []).append(new_id)
            elif destination == self.rank:
                recvs.setdefault((lineage, source), []).append(new_id)
            else:
                raise ProtocolError("routing slice names a foreign transfer",
                                    rank=self.rank, step=f"10/routing[{j}]")
        wanted = set(keeps) | {lineage for lineage, _ in sends}
        missing = wanted - set(self.particles)
        if missing:
            raise ProtocolError(f"routing references non-resident particles {sorted(missing)}",
                                rank=self.rank, step=f"10(a)/prune[{j}]")

        # 10(a): drop particles neither kept here nor routed anywhere else
        retired = {lin: m for lin, m in self.particles.items() if lin not in wanted}
        self._pool.extend(retired.values())
        self.particles = {lin: m for lin, m in self.particles.items() if lin in wanted}

        # 10(b): non-blocking sends, one per distinct (lineage, destination);
        # receives need no posting, the inbox accepts eagerly
        for (lineage, destination), ids in sorted(sends.items()):
            state = self.particles[lineage].save()
            self.peers[destination].send(
                ParticleTransfer(lineage, min(ids), state, self.rank, destination))

        # 10(c): replicate local survivors while any transfers are in flight
        self.marks.append((self.rank, "replicate-start", j, monotonic()))
        replicate_time = 0.0
        survivors: dict[int, Model] = {}
        t0 = perf_counter()
        for lineage in sorted(keeps):
            ids = sorted(keeps[lineage])
            original = self.particles[lineage]
            survivors[ids[0]] = original
            if len(ids) > 1:
                blob = original.save()
                for new_id in ids[1:]:
                    replica = self._pool.pop() if self._pool else self.model_factory()
                    replica.load(blob)
                    survivors[new_id] = replica
        replicate_time += perf_counter() - t0

        # 10(d): consume inbound transfers, replicating as needed
        transfer_wait = 0.0
        outstanding = dict(recvs)
        while outstanding:
            t0 = perf_counter()
            try:
                transfer = self.inbox.recv(self.timeout)
            except queue.Empty:
                raise ProtocolError(f"missing expected transfers {sorted(outstanding)}",
                                    rank=self.rank, step=f"10(d)/receive[{j}]")
            transfer_wait += perf_counter() - t0
            if not isinstance(transfer, ParticleTransfer):
                raise ProtocolError(f"unexpected peer message {type(transfer).__name__}",
                                    rank=self.rank, step=f"10(d)/receive[{j}]")
            key = (transfer.lineage_id, transfer.source)
            if key not in outstanding:
                raise ProtocolError(f"unsolicited transfer of lineage {transfer.lineage_id} "
                                    f"from worker {transfer.source}",
                                    rank=self.rank, step=f"10(d)/receive[{j}]")
            self.marks.append((self.rank, "receive-complete", j, monotonic()))
            ids = sorted(outstanding.pop(key))
            t0 = perf_counter()
            for new_id in ids:
                replica = self._pool.pop() if self._pool else self.model_factory()
                replica.load(transfer.state)
                survivors[new_id] = replica
            replicate_time += perf_counter() - t0

        # 10(e): sends completed on enqueue; sent-only instances retire here
        for (lineage, _destination), _ids in sends.items():
            model = self.particles.get(lineage)
            if model is not None and lineage not in keeps:
                self._pool.append(model)
                self.particles.pop(lineage)
        self.particles = survivors
        if len(self.particles) > command.w_max:
            raise ProtocolError(f"holding {len(self.particles)} particles, limit {command.w_max}",
                                rank=self.rank, step=f"10(e)/prune[{j}]")

        # 10(f): every survivor restarts on its own fresh derived stream
        t0 = perf_counter()
        for new_id in sorted(self.particles):
            self.particles[new_id].reseed(self._seed(j, new_id))
        replicate_time += perf_counter() - t0

        self.pending.append(StageTiming("replicate", self.rank, self.sample_index, j, replicate_time))
        self.pending.append(StageTiming("transfer-wait", self.rank, self.sample_index, j, transfer_wait))

    def _exit(self) -> None:
        t0 = perf_counter()
        self.particles = {}
        self.pending.append(StageTiming("exit", self.rank, self.sample_index, 0, perf_counter() - t0))
        self.reports.send(ExitReport(self.rank, self._flush_timings()))

    # -- helpers --------------------------------------------------------

    my_lineages: range = range(0)

    def _flush_timings(self) -> tuple:
        out = tuple(self.pending)
        self.pending = []
        return out


def run_particle_filter(
    model_factory: Callable[[], Model],
    parameters: Parameters,
    observations: ObservationSeries,
    ensemble_size: int,
    workers: int,
    *,
    chain_index: int = 0,
    sample_index: int = 0,
    resampler: Callable = resample_multinomial,
    transfer_delay: float = 0.0,
    timeout: float = DEFAULT_TIMEOUT,
    worker_dependent_seed_fault: bool = False,
) -> FilterResult:
    """Run one parallel filtering pass and estimate the marginal likelihood.

    ``worker_dependent_seed_fault`` deliberately mixes the worker count
    into the resampling seed; the verification suite uses it to prove the
    worker-count invariance check can fail.
    """
    if ensemble_size < 1:
        raise ValidationError(f"ensemble size must be >= 1, got {ensemble_size}")
    if workers < 1:
        raise ValidationError(f"worker count must be >= 1, got {workers}")
    if not isinstance(observations, ObservationSeries):
        raise ValidationError("observations must be an ObservationSeries")
    if not isinstance(parameters, Parameters):
        raise ValidationError("parameters must be a Parameters instance")

    n = len(observations)
    p = ensemble_size
    commands = [Channel() for _ in range(workers)]
    reports = Channel()
    inboxes = [Channel(delay=transfer_delay) for _ in range(workers)]
    runtimes = []
    threads = []
    for rank in range(workers):
        runtime = _WorkerRuntime(
            rank, model_factory, chain_index, commands[rank], reports,
            inboxes[rank], {w: inboxes[w] for w in range(workers)}, timeout,
        )
        runtime.my_lineages = worker_lineages(rank, p, workers)
        runtimes.append(runtime)
        thread = threading.Thread(target=runtime.run, name=f"pf-worker-{rank}", daemon=True)
        threads.append(thread)

    timings: list[StageTiming] = []
    rows: list[np.ndarray] = []
    resample_counts: list[tuple] = []
    redraw_rates: list[float] = []
    move_fractions: list[float] = []
    copy_fractions: list[float] = []
    degenerate: tuple = ()

    def _recv_report(expected_type, step: str):
        try:
            message = reports.recv(timeout)
        except queue.Empty:
            raise ProtocolError("timed out gathering worker reports", rank=MASTER_RANK, step=step)
        if isinstance(message, ErrorReport):
            raise ProtocolError(message.message, rank=message.worker, step=message.step)
        if not isinstance(message, expected_type):
            raise ProtocolError(f"unexpected report {type(message).__name__}",
                                rank=MASTER_RANK, step=step)
        return message

    t_start = perf_counter()
    try:
        for thread in threads:
            thread.start()
        for rank in range(workers):
            commands[rank].send(Broadcast(sample_index, parameters))

        held = {}
        for _ in range(workers):
            report = _recv_report(InitReport, "2/init-gather")
            timings.extend(report.timings)
            for lineage in report.lineage_ids:
                held[lineage] = report.worker
        if sorted(held) != list(range(p)):
            raise ProtocolError("initialized lineages do not cover the ensemble",
                                rank=MASTER_RANK, step="2/init-gather")

        marks: list[tuple] = []
        for j, (target_time, data) in enumerate(observations, start=1):
            for rank in range(workers):
                commands[rank].send(Advance(j, target_time, data))
            t0 = perf_counter()
            merged: dict[int, float] = {}
            for _ in range(workers):
                report = _recv_report(WorkerReport, f"5/gather[{j}]")
                if report.observation_index != j:
                    raise ProtocolError(
                        f"report for event {report.observation_index} while gathering event {j}",
                        rank=report.worker, step=f"5/gather[{j}]")
                timings.extend(report.timings)
                for lineage, value in report.log_weights:
                    merged[lineage] = value
            timings.append(StageTiming("likelihood-gather", MASTER_RANK, sample_index, j,
                                       perf_counter() - t0))
            if sorted(merged) != list(range(p)):
                raise ProtocolError("gathered weights do not cover the ensemble",
                                    rank=MASTER_RANK, step=f"5/gather[{j}]")
            row = np.array([merged[lineage] for lineage in range(p)])
            rows.append(row)

            shift = row.max()
            if shift == -np.inf:
                degenerate = (j,)
                break

            if j == n:
                break

            # step 7: virtual resampling on the master
            t0 = perf_counter()
            probs = normalize_weights(np.exp(row - shift))
            seed = derive_seed(SeedKey(chain_index, sample_index, j, 0, RESAMPLE_STREAM))
            if worker_dependent_seed_fault:
                seed ^= workers
            counts = resampler(probs, p, seed)
            timings.append(StageTiming("resample", MASTER_RANK, sample_index, j,
                                       perf_counter() - t0))
            resample_counts.append(tuple(int(c) for c in counts))
            redraw_rates.append(redraw_rate(counts))

            # step 8: routing
            t0 = perf_counter()
            locations = [ParticleLocation(lineage, held[lineage]) for lineage in range(p)]
            routing = compute_routing(counts, locations, workers)
            move, copy = traffic_metrics(routing)
            timings.append(StageTiming("route", MASTER_RANK, sample_index, j,
                                       perf_counter() - t0))
            move_fractions.append(move)
            copy_fractions.append(copy)

            # step 9: scatter slices
            for rank in range(workers):
                slice_entries = tuple(
                    (e.lineage_id, e.source, e.destination, e.new_lineage_id)
                    for e in routing.entries
                    if e.source == rank or e.destination == rank
                )
                commands[rank].send(RouteCommand(j, slice_entries, routing.W_max))
            held = {e.new_lineage_id: e.destination for e in routing.entries}

        for rank in range(workers):
            commands[rank].send(ExitCommand())
        for _ in range(workers):
            report = _recv_report(ExitReport, "6/exit-gather")
            timings.extend(report.timings)
        for runtime in runtimes:
            marks.extend(runtime.marks)
    finally:
        for thread in threads:
            thread.join(timeout=timeout)

    wall_time = perf_counter() - t_start
    estimate = estimate_marginal_from_log(np.vstack(rows))
    diagnostics = FilterDiagnostics(
        workers=workers,
        wall_time=wall_time,
        resample_counts=tuple(resample_counts),
        redraw_rates=tuple(redraw_rates),
        move_fractions=tuple(move_fractions),
        copy_fractions=tuple(copy_fractions),
        timings=tuple(timings),
        marks=tuple(sorted(marks, key=lambda m: m[3])),
        degenerate_observations=degenerate,
    )
    return FilterResult(estimate=estimate, diagnostics=diagnostics)

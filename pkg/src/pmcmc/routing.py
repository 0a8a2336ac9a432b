"""Greedy particle routing: turn resample counts into placement orders.

After each resampling the master decides where every surviving replica
will live. Local replication is preferred; only the overflow is routed,
to the nearest worker by rank distance. The result is a deterministic,
serializable instruction set; workers execute their slice of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ValidationError

__all__ = [
    "ParticleLocation",
    "Routing",
    "RoutingEntry",
    "compute_routing",
    "traffic_metrics",
]


@dataclass(frozen=True)
class ParticleLocation:
    """Where one particle currently lives."""

    lineage_id: int
    worker: int


@dataclass(frozen=True)
class RoutingEntry:
    """One post-resampling replica: parent lineage, its current worker,
    the worker it will live on, and its reassigned identity (used for
    post-routing reseeding)."""

    lineage_id: int
    source: int
    destination: int
    new_lineage_id: int


@dataclass(frozen=True)
class Routing:
    entries: tuple
    W_max: int

    def __post_init__(self):
        p = len(self.entries)
        if p == 0:
            raise ValidationError("routing must contain at least one entry")
        if self.W_max < 1:
            raise ValidationError(f"W_max must be >= 1, got {self.W_max}")
        new_ids = {e.new_lineage_id for e in self.entries}
        if new_ids != set(range(p)):
            raise ValidationError("new_lineage_id values must cover 0..p-1 exactly once")
        loads: dict[int, int] = {}
        for e in self.entries:
            loads[e.destination] = loads.get(e.destination, 0) + 1
        overloaded = {w: n for w, n in loads.items() if n > self.W_max}
        if overloaded:
            raise ValidationError(f"destination load exceeds W_max={self.W_max}: {overloaded}")

    @property
    def ensemble_size(self) -> int:
        return len(self.entries)

    def slice_for(self, worker: int) -> tuple:
        """Entries a worker participates in, as sender or receiver."""
        return tuple(e for e in self.entries if e.source == worker or e.destination == worker)


def _validate_inputs(counts: Sequence[int], locations: Sequence[ParticleLocation], W: int):
    c = np.asarray(counts)
    if c.ndim != 1 or c.size == 0:
        raise ValidationError("counts must be a nonempty 1-D vector")
    if np.any(c < 0):
        raise ValidationError("counts must be >= 0")
    p = c.size
    if int(c.sum()) != p:
        raise ValidationError(f"counts must sum to the ensemble size {p}, got {int(c.sum())}")
    if W < 1:
        raise ValidationError(f"worker count must be >= 1, got {W}")
    if len(locations) != p:
        raise ValidationError(f"expected {p} locations, got {len(locations)}")
    seen = set()
    for loc in locations:
        if not 0 <= loc.worker < W:
            raise ValidationError(f"location of particle {loc.lineage_id} names invalid worker {loc.worker}")
        seen.add(loc.lineage_id)
    if seen != set(range(p)):
        raise ValidationError("locations must cover lineage ids 0..p-1 exactly once")
    return c, p


def compute_routing(counts: Sequence[int], locations: Sequence[ParticleLocation], W: int) -> Routing:
    """Two-stage greedy placement of the resampled ensemble.

    Stage 1 walks workers in ascending rank and their resident particles
    in ascending lineage id, keeping as many replicas local as capacity
    (ceil(p/W)) allows. Stage 2 walks the still-unplaced replicas in
    ascending lineage id and assigns them to the nearest worker with
    spare capacity (distance = rank difference, ties toward the lower
    rank); a particle's replicas may split across workers. Replica
    identities are renumbered 0..p-1 in (lineage, destination, copy)
    order, making the whole function a pure deterministic mapping.
    """
    c, p = _validate_inputs(counts, locations, W)
    w_max = math.ceil(p / W)
    source_of = {loc.lineage_id: loc.worker for loc in locations}
    residents: list[list[int]] = [[] for _ in range(W)]
    for loc in locations:
        residents[loc.worker].append(loc.lineage_id)
    remaining = [int(x) for x in c]
    capacity = [w_max] * W

    # (lineage, destination, copies) with distinct (lineage, destination)
    placements: list[tuple[int, int, int]] = []

    for w in range(W):
        for lin in sorted(residents[w]):
            if remaining[lin] > 0 and capacity[w] > 0:
                k = min(remaining[lin], capacity[w])
                placements.append((lin, w, k))
                remaining[lin] -= k
                capacity[w] -= k

    for lin in range(p):
        while remaining[lin] > 0:
            src = source_of[lin]
            best = min(
                (w for w in range(W) if capacity[w] > 0),
                key=lambda w: (abs(w - src), w),
            )
            k = min(remaining[lin], capacity[best])
            placements.append((lin, best, k))
            remaining[lin] -= k
            capacity[best] -= k

    entries = []
    next_id = 0
    for lin, dest, k in sorted(placements):
        for _ in range(k):
            entries.append(RoutingEntry(lin, source_of[lin], dest, next_id))
            next_id += 1
    return Routing(tuple(entries), w_max)


def traffic_metrics(routing: Routing) -> tuple[float, float]:
    """(move_fraction, copy_fraction) of a routing.

    A move is a distinct (lineage, destination) pair that crosses
    workers: identical replicas travel as one transfer and are replicated
    on arrival. Copies are the replicas beyond the first instance at each
    destination, wherever they are made.
    """
    p = routing.ensemble_size
    source_of = {e.lineage_id: e.source for e in routing.entries}
    pairs = {(e.lineage_id, e.destination) for e in routing.entries}
    moves = sum(1 for lin, dest in pairs if dest != source_of[lin])
    return moves / p, (p - len(pairs)) / p

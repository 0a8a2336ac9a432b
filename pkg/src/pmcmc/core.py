"""Shared domain types, deterministic seed derivation, and error taxonomy."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "EngineError",
    "ValidationError",
    "DegenerateEnsembleError",
    "ProtocolError",
    "SerializationError",
    "Parameters",
    "ParameterSpace",
    "SeedKey",
    "ObservationSeries",
    "derive_seed",
    "make_stream",
    "philox_state",
    "MODEL_STREAM",
    "RESAMPLE_STREAM",
    "PROPOSAL_STREAM",
    "SYNTH_STREAM",
]


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(EngineError):
    """An input violated a documented precondition or invariant."""


class DegenerateEnsembleError(EngineError):
    """Every particle weight is zero or non-finite; the ensemble carries no information."""


class ProtocolError(EngineError):
    """A master/worker exchange broke the execution protocol.

    Carries the worker rank and the protocol step at which the failure
    was detected so aborts are attributable.
    """

    def __init__(self, message: str, rank: int | None = None, step: str | None = None):
        detail = message
        if rank is not None:
            detail += f" (rank {rank})"
        if step is not None:
            detail += f" [step {step}]"
        super().__init__(detail)
        self.rank = rank
        self.step = step


class SerializationError(EngineError):
    """A byte sequence could not be decoded into a model state."""


# ---------------------------------------------------------------------------
# Seed derivation
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1

# Reserved values for SeedKey.replica_index. Each independent consumer of
# randomness gets its own stream index so no two purposes ever share a seed:
# model state streams, the master's resampling draws, the sampler's proposal
# and acceptance draws, and synthetic-data generation.
MODEL_STREAM = 0
RESAMPLE_STREAM = 1
PROPOSAL_STREAM = 2
SYNTH_STREAM = 3


def _splitmix64(z: int) -> int:
    """One round of the splitmix64 finalizer (public-domain mixing constants)."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SeedKey:
    """Hierarchical identity of one random stream.

    The five counters identify a stream globally: which chain, which MCMC
    sample, which observation interval, which particle lineage, and which
    of the reserved per-purpose replica streams.
    """

    chain_index: int
    sample_index: int
    observation_index: int
    lineage_id: int
    replica_index: int = MODEL_STREAM

    def __post_init__(self) -> None:
        for name in ("chain_index", "sample_index", "observation_index", "lineage_id", "replica_index"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ValidationError(f"SeedKey.{name} must be a nonnegative integer, got {value!r}")


def derive_seed(key: SeedKey) -> int:
    """Derive the 64-bit seed for a stream identity.

    Counter-based mixing: each field is finalized with splitmix64 and
    absorbed into a running 64-bit digest, so the function is pure,
    platform-independent, and collision-resistant across distinct keys.
    """
    h = 0
    for part in (key.chain_index, key.sample_index, key.observation_index, key.lineage_id, key.replica_index):
        h = _splitmix64(h ^ _splitmix64(part & _MASK64))
    return h


def philox_state(seed: int) -> dict:
    """Full Philox bit-generator state for a fresh stream keyed by ``seed``.

    Assigning this dict to an existing bit generator is equivalent to
    constructing ``np.random.Philox(key=seed)`` but roughly 10x cheaper,
    which matters when thousands of particles are rekeyed per observation.
    """
    return {
        "bit_generator": "Philox",
        "state": {
            "counter": np.zeros(4, dtype=np.uint64),
            "key": np.array([seed & _MASK64, seed >> 64], dtype=np.uint64),
        },
        "buffer": np.zeros(4, dtype=np.uint64),
        "buffer_pos": 4,
        "has_uint32": 0,
        "uinteger": 0,
    }


def make_stream(seed: int) -> np.random.Generator:
    """Counter-based random stream (Philox) keyed by a derived seed."""
    return np.random.Generator(np.random.Philox(key=seed))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class Parameters(Mapping[str, float]):
    """Immutable ordered name -> value map for model parameters.

    Iteration order is the declaration order, so serialized forms are
    self-describing and reproducible.
    """

    __slots__ = ("_names", "_values", "_index")

    def __init__(self, entries: Mapping[str, float] | Sequence[tuple[str, float]]):
        pairs = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
        names = tuple(name for name, _ in pairs)
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate parameter names in {names}")
        values = []
        for name, value in pairs:
            value = float(value)
            if not math.isfinite(value):
                raise ValidationError(f"parameter {name!r} is not finite: {value}")
            values.append(value)
        object.__setattr__(self, "_names", names)
        object.__setattr__(self, "_values", tuple(values))
        object.__setattr__(self, "_index", {name: i for i, name in enumerate(names)})

    def __setattr__(self, name: str, value: Any) -> None:
        raise AttributeError("Parameters is immutable")

    def __getitem__(self, name: str) -> float:
        return self._values[self._index[name]]

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}={v!r}" for n, v in zip(self._names, self._values))
        return f"Parameters({inner})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Parameters):
            return NotImplemented
        return self._names == other._names and self._values == other._values

    def __hash__(self) -> int:
        return hash((self._names, self._values))

    def __reduce__(self):
        # slots + frozen setattr defeat default pickling; rebuild via __init__
        return (Parameters, (tuple(zip(self._names, self._values)),))

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def values(self) -> tuple[float, ...]:
        return self._values

    def replace(self, **updates: float) -> "Parameters":
        """New Parameters with the named entries replaced."""
        unknown = set(updates) - set(self._names)
        if unknown:
            raise ValidationError(f"unknown parameter names: {sorted(unknown)}")
        return Parameters([(n, updates.get(n, v)) for n, v in zip(self._names, self._values)])

    def to_text(self) -> str:
        """JSON text that round-trips values exactly (repr-based floats)."""
        return json.dumps(dict(zip(self._names, self._values)))

    @classmethod
    def from_text(cls, text: str) -> "Parameters":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SerializationError(f"invalid parameter text: {exc}") from exc
        if not isinstance(raw, dict):
            raise SerializationError("parameter text must be a JSON object")
        return cls(raw)


@dataclass(frozen=True)
class ParameterSpace:
    """Declared parameter names with per-name closed bounds (possibly infinite)."""

    names: tuple[str, ...]
    bounds: Mapping[str, tuple[float, float]]

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise ValidationError(f"duplicate names in parameter space: {self.names}")
        for name in self.names:
            if name not in self.bounds:
                raise ValidationError(f"no bounds declared for parameter {name!r}")
            lower, upper = self.bounds[name]
            if not lower < upper:
                raise ValidationError(f"empty bounds for {name!r}: [{lower}, {upper}]")

    def validate(self, params: Parameters) -> None:
        """Raise ValidationError unless every declared name is present and in bounds."""
        for name in self.names:
            if name not in params:
                raise ValidationError(f"missing parameter {name!r}")
            value = params[name]
            lower, upper = self.bounds[name]
            if not (lower <= value <= upper):
                raise ValidationError(f"parameter {name!r}={value} outside [{lower}, {upper}]")

    def contains(self, params: Parameters) -> bool:
        try:
            self.validate(params)
        except ValidationError:
            return False
        return True


@dataclass(frozen=True)
class ObservationSeries:
    """Ordered observation times with one data record per time."""

    times: tuple[float, ...]
    data: tuple[Mapping[str, Any], ...]

    def __init__(self, times: Sequence[float], data: Sequence[Mapping[str, Any]]):
        times = tuple(times)
        data = tuple(dict(d) for d in data)
        if len(times) < 1:
            raise ValidationError("an observation series needs at least one time point")
        if len(times) != len(data):
            raise ValidationError(f"{len(times)} times but {len(data)} data records")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError(f"observation times must be strictly increasing: {times}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[tuple[float, Mapping[str, Any]]]:
        return iter(zip(self.times, self.data))

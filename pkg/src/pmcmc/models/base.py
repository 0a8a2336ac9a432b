"""Execution interface every hidden-Markov model plugs into the engine."""

from __future__ import annotations

import math
import pickle
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Mapping

from ..core import Parameters, SerializationError

__all__ = ["Model", "RoundTripReport", "check_state_roundtrip", "decode_state_payload", "encode_state_payload"]


class Model(ABC):
    """Behavioral contract for one particle's model instance.

    An instance is single-threaded and owns its full state, including its
    random stream, so that ``load(save())`` reproduces future behavior
    exactly. ``observe`` must be pure and nonnegative. ``run`` must be
    Markov: the result distribution depends only on the current state, the
    parameters, the target time, and the stream.
    """

    @abstractmethod
    def init(self, parameters: Parameters, seed: int) -> None:
        """Construct the initial state for the given parameters and stream seed."""

    @abstractmethod
    def run(self, target_time: float, seed: int | None = None) -> None:
        """Advance the state to ``target_time``.

        With ``seed=None`` the current stream continues; passing a seed
        rekeys the stream first (equivalent to ``reseed`` then ``run``).
        """

    @abstractmethod
    def observe(self, data: Mapping[str, Any]) -> float:
        """Likelihood of one observation record given the current state (linear space)."""

    @abstractmethod
    def save(self) -> bytes:
        """Serialize the complete state, parameters and stream included."""

    @abstractmethod
    def load(self, state: bytes) -> None:
        """Restore a state produced by ``save`` on a compatible instance."""

    @abstractmethod
    def reseed(self, seed: int) -> None:
        """Replace the random stream without touching the state."""

    def log_observe(self, data: Mapping[str, Any]) -> float:
        """Log-space observation likelihood; override when the density underflows.

        The default adapter takes the log of ``observe`` and maps a zero
        likelihood to -inf.
        """
        value = self.observe(data)
        if value < 0.0 or not math.isfinite(value):
            raise ValueError(f"observe() must return a finite nonnegative value, got {value}")
        return math.log(value) if value > 0.0 else -math.inf


def encode_state_payload(kind: str, payload: dict) -> bytes:
    """Serialize a model state dict as a tagged byte sequence."""
    return pickle.dumps({"kind": kind, "payload": payload}, protocol=pickle.HIGHEST_PROTOCOL)


def decode_state_payload(kind: str, state: bytes) -> dict:
    """Decode and validate a byte sequence produced by ``encode_state_payload``."""
    try:
        raw = pickle.loads(state)
    except Exception as exc:
        raise SerializationError(f"undecodable model state: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("kind") != kind or "payload" not in raw:
        raise SerializationError(f"state payload is not a serialized {kind!r} state")
    return raw["payload"]


@dataclass(frozen=True)
class RoundTripReport:
    """Outcome of a save/load equivalence check."""

    ok: bool
    detail: str = ""


def check_state_roundtrip(
    original: Model,
    blank: Model,
    steps: list[tuple[float, int]],
    data: Mapping[str, Any],
) -> RoundTripReport:
    """Verify the save/load contract on a pair of instances.

    ``original`` is saved and restored into ``blank``; both are then
    advanced through the same (target_time, seed) schedule and their
    observation likelihoods compared. The first diverging value is
    reported.
    """
    blank.load(original.save())
    for idx, (target, seed) in enumerate(steps):
        original.run(target, seed)
        blank.run(target, seed)
        a = original.log_observe(data)
        b = blank.log_observe(data)
        if a != b:
            return RoundTripReport(False, f"log_observe diverged at step {idx}: {a!r} != {b!r}")
    return RoundTripReport(True)

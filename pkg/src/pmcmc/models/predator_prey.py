"""Stochastic two-species individual-based model with counting observations.

Every organism is tracked as a discrete entity with species, life stage,
and body mass. One model step applies, in this fixed order:

1. growth      - every individual gains ``growth_increment`` mass (no draws)
2. maturation  - juveniles reaching ``maturation_mass`` become adults (no draws)
3. predation   - one uniform draw per prey, in stored order; prey is
                 consumed when u < 1 - (1-encounter_rate)^(predator density)
4. death       - one uniform draw per survivor, in stored order; the
                 per-species threshold is the base rate plus a crowding
                 term saturating in the species' density (see
                 ``death_probability``)
5. reproduce   - one Poisson draw per adult, prey block first then
                 predator block, each in stored order; offspring are
                 appended (prey then predators) as juveniles at
                 ``juvenile_mass``

The fixed draw order makes a trajectory exactly replayable from the seed,
which the engine relies on for particle replication and reseeding.

Counts are observed through a Poisson counting-error model restricted to
detectable individuals (mass >= ``detection_mass``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

from ..core import (
    MODEL_STREAM,
    SYNTH_STREAM,
    ObservationSeries,
    Parameters,
    SeedKey,
    ValidationError,
    derive_seed,
    make_stream,
    philox_state,
)
from .base import Model, decode_state_payload, encode_state_payload

__all__ = [
    "ADULT",
    "DESK_DEFAULTS",
    "DETECTION_EPSILON",
    "JUVENILE",
    "OBS_FIELDS",
    "FULL_SCALE_DEFAULTS",
    "PREDATOR",
    "PREY",
    "IbmParameters",
    "IbmState",
    "PredatorPreyModel",
    "death_probability",
    "ibm_log_observe",
    "ibm_observe",
    "ibm_step",
    "ibm_synthesize",
]

PREY = 0
PREDATOR = 1
JUVENILE = 0
ADULT = 1

DETECTION_EPSILON = 1e-6

OBS_FIELDS = ("prey", "predator")

# Calibrated subset of the parameter vector; everything else is fixed.
CALIBRATED = ("K_prey", "K_pred")


@dataclass(frozen=True)
class IbmParameters:
    """Model rates. K_prey and K_pred are the calibrated half-saturation
    constants of the self-inhibition (crowding) mortality terms; the rest
    are fixed configuration.

    The K constants are expressed per unit habitat area; ``prey_area`` and
    ``pred_area`` convert them to the abundance scale of a given setup, so
    the same calibrated values drive both the small test configuration and
    the large one.
    """

    K_prey: float = 25.0
    K_pred: float = 15.0
    prey_birth_rate: float = 0.4
    pred_birth_rate: float = 0.2
    prey_base_death: float = 0.02
    pred_base_death: float = 0.02
    # crowding coefficients tuned so the large setup equilibrates near
    # 2000 detectable prey and 30 predators (see package docs)
    prey_crowd_death: float = 0.20
    pred_crowd_death: float = 0.195
    encounter_rate: float = 0.004
    growth_increment: float = 0.2
    maturation_mass: float = 1.0
    juvenile_mass: float = 0.5
    detection_mass: float = 0.8
    prey_area: float = 4.0
    pred_area: float = 2.0 / 3.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValidationError(f"rate {f.name!r} must be a finite number, got {value!r}")
        for name in ("K_prey", "K_pred", "growth_increment", "maturation_mass",
                     "juvenile_mass", "detection_mass", "prey_area", "pred_area"):
            if getattr(self, name) <= 0.0:
                raise ValidationError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("prey_birth_rate", "pred_birth_rate", "prey_base_death",
                     "pred_base_death", "prey_crowd_death", "pred_crowd_death"):
            if getattr(self, name) < 0.0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.encounter_rate < 1.0:
            raise ValidationError(f"encounter_rate must be in [0, 1), got {self.encounter_rate}")

    def with_calibrated(self, parameters: Parameters) -> "IbmParameters":
        """Overlay the calibrated constants found in a parameter vector."""
        updates = {name: float(parameters[name]) for name in CALIBRATED if name in parameters}
        return replace(self, **updates) if updates else self


class IbmState:
    """Census arrays in stable stored order plus the current step count."""

    __slots__ = ("species", "stage", "mass", "step")

    def __init__(self, species: np.ndarray, stage: np.ndarray, mass: np.ndarray, step: int):
        if not (species.shape == stage.shape == mass.shape):
            raise ValidationError("census arrays must have identical shape")
        if step < 0:
            raise ValidationError(f"step must be >= 0, got {step}")
        self.species = species
        self.stage = stage
        self.mass = mass
        self.step = int(step)

    @classmethod
    def initial(cls, n_prey: int, n_predators: int, mass: float) -> "IbmState":
        """Founding census: all individuals adult at the given mass, prey first."""
        if n_prey < 0 or n_predators < 0:
            raise ValidationError("initial counts must be >= 0")
        n = n_prey + n_predators
        species = np.concatenate([
            np.full(n_prey, PREY, np.uint8),
            np.full(n_predators, PREDATOR, np.uint8),
        ])
        return cls(species, np.full(n, ADULT, np.uint8), np.full(n, float(mass)), 0)

    def __len__(self) -> int:
        return self.species.size

    def count(self, species: int) -> int:
        return int((self.species == species).sum())

    def detectable_count(self, species: int, detection_mass: float) -> int:
        return int(((self.species == species) & (self.mass >= detection_mass)).sum())


def death_probability(count: int, base_rate: float, crowd_rate: float,
                      half_saturation: float, area: float = 1.0) -> float:
    """Per-step death probability of one individual of a species with
    ``count`` conspecifics: the base rate plus a crowding term that
    saturates as the species' density ``count/area`` exceeds the
    half-saturation constant. Clipped into [0, 1].
    """
    density = count / area
    p = base_rate + crowd_rate * density / (density + half_saturation)
    return min(max(p, 0.0), 1.0)


def ibm_step(state: IbmState, params: IbmParameters, rng: np.random.Generator) -> IbmState:
    """Advance the census one step using the documented draw order."""
    species = state.species
    # 1. growth, 2. maturation (stage moves juvenile -> adult only)
    mass = state.mass + params.growth_increment
    stage = np.maximum(state.stage, (mass >= params.maturation_mass).astype(np.uint8))

    # 3. predation: the uniform block is always drawn so the stream
    # position depends only on the census size, not on the outcome
    prey_mask = species == PREY
    n_prey = int(prey_mask.sum())
    n_pred = species.size - n_prey
    u = rng.random(n_prey)
    if n_pred > 0 and params.encounter_rate > 0.0 and n_prey > 0:
        consume_p = -math.expm1(math.log1p(-params.encounter_rate) * (n_pred / params.pred_area))
        keep = np.ones(species.size, dtype=bool)
        keep[np.flatnonzero(prey_mask)[u < consume_p]] = False
        species, stage, mass = species[keep], stage[keep], mass[keep]

    # 4. density-dependent death over the survivors
    n_prey = int((species == PREY).sum())
    n_pred = species.size - n_prey
    d_prey = death_probability(n_prey, params.prey_base_death, params.prey_crowd_death,
                               params.K_prey, params.prey_area)
    d_pred = death_probability(n_pred, params.pred_base_death, params.pred_crowd_death,
                               params.K_pred, params.pred_area)
    v = rng.random(species.size)
    keep = v >= np.where(species == PREY, d_prey, d_pred)
    species, stage, mass = species[keep], stage[keep], mass[keep]

    # 5. reproduction: adults only, one Poisson per adult
    adult = stage == ADULT
    n_adult_prey = int((adult & (species == PREY)).sum())
    n_adult_pred = int((adult & (species == PREDATOR)).sum())
    births_prey = int(rng.poisson(params.prey_birth_rate, n_adult_prey).sum())
    births_pred = int(rng.poisson(params.pred_birth_rate, n_adult_pred).sum())
    if births_prey or births_pred:
        species = np.concatenate([
            species,
            np.full(births_prey, PREY, np.uint8),
            np.full(births_pred, PREDATOR, np.uint8),
        ])
        n_births = births_prey + births_pred
        stage = np.concatenate([stage, np.zeros(n_births, np.uint8)])
        mass = np.concatenate([mass, np.full(n_births, params.juvenile_mass)])
    return IbmState(species, stage, mass, state.step + 1)


def _validate_counts(data: Mapping[str, Any]) -> dict:
    counts = {}
    for field in OBS_FIELDS:
        if field not in data:
            raise ValidationError(f"observation record lacks field {field!r}")
        value = data[field]
        if isinstance(value, bool) or int(value) != value or int(value) < 0:
            raise ValidationError(f"observed {field} count must be a nonnegative integer, got {value!r}")
        counts[field] = int(value)
    return counts


def ibm_log_observe(state: IbmState, data: Mapping[str, Any], params: IbmParameters) -> float:
    """Log likelihood of observed counts: independent Poisson counting
    error per species with mean = detectable abundance + epsilon."""
    counts = _validate_counts(data)
    total = 0.0
    for field, species in (("prey", PREY), ("predator", PREDATOR)):
        lam = state.detectable_count(species, params.detection_mass) + DETECTION_EPSILON
        k = counts[field]
        total += k * math.log(lam) - lam - math.lgamma(k + 1)
    return total


def ibm_observe(state: IbmState, data: Mapping[str, Any], params: IbmParameters) -> float:
    return math.exp(ibm_log_observe(state, data, params))


def ibm_synthesize(
    params: IbmParameters,
    times: Sequence[float],
    seed: int,
    initial_prey: int,
    initial_predators: int,
) -> ObservationSeries:
    """Run one realization and apply the counting observation process at
    each scheduled time. Deterministic given the seed: the trajectory and
    the counting noise use two disjoint derived streams."""
    if len(times) == 0:
        raise ValidationError("synthesis schedule must be nonempty")
    state = IbmState.initial(initial_prey, initial_predators, params.maturation_mass)
    rng = make_stream(derive_seed(SeedKey(seed, 0, 0, 0, MODEL_STREAM)))
    noise = make_stream(derive_seed(SeedKey(seed, 0, 0, 0, SYNTH_STREAM)))
    records = []
    for t in times:
        target = int(t)
        if target != t or target < state.step:
            raise ValidationError(f"schedule times must be nondecreasing integers, got {t!r}")
        while state.step < target:
            state = ibm_step(state, params, rng)
        records.append({
            "prey": int(noise.poisson(state.detectable_count(PREY, params.detection_mass) + DETECTION_EPSILON)),
            "predator": int(noise.poisson(state.detectable_count(PREDATOR, params.detection_mass) + DETECTION_EPSILON)),
        })
    return ObservationSeries(tuple(int(t) for t in times), tuple(records))


# Small setup: ~100 prey / ~10 predators, tuned for second-scale test runs.
DESK_DEFAULTS = IbmParameters()

# Large setup: same calibrated constants and rates, habitat areas scaled so
# the equilibrium sits near 2000 prey / 30 predators.
FULL_SCALE_DEFAULTS = replace(DESK_DEFAULTS, prey_area=80.0, pred_area=2.0)


class PredatorPreyModel(Model):
    """Engine adapter owning one realization's census, rates, and stream."""

    _KIND = "predator_prey"

    def __init__(self, defaults: IbmParameters = DESK_DEFAULTS,
                 initial_prey: int = 100, initial_predators: int = 10):
        if initial_prey < 0 or initial_predators < 0:
            raise ValidationError("initial counts must be >= 0")
        self._defaults = defaults
        self._initial = (int(initial_prey), int(initial_predators))
        self._params = defaults
        self._state: IbmState | None = None
        self._rng = None

    def init(self, parameters: Parameters, seed: int) -> None:
        self._params = self._defaults.with_calibrated(parameters)
        self._state = IbmState.initial(self._initial[0], self._initial[1], self._params.maturation_mass)
        self._rng = make_stream(seed)

    def run(self, target_time: float, seed: int | None = None) -> None:
        if self._state is None:
            raise ValidationError("model not initialized")
        target = int(target_time)
        if target != target_time or target < self._state.step:
            raise ValidationError(f"target time must be an integer >= {self._state.step}, got {target_time!r}")
        if seed is not None:
            self.reseed(seed)
        state, params, rng = self._state, self._params, self._rng
        while state.step < target:
            state = ibm_step(state, params, rng)
        self._state = state

    def observe(self, data: Mapping[str, Any]) -> float:
        return math.exp(self.log_observe(data))

    def log_observe(self, data: Mapping[str, Any]) -> float:
        if self._state is None:
            raise ValidationError("model not initialized")
        return ibm_log_observe(self._state, data, self._params)

    def save(self) -> bytes:
        state = self._state
        return encode_state_payload(
            self._KIND,
            {
                "params": None if self._params is None else {f.name: getattr(self._params, f.name) for f in fields(IbmParameters)},
                "initial": self._initial,
                "species": None if state is None else state.species,
                "stage": None if state is None else state.stage,
                "mass": None if state is None else state.mass,
                "step": None if state is None else state.step,
                "rng": None if self._rng is None else self._rng.bit_generator.state,
            },
        )

    def load(self, state: bytes) -> None:
        payload = decode_state_payload(self._KIND, state)
        self._params = IbmParameters(**payload["params"])
        self._initial = tuple(payload["initial"])
        if payload["species"] is None:
            self._state = None
        else:
            self._state = IbmState(
                np.asarray(payload["species"], np.uint8),
                np.asarray(payload["stage"], np.uint8),
                np.asarray(payload["mass"], np.float64),
                int(payload["step"]),
            )
        if payload["rng"] is None:
            self._rng = None
        else:
            # reuse a live generator when present, construction dominates load cost
            if self._rng is None:
                self._rng = make_stream(0)
            self._rng.bit_generator.state = payload["rng"]

    def reseed(self, seed: int) -> None:
        if self._rng is None:
            raise ValidationError("model not initialized")
        self._rng.bit_generator.state = philox_state(seed)

    @property
    def state(self) -> IbmState:
        if self._state is None:
            raise ValidationError("model not initialized")
        return self._state

    @property
    def params(self) -> IbmParameters:
        return self._params

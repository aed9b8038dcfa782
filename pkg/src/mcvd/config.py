"""Deployment scenario configuration.

A scenario TOML file has two tables:

``[simulation]``
    Physics and geometry shared by every distance of the scenario. Keys are the
    ``SimulationTemplate`` fields. ``symbol_duration`` may be omitted to use the
    ``0.1 * (d / 2) ** 2`` rule.
``[axes]``
    Grid axes for ``verify``, ``rate`` and ``sweep``. Every axis accepts a list
    or an inclusive range string ``"start:stop[:step]"``.

See ``configs/paper.toml`` for the reference deployment.
"""

import math
import tomllib
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pydantic
from pydantic import Field

from .errors import ConfigurationError


ReleasePoint = Literal["surface", "center"]
DistanceConvention = Literal["surface", "center"]

INSULIN_DIFFUSION_COEFFICIENT = 79.4  # um^2/s, insulin
BETA_CELL_RADIUS = 10.0  # um, pancreatic beta cell
INSULIN_RADIUS = 0.0025  # um, insulin hormone
DEFAULT_MOLECULES_PER_ONE = 50
DEFAULT_STEPS_PER_SLOT = 4000
MAX_SEED = 2**64 - 1


def reference_symbol_duration(distance: float) -> float:
    """Return the symbol duration rule ``0.1 * (d / 2) ** 2`` in seconds."""
    return 0.1 * (distance / 2.0) ** 2


class SimulationConfig(pydantic.BaseModel):
    """Geometry, physics and timing of one deployment scenario.

    Lengths are in micrometres, times in seconds. The receiver sits at the
    origin and the transmitter center on the positive x axis.

    Attributes
    ----------
    diffusion_coefficient : float
        D in um^2/s.
    receiver_radius, transmitter_radius, molecule_radius : float
        Body radii. A molecule is absorbed once its center comes within
        ``receiver_radius + molecule_radius`` of the receiver center.
    distance : float
        Surface-to-surface gap (``distance_convention="surface"``) or
        center-to-center distance (``"center"``).
    symbol_duration : float
        t_s.
    micro_step : float
        Brownian integration step. Defaults to ``t_s / 4000``. Rounded down so
        that an integer number of steps fills a slot.
    molecules_per_one : int
        Burst size for bit 1.
    molecules_per_zero : int
        Burst size for bit 0. Must be 0: the demodulation model assumes
        on-off keying with silent zero bits.
    rng_seed : int
        Master seed, unsigned 64-bit.
    release_point : {"surface", "center"}
        Molecules leave from the transmitter surface point nearest the
        receiver, or from the transmitter center.
    distance_convention : {"surface", "center"}
        Reading of ``distance``.
    """

    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    diffusion_coefficient: float = Field(ge=0)
    receiver_radius: float = Field(gt=0)
    transmitter_radius: float = Field(gt=0)
    molecule_radius: float = Field(gt=0)
    distance: float = Field(gt=0)
    symbol_duration: float = Field(gt=0)
    micro_step: float = Field(default=0.0, ge=0)
    molecules_per_one: int = Field(gt=0)
    molecules_per_zero: int = Field(default=0, ge=0)
    rng_seed: int = Field(default=0, ge=0, le=MAX_SEED)
    release_point: ReleasePoint = "surface"
    distance_convention: DistanceConvention = "surface"

    @pydantic.model_validator(mode="before")
    @classmethod
    def _default_micro_step(cls, data: Any) -> Any:
        """Fill in ``t_s / 4000`` when no micro step is given."""
        if isinstance(data, dict) and not data.get("micro_step"):
            data = dict(data)
            symbol_duration = data.get("symbol_duration")
            if isinstance(symbol_duration, (int, float)) and symbol_duration > 0:
                data["micro_step"] = symbol_duration / DEFAULT_STEPS_PER_SLOT
        return data

    @pydantic.model_validator(mode="after")
    def _check_geometry(self) -> "SimulationConfig":
        if self.molecules_per_zero != 0:
            raise ValueError(
                "molecules_per_zero must be 0; the channel model covers on-off "
                "keying only"
            )
        if self.molecule_radius >= self.receiver_radius:
            raise ValueError("molecule_radius must be smaller than receiver_radius")
        if not 0 < self.micro_step < self.symbol_duration:
            raise ValueError("micro_step must be positive and below symbol_duration")
        if self.distance_convention == "center" and self.distance <= (
            self.receiver_radius + self.transmitter_radius
        ):
            raise ValueError("center distance must exceed the sum of the node radii")
        if self.release_distance <= self.absorption_radius:
            raise ValueError("release point lies inside the absorption radius")
        return self

    @property
    def center_distance(self) -> float:
        """Distance between transmitter and receiver centers."""
        if self.distance_convention == "center":
            return self.distance
        return self.distance + self.receiver_radius + self.transmitter_radius

    @property
    def gap(self) -> float:
        """Surface-to-surface gap between the two nodes."""
        return self.center_distance - self.receiver_radius - self.transmitter_radius

    @property
    def absorption_radius(self) -> float:
        """Center distance at which a molecule touches the receiver."""
        return self.receiver_radius + self.molecule_radius

    @property
    def release_distance(self) -> float:
        """Distance from the release point to the receiver center."""
        if self.release_point == "center":
            return self.center_distance
        return self.center_distance - self.transmitter_radius

    @property
    def release_position(self) -> np.ndarray:
        """Release point as a 3-vector; the receiver center is the origin."""
        return np.array([self.release_distance, 0.0, 0.0])

    @property
    def steps_per_slot(self) -> int:
        """Whole micro steps per symbol slot."""
        return max(1, math.ceil(self.symbol_duration / self.micro_step - 1e-9))

    @property
    def effective_micro_step(self) -> float:
        """Micro step actually integrated, ``t_s / steps_per_slot``."""
        return self.symbol_duration / self.steps_per_slot

    @property
    def step_sigma(self) -> float:
        """Per-axis standard deviation of one Brownian step."""
        return math.sqrt(2.0 * self.diffusion_coefficient * self.effective_micro_step)

    def molecules_for_bit(self, bit: int) -> int:
        """Return the burst size for a transmitted bit."""
        return self.molecules_per_one if bit else self.molecules_per_zero

    def with_micro_step(self, micro_step: float) -> "SimulationConfig":
        """Return a copy with another integration step."""
        return SimulationConfig(**{**self.model_dump(), "micro_step": micro_step})

    @classmethod
    def reference_default(cls, distance: float, **overrides: Any) -> "SimulationConfig":
        """Build the pancreatic-islet deployment at gap ``distance`` (um)."""
        params: dict[str, Any] = {
            "diffusion_coefficient": INSULIN_DIFFUSION_COEFFICIENT,
            "receiver_radius": BETA_CELL_RADIUS,
            "transmitter_radius": BETA_CELL_RADIUS,
            "molecule_radius": INSULIN_RADIUS,
            "distance": distance,
            "symbol_duration": reference_symbol_duration(distance),
            "molecules_per_one": DEFAULT_MOLECULES_PER_ONE,
            "molecules_per_zero": 0,
        }
        params.update(overrides)
        return build_config(**params)


def build_config(**params: Any) -> SimulationConfig:
    """Validate parameters into a ``SimulationConfig``.

    Raises
    ------
    ConfigurationError
        Carries the pydantic validation message.
    """
    try:
        return SimulationConfig(**params)
    except pydantic.ValidationError as exc:
        raise ConfigurationError(f"Invalid simulation config: {exc}") from exc


def _parse_range(value: str, cast: type) -> list[Any]:
    """Parse an inclusive ``start:stop[:step]`` range or a comma separated list."""
    if ":" not in value:
        return [cast(_item) for _item in value.split(",") if _item.strip()]

    parts = value.split(":")
    if len(parts) not in (2, 3):
        raise ValueError(f"Invalid range '{value}'. Expected start:stop[:step]")

    start, stop = float(parts[0]), float(parts[1])
    step = float(parts[2]) if len(parts) == 3 else 1.0
    if step <= 0 or stop < start:
        raise ValueError(f"Invalid range '{value}'")

    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    values = start + step * np.arange(count)
    if cast is int:
        return [int(round(_value)) for _value in values]
    return [round(float(_value), 12) for _value in values]


class SimulationTemplate(pydantic.BaseModel):
    """``[simulation]`` table: a ``SimulationConfig`` without the distance."""

    model_config = pydantic.ConfigDict(extra="forbid")

    diffusion_coefficient: float = INSULIN_DIFFUSION_COEFFICIENT
    receiver_radius: float = BETA_CELL_RADIUS
    transmitter_radius: float = BETA_CELL_RADIUS
    molecule_radius: float = INSULIN_RADIUS
    symbol_duration: float | None = None
    micro_steps_per_slot: int = Field(default=DEFAULT_STEPS_PER_SLOT, ge=1)
    molecules_per_one: int = DEFAULT_MOLECULES_PER_ONE
    molecules_per_zero: int = 0
    release_point: ReleasePoint = "surface"
    distance_convention: DistanceConvention = "surface"

    def for_distance(self, distance: float, seed: int = 0) -> SimulationConfig:
        """Resolve the template at one distance."""
        symbol_duration = self.symbol_duration or reference_symbol_duration(distance)
        params = self.model_dump(exclude={"micro_steps_per_slot"})
        params.update(
            distance=distance,
            symbol_duration=symbol_duration,
            micro_step=symbol_duration / self.micro_steps_per_slot,
            rng_seed=seed,
        )
        return build_config(**params)


class ScenarioAxes(pydantic.BaseModel):
    """``[axes]`` table: grid axes of an experiment."""

    model_config = pydantic.ConfigDict(extra="forbid")

    distances: list[float] = [4.0, 8.0, 12.0, 16.0, 20.0, 24.0]
    etas: list[int] = [1, 5, 9, 13]
    rate_etas: list[int] = [1, 14]
    taus: list[int] = list(range(1, 51))
    p_ones: list[float] = _parse_range("0.05:0.95:0.05", float)
    alphas: list[float] = [0.01, 0.05]

    @pydantic.field_validator("distances", "p_ones", "alphas", mode="before")
    @classmethod
    def _float_range(cls, value: Any) -> Any:
        return _parse_range(value, float) if isinstance(value, str) else value

    @pydantic.field_validator("etas", "rate_etas", "taus", mode="before")
    @classmethod
    def _int_range(cls, value: Any) -> Any:
        return _parse_range(value, int) if isinstance(value, str) else value

    @pydantic.model_validator(mode="after")
    def _check_axes(self) -> "ScenarioAxes":
        for name in ("distances", "etas", "rate_etas", "taus", "p_ones", "alphas"):
            if not getattr(self, name):
                raise ValueError(f"axis '{name}' must not be empty")
        if any(_d <= 0 for _d in self.distances):
            raise ValueError("distances must be positive")
        if any(_eta < 0 for _eta in [*self.etas, *self.rate_etas]):
            raise ValueError("etas must be non-negative")
        if any(_tau < 0 for _tau in self.taus):
            raise ValueError("taus must be non-negative")
        if any(not 0 <= _p <= 1 for _p in self.p_ones):
            raise ValueError("p_ones must lie in [0, 1]")
        if any(not 0 < _a < 1 for _a in self.alphas):
            raise ValueError("alphas must lie in (0, 1)")
        return self


class ScenarioFile(pydantic.BaseModel):
    """Parsed scenario TOML file."""

    model_config = pydantic.ConfigDict(extra="forbid")

    simulation: SimulationTemplate = SimulationTemplate()
    axes: ScenarioAxes = ScenarioAxes()


def load_scenario(path: str | Path | None) -> ScenarioFile:
    """Load a scenario TOML file; ``None`` returns the reference defaults.

    Raises
    ------
    ConfigurationError
        When the file is missing, is not valid TOML or fails validation.
    """
    if path is None:
        return ScenarioFile()

    try:
        with open(path, "rb") as file:
            raw = tomllib.load(file)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"Config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"Config file {path} is not valid TOML: {exc}") from exc

    try:
        return ScenarioFile.model_validate(raw)
    except pydantic.ValidationError as exc:
        raise ConfigurationError(f"Invalid config file {path}: {exc}") from exc

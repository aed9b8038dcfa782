"""Lazily built, cached inputs shared by the commands of one experiment."""

import logging

from src.utils import Configs

from .channel import (
    ChannelCoefficients,
    DemodulationModel,
    analytical_coefficients,
    demod_prob_tables,
)
from .config import ScenarioFile, SimulationConfig
from .diffusion import estimate_channel_coefficients
from .rng import derive_seed


logger = logging.getLogger(__name__)


class ExperimentContext:
    """Resolves scenarios, coefficients and demodulation tables on first use.

    Parameters
    ----------
    scenario : ScenarioFile
        Simulation template and axes.
    seed : int
        Master seed of the experiment.
    n_molecules : int
        Burst size for Monte Carlo coefficient estimates.
    configs : Configs | None, optional, default=None
        Runtime settings. If None, a new ``Configs()`` is created.

    Examples
    --------
    >>> context = ExperimentContext(ScenarioFile(), seed=0, n_molecules=10_000)
    >>> coefficients = context.coefficients(4.0, eta=14, provenance="analytical")
    """

    def __init__(
        self,
        scenario: ScenarioFile,
        seed: int,
        n_molecules: int,
        configs: Configs | None = None,
    ) -> None:
        """Initialize the context; nothing is computed yet."""
        self.scenario = scenario
        self.seed = seed
        self.n_molecules = n_molecules
        self._configs = configs
        self._simulation_configs: dict[float, SimulationConfig] = {}
        self._coefficients: dict[tuple[float, str], ChannelCoefficients] = {}
        self._tables: dict[tuple[float, str, int, int], DemodulationModel] = {}

    @property
    def configs(self) -> Configs:
        """Get or create configs instance."""
        if self._configs is None:
            self._configs = Configs()  # pyright: ignore[reportCallIssue]
        return self._configs

    @property
    def distances(self) -> list[float]:
        """Distances of the scenario axes."""
        return self.scenario.axes.distances

    def distance_index(self, distance: float) -> int:
        """Position of ``distance`` on the axis; keys the random streams."""
        return self.distances.index(distance)

    def simulation_config(self, distance: float) -> SimulationConfig:
        """Get or create the scenario at one distance."""
        if distance not in self._simulation_configs:
            self._simulation_configs[distance] = self.scenario.simulation.for_distance(
                distance, seed=derive_seed(self.seed, "sequence", self.distance_index(distance))
            )
        return self._simulation_configs[distance]

    def coefficients(
        self, distance: float, eta: int, provenance: str
    ) -> ChannelCoefficients:
        """Get or create ``p_0..p_eta``.

        One vector per ``(distance, provenance)`` is kept at the largest
        horizon requested so far; shorter requests are truncations of it.
        """
        key = (distance, provenance)
        cached = self._coefficients.get(key)
        if cached is None or cached.eta < eta:
            cached = self._build_coefficients(distance, eta, provenance)
            self._coefficients[key] = cached
        return cached.truncate(eta)

    def _build_coefficients(
        self, distance: float, eta: int, provenance: str
    ) -> ChannelCoefficients:
        cfg = self.simulation_config(distance)
        if provenance == "analytical":
            return analytical_coefficients(cfg, eta)

        logger.info("Estimating p_0..p_%d at d=%s by particle tracking", eta, distance)
        return estimate_channel_coefficients(
            cfg,
            eta,
            self.n_molecules,
            n_repetitions=1,
            seed=derive_seed(self.seed, "coefficients", self.distance_index(distance)),
            configs=self.configs,
        )

    def demodulation_models(
        self, distance: float, eta: int, provenance: str, taus: list[int]
    ) -> dict[int, DemodulationModel]:
        """Get or create the tables ``P(y=0|w)`` for several thresholds."""
        missing = [
            _tau for _tau in taus if (distance, provenance, eta, _tau) not in self._tables
        ]
        if missing:
            built = demod_prob_tables(
                self.coefficients(distance, eta, provenance),
                self.simulation_config(distance).molecules_per_one,
                missing,
            )
            for _tau, _model in built.items():
                self._tables[(distance, provenance, eta, _tau)] = _model
        return {_tau: self._tables[(distance, provenance, eta, _tau)] for _tau in taus}

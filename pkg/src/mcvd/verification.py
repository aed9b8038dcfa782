"""Pearson chi-square verification of the demodulation model.

One pooled test per scenario: every observed ``(window, y)`` cell is compared
against ``occurrences(window) * P(y | window)`` from a ``DemodulationModel``.
Cells with an expected count below ``MIN_EXPECTED`` are merged, smallest
first, into the cell of the same window with the opposite output, or else
into the group whose representative window is nearest in Hamming distance
(lowest window index on ties).
"""

import functools
import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Literal, Sequence

import numpy as np
import pandas as pd
import pydantic
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from src.utils import Configs, run_in_threads

from .channel import (
    ChannelCoefficients,
    DemodulationModel,
    analytical_coefficients,
    demod_prob_tables,
    demodulate_counts,
    ones_per_window,
    window_key,
)
from .config import SimulationConfig
from .diffusion import (
    Engine,
    TransmissionTrace,
    estimate_channel_coefficients,
    random_bits,
    simulate_sequence,
)
from .errors import ConfigurationError, TestInapplicableError
from .rng import derive_seed


logger = logging.getLogger(__name__)

MIN_EXPECTED = 5.0
Provenance = Literal["analytical", "monte-carlo"]
FIT_GRID_COLUMNS = ["d", "eta", "tau", "alpha", "ratio", "n_tested", "n_excluded"]


@dataclass(slots=True)
class WindowCounts:
    """Observed ``y = 0`` / ``y = 1`` counts per input window.

    ``counts[w, y]`` with ``w`` the window integer (oldest bit most
    significant).
    """

    eta: int
    tau: int
    counts: np.ndarray

    def __post_init__(self) -> None:
        """Validate the table shape."""
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (2 ** (self.eta + 1), 2):
            raise ValueError(
                f"counts must have shape ({2 ** (self.eta + 1)}, 2), "
                f"got {self.counts.shape}"
            )
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    @property
    def occurrences(self) -> np.ndarray:
        """Number of times each window was observed."""
        return self.counts.sum(axis=1)

    @property
    def n_observations(self) -> int:
        """Number of demodulated slots counted."""
        return int(self.counts.sum())

    @property
    def observed_windows(self) -> np.ndarray:
        """Window indices with at least one observation."""
        return np.flatnonzero(self.occurrences)

    def __add__(self, other: "WindowCounts") -> "WindowCounts":
        """Pool observations of two traces."""
        if (other.eta, other.tau) != (self.eta, self.tau):
            raise ValueError("can only pool counts with equal eta and tau")
        return WindowCounts(self.eta, self.tau, self.counts + other.counts)


class GofResult(pydantic.BaseModel):
    """Outcome of one Pearson chi-square test."""

    statistic: float = pydantic.Field(ge=0)
    dof: int = pydantic.Field(ge=0)
    p_value: float = pydantic.Field(ge=0, le=1)
    alpha: float = pydantic.Field(gt=0, lt=1)
    good_fit: bool
    cells_merged: int = 0
    n_cells: int = 0

    @pydantic.model_validator(mode="after")
    def _check_verdict(self) -> "GofResult":
        if self.good_fit != (self.p_value > self.alpha):
            raise ValueError("good_fit must equal p_value > alpha")
        return self


def collect_window_counts(
    trace: TransmissionTrace, eta: int, tau: int
) -> WindowCounts:
    """Tabulate ``(window, y)`` over a trace demodulated with threshold ``tau``.

    Slots without a full window of history (the first ``eta``) are skipped.
    """
    n = len(trace)
    if eta < 0 or n <= eta:
        raise ConfigurationError(
            f"Trace of length {n} is too short for eta={eta}"
        )

    windows = sliding_window_view(trace.tx_bits.astype(np.int64), eta + 1)
    weights = np.left_shift(1, np.arange(eta, -1, -1, dtype=np.int64))
    indices = windows @ weights
    outputs = demodulate_counts(trace.rx_counts[eta:], tau).astype(np.int64)

    n_windows = 2 ** (eta + 1)
    counts = np.bincount(2 * indices + outputs, minlength=2 * n_windows)
    return WindowCounts(eta, tau, counts.reshape(n_windows, 2))


def _find(parent: np.ndarray, cell: int) -> int:
    root = cell
    while parent[root] != root:
        root = parent[root]
    while parent[cell] != root:
        parent[cell], cell = root, parent[cell]
    return root


def merge_low_expectation_cells(
    observed: np.ndarray,
    expected: np.ndarray,
    windows: np.ndarray,
    outputs: np.ndarray,
    eta: int,
    threshold: float = MIN_EXPECTED,
) -> tuple[np.ndarray, np.ndarray]:
    """Merge cells until every group reaches ``threshold`` or one group is left.

    Cells must be sorted by ``(window, output)``; a group is represented by
    the cell it started from, so ties on distance go to the lowest window.

    Returns
    -------
    tuple[np.ndarray, np.ndarray]
        Observed and expected totals of the surviving groups.
    """
    n_cells = observed.size
    group_observed = observed.astype(float)
    group_expected = expected.astype(float)
    if n_cells == 0:
        return group_observed, group_expected

    parent = np.arange(n_cells)
    alive = np.ones(n_cells, dtype=bool)
    popcount = ones_per_window(eta)
    cell_of = {
        (int(_w), int(_y)): _i for _i, (_w, _y) in enumerate(zip(windows, outputs))
    }
    order = np.arange(n_cells)

    heap = [(float(_e), _i) for _i, _e in enumerate(group_expected) if _e < threshold]
    heapq.heapify(heap)
    n_alive = n_cells

    while heap and n_alive > 1:
        value, group = heapq.heappop(heap)
        if not alive[group] or value != group_expected[group]:
            continue

        window, output = int(windows[group]), int(outputs[group])
        target = -1
        sibling = cell_of.get((window, 1 - output))
        if sibling is not None:
            root = _find(parent, sibling)
            if root != group:
                target = root
        if target < 0:
            distance = popcount[windows ^ window].astype(np.int64)
            key = np.where(alive & (order != group), distance * n_cells + order, -1)
            key = np.where(key < 0, np.iinfo(np.int64).max, key)
            target = int(np.argmin(key))

        parent[group] = target
        alive[group] = False
        group_observed[target] += group_observed[group]
        group_expected[target] += group_expected[group]
        n_alive -= 1
        if group_expected[target] < threshold:
            heapq.heappush(heap, (float(group_expected[target]), target))

    return group_observed[alive], group_expected[alive]


def _cells(
    obs: WindowCounts, model: DemodulationModel
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Observed and expected counts of every cell of the observed windows."""
    observed_windows = obs.observed_windows
    occurrences = obs.occurrences[observed_windows].astype(float)
    p_zero = model.p_zero[observed_windows]

    windows = np.repeat(observed_windows, 2)
    outputs = np.tile([0, 1], observed_windows.size)
    observed = obs.counts[observed_windows].reshape(-1).astype(float)
    expected = np.column_stack(
        [occurrences * p_zero, occurrences * (1.0 - p_zero)]
    ).reshape(-1)
    return observed, expected, windows, outputs


def chi_square_gof(
    obs: WindowCounts, model: DemodulationModel, alpha: float
) -> GofResult:
    """Pooled Pearson chi-square test of observations against a model.

    Cells with zero expectation and positive observations make the statistic
    infinite; they are never merged. Empty impossible cells are dropped.

    Raises
    ------
    ConfigurationError
        When the window lengths differ.
    TestInapplicableError
        When fewer than two groups remain after merging.
    """
    if model.eta != obs.eta:
        raise ConfigurationError(
            f"Model eta={model.eta} does not match observation eta={obs.eta}"
        )

    observed, expected, windows, outputs = _cells(obs, model)
    impossible = expected <= 0
    n_divergent = int(np.count_nonzero(impossible & (observed > 0)))
    keep = ~impossible

    merged_observed, merged_expected = merge_low_expectation_cells(
        observed[keep], expected[keep], windows[keep], outputs[keep], obs.eta
    )
    n_groups = merged_observed.size + n_divergent
    if n_groups < 2:
        raise TestInapplicableError(
            f"Only {n_groups} chi-square cell(s) left after merging "
            f"(eta={obs.eta}, tau={obs.tau}, {obs.n_observations} observations)"
        )

    dof = n_groups - 1
    if n_divergent:
        statistic, p_value = float("inf"), 0.0
    else:
        statistic = float(
            np.sum((merged_observed - merged_expected) ** 2 / merged_expected)
        )
        p_value = float(np.clip(stats.chi2.sf(statistic, dof), 0.0, 1.0))

    return GofResult(
        statistic=statistic,
        dof=dof,
        p_value=p_value,
        alpha=alpha,
        good_fit=p_value > alpha,
        cells_merged=int(np.count_nonzero(keep)) - merged_observed.size,
        n_cells=observed.size,
    )


def per_window_gof(
    obs: WindowCounts, model: DemodulationModel, alpha: float
) -> dict[str, GofResult]:
    """Two-cell chi-square test of every window with both expectations >= 5.

    Returns
    -------
    dict[str, GofResult]
        Keyed by window bit-string; untestable windows are absent.
    """
    if model.eta != obs.eta:
        raise ConfigurationError(
            f"Model eta={model.eta} does not match observation eta={obs.eta}"
        )

    results: dict[str, GofResult] = {}
    for _window in obs.observed_windows:
        occurrences = float(obs.occurrences[_window])
        p_zero = float(model.p_zero[_window])
        expected = np.array([occurrences * p_zero, occurrences * (1.0 - p_zero)])
        if expected.min() < MIN_EXPECTED:
            continue

        statistic = float(np.sum((obs.counts[_window] - expected) ** 2 / expected))
        p_value = float(np.clip(stats.chi2.sf(statistic, 1), 0.0, 1.0))
        results[window_key(int(_window), obs.eta)] = GofResult(
            statistic=statistic,
            dof=1,
            p_value=p_value,
            alpha=alpha,
            good_fit=p_value > alpha,
            n_cells=2,
        )
    return results


@dataclass(slots=True)
class FitGrid:
    """Per-test outcomes of a verification grid and their aggregate views.

    ``records`` has one row per ``(d, eta, tau, alpha, rep)`` with columns
    ``p_value``, ``statistic``, ``dof``, ``good_fit`` and ``excluded``;
    excluded rows carry NaN statistics.
    """

    records: pd.DataFrame
    metadata: dict[str, Any] = field(default_factory=dict)

    def _ratio(self, by: Sequence[str]) -> pd.DataFrame:
        frame = self.records.assign(
            tested=~self.records["excluded"],
            good=self.records["good_fit"] & ~self.records["excluded"],
        )
        grouped = frame.groupby(list(by), sort=True).agg(
            n_good=("good", "sum"),
            n_tested=("tested", "sum"),
            n_excluded=("excluded", "sum"),
        )
        grouped["ratio"] = grouped["n_good"] / grouped["n_tested"].where(
            grouped["n_tested"] > 0
        )
        grouped = grouped.astype({"n_tested": int, "n_excluded": int})
        return grouped.reset_index()[[*by, "ratio", "n_tested", "n_excluded"]]

    def to_frame(self) -> pd.DataFrame:
        """Long format: good-fit ratio per ``(d, eta, tau, alpha)``."""
        return self._ratio(["d", "eta", "tau", "alpha"])[FIT_GRID_COLUMNS]

    def ratio_vs_eta(self) -> pd.DataFrame:
        """Ratio per ``(alpha, eta)`` over all distances and thresholds."""
        return self._ratio(["alpha", "eta"])

    def ratio_vs_eta_distance(self) -> pd.DataFrame:
        """Ratio per ``(alpha, eta, d)`` over all thresholds."""
        return self._ratio(["alpha", "eta", "d"])

    def ratio_vs_tau_distance(self) -> pd.DataFrame:
        """Ratio per ``(alpha, eta, tau, d)`` over repetitions."""
        return self._ratio(["alpha", "eta", "tau", "d"])


def _grid_coefficients(
    cfg: SimulationConfig,
    eta: int,
    provenance: Provenance,
    n_molecules: int,
    n_repetitions: int,
    seed: int,
    configs: Configs,
) -> ChannelCoefficients:
    if provenance == "analytical":
        return analytical_coefficients(cfg, eta)
    return estimate_channel_coefficients(
        cfg, eta, n_molecules, n_repetitions, seed, configs
    )


def _score_trace(
    cfg: SimulationConfig,
    distance_index: int,
    repetition: int,
    tables: dict[int, dict[int, DemodulationModel]],
    alphas: Sequence[float],
    n_bits: int,
    p_one: float,
    engine: Engine,
    max_delay_slots: int | None,
    seed: int,
    configs: Configs,
) -> list[dict[str, Any]]:
    """Simulate one trace and test it against every ``(eta, tau)`` table."""
    cell_seed = derive_seed(seed, "grid", distance_index, repetition)
    tx_bits = random_bits(n_bits, p_one, cell_seed)
    trace = simulate_sequence(
        cfg,
        tx_bits,
        engine=engine,
        max_delay_slots=max_delay_slots,
        seed=cell_seed,
        configs=configs,
    )

    rows: list[dict[str, Any]] = []
    for _eta, _models in tables.items():
        for _tau, _model in _models.items():
            obs = collect_window_counts(trace, _eta, _tau)
            try:
                result: GofResult | None = chi_square_gof(obs, _model, alphas[0])
            except TestInapplicableError:
                result = None

            for _alpha in alphas:
                rows.append(
                    {
                        "d": cfg.distance,
                        "eta": _eta,
                        "tau": _tau,
                        "alpha": _alpha,
                        "rep": repetition,
                        "excluded": result is None,
                        "good_fit": result is not None and result.p_value > _alpha,
                        "p_value": np.nan if result is None else result.p_value,
                        "statistic": np.nan if result is None else result.statistic,
                        "dof": -1 if result is None else result.dof,
                    }
                )
    return rows


def run_fit_grid(
    configs_by_distance: Sequence[SimulationConfig],
    etas: Sequence[int],
    taus: Sequence[int],
    alphas: Sequence[float],
    n_repetitions: int,
    n_bits: int,
    seed: int,
    p_one: float = 0.5,
    engine: Engine = "delay-sampling",
    provenance: Provenance = "analytical",
    n_molecules: int = 10_000,
    max_delay_slots: int | None = None,
    configs: Configs | None = None,
) -> FitGrid:
    """Good-fit ratios over distances, windows, thresholds and significance levels.

    For every distance and repetition one trace of ``n_bits`` i.i.d. bits is
    simulated; it is tested against the model tables of every
    ``(eta, tau)`` built from ``provenance`` coefficients. Tests with fewer
    than two cells after merging are excluded and listed in the metadata.

    Parameters
    ----------
    configs_by_distance : Sequence[SimulationConfig]
        One scenario per distance.
    etas, taus, alphas : Sequence
        Grid axes.
    n_repetitions : int
        Traces per distance.
    n_bits : int
        Trace length.
    seed : int
        Master seed; each ``(distance, repetition)`` derives its own streams.
    p_one : float
        Input bit probability of the simulated traces.
    engine : {"tracking", "delay-sampling"}
        Trace simulator.
    provenance : {"analytical", "monte-carlo"}
        Source of the model coefficients.
    n_molecules : int
        Burst size per repetition for Monte Carlo coefficients.
    max_delay_slots : int | None
        Slots a burst is followed for; ``None`` follows it to the end of the
        trace.
    configs : Configs | None
        Runtime settings.

    Returns
    -------
    FitGrid
    """
    if not (configs_by_distance and etas and taus and alphas):
        raise ConfigurationError("Fit grid axes must not be empty")
    if n_repetitions < 1 or n_bits <= max(etas):
        raise ConfigurationError(
            f"Need n_repetitions >= 1 and n_bits > max(eta), got "
            f"{n_repetitions}, {n_bits}"
        )

    configs = configs if configs is not None else Configs()
    etas = sorted(set(etas))
    alphas = sorted(set(alphas))
    tasks = []
    for _d_index, _cfg in enumerate(configs_by_distance):
        coefficients = _grid_coefficients(
            _cfg, etas[-1], provenance, n_molecules, n_repetitions, seed, configs
        )
        tables = {
            _eta: demod_prob_tables(
                coefficients.truncate(_eta), _cfg.molecules_per_one, taus
            )
            for _eta in etas
        }
        tasks.extend(
            functools.partial(
                _score_trace,
                _cfg,
                _d_index,
                _rep,
                tables,
                alphas,
                n_bits,
                p_one,
                engine,
                max_delay_slots,
                seed,
                configs,
            )
            for _rep in range(n_repetitions)
        )

    rows = [
        _row
        for _rows in run_in_threads(
            tasks, max_workers=configs.max_workers, description="Fit grid"
        )
        for _row in _rows
    ]
    records = pd.DataFrame(rows).sort_values(
        ["d", "eta", "tau", "alpha", "rep"], ignore_index=True
    )

    excluded = records.loc[
        records["excluded"] & (records["alpha"] == alphas[0]), ["d", "eta", "tau", "rep"]
    ]
    if not excluded.empty:
        logger.warning(
            "%d chi-square test(s) had fewer than two cells and were excluded",
            len(excluded),
        )

    return FitGrid(
        records=records,
        metadata={
            "n_bits": n_bits,
            "n_repetitions": n_repetitions,
            "p_one": p_one,
            "engine": engine,
            "max_delay_slots": max_delay_slots,
            "provenance": provenance,
            "seed": seed,
            "min_expected": MIN_EXPECTED,
            "excluded": excluded.to_dict(orient="records"),
        },
    )

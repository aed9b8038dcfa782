"""Achievable rate of the ISI channel under i.i.d. inputs.

The channel is a finite-state machine whose state is the last ``eta + 1``
input bits. ``I(X; Y) = H(Y) - H(Y|X)``: the conditional term is exact, the
output entropy rate is estimated from one long simulated output sequence per
seed with the normalised forward recursion.
"""

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd
import pydantic
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from src.utils import run_in_threads

from .channel import DemodulationModel, window_probabilities
from .errors import ConfigurationError, InconsistentModelError
from .rng import derive_generator


logger = logging.getLogger(__name__)

RATE_SURFACE_COLUMNS = ["tau", "p_one", "I_bits_per_use", "std_err"]


class InputDistribution(pydantic.BaseModel):
    """I.i.d. input law, ``P(x = 1) = p_one``."""

    model_config = pydantic.ConfigDict(frozen=True)

    p_one: float = pydantic.Field(ge=0, le=1)

    @property
    def probs(self) -> np.ndarray:
        """``[P(x=0), P(x=1)]``."""
        return np.array([1.0 - self.p_one, self.p_one])


def binary_entropy(p: float | np.ndarray) -> float | np.ndarray:
    """Binary entropy in bits; ``H_b(0) = H_b(1) = 0``."""
    values = (special.entr(p) + special.entr(1.0 - np.asarray(p))) / math.log(2)
    return float(values) if np.ndim(values) == 0 else values


@dataclass(frozen=True, slots=True)
class ChannelStateMachine:
    """States are windows ``(x_{r-eta}, ..., x_r)``, oldest bit most significant.

    Input ``x`` moves state ``s`` to ``((s << 1) & mask) | x``; state ``s``
    emits ``y = 0`` with probability ``p_zero[s]``.
    """

    eta: int
    p_zero: np.ndarray
    input: InputDistribution

    @classmethod
    def from_model(
        cls, model: DemodulationModel, input_dist: InputDistribution
    ) -> "ChannelStateMachine":
        """Build the machine of a demodulation model."""
        return cls(model.eta, model.p_zero, input_dist)

    @property
    def n_states(self) -> int:
        """``2 ** (eta + 1)``."""
        return 2 ** (self.eta + 1)

    def next_state(self, state: int, bit: int) -> int:
        """Shift a new input into the window."""
        return ((state << 1) & (self.n_states - 1)) | bit

    @property
    def emission_probs(self) -> np.ndarray:
        """``P(y | s)``, shape ``(n_states, 2)``."""
        return np.column_stack([self.p_zero, 1.0 - self.p_zero])

    def transition_matrix(self) -> np.ndarray:
        """Dense ``P(s' | s)``; only meant for small ``eta``."""
        matrix = np.zeros((self.n_states, self.n_states))
        for _state in range(self.n_states):
            for _bit, _prob in enumerate(self.input.probs):
                matrix[_state, self.next_state(_state, _bit)] += _prob
        return matrix

    def forward_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """``P(x) P(y | s')`` per output, reshaped to ``(n_states / 2, 2)``.

        Row ``j`` holds the two states whose predecessors are ``j`` and
        ``j + n_states / 2``; column ``x`` is the newest bit.
        """
        half = self.n_states // 2
        prior = self.input.probs[None, :]
        return (
            prior * self.p_zero.reshape(half, 2),
            prior * (1.0 - self.p_zero).reshape(half, 2),
        )


class RateEstimate(pydantic.BaseModel):
    """Mutual information rate of one ``(tau, p_one)`` cell, bits per use."""

    mutual_information: float
    std_err: float
    output_entropy: float
    conditional_entropy: float
    n: int
    seeds: list[int]
    per_seed: list[float] = []


def conditional_entropy_rate(
    model: DemodulationModel, input_dist: InputDistribution
) -> float:
    """Exact ``H(Y|X) = sum_w Pr(w) H_b(P(y=0|w))``."""
    probs = window_probabilities(model.eta, input_dist.p_one)
    return float(np.dot(probs, binary_entropy(model.p_zero)))


def output_entropy_upper_bound(
    model: DemodulationModel, input_dist: InputDistribution
) -> float:
    """Upper bound on the mutual information rate.

    ``min(H_b(P(y=1)) - H(Y|X), H_b(p_one))``; the output entropy rate never
    exceeds the entropy of a single output.
    """
    probs = window_probabilities(model.eta, input_dist.p_one)
    p_one_out = float(np.dot(probs, 1.0 - model.p_zero))
    bound = binary_entropy(p_one_out) - conditional_entropy_rate(model, input_dist)
    return float(min(bound, binary_entropy(input_dist.p_one)))


def _windows(bits: np.ndarray, eta: int) -> np.ndarray:
    """Window index of every slot, assuming an all-zero history."""
    padded = np.concatenate([np.zeros(eta, dtype=np.int64), bits.astype(np.int64)])
    weights = np.left_shift(1, np.arange(eta, -1, -1, dtype=np.int64))
    return sliding_window_view(padded, eta + 1) @ weights


def sample_output_sequence(
    model: DemodulationModel,
    input_dist: InputDistribution,
    n: int,
    seed: int,
    *indices: int,
) -> np.ndarray:
    """Draw ``x_1..x_n`` i.i.d. and return the demodulated ``y_1..y_n`` only."""
    if n < 1:
        raise ConfigurationError(f"n must be positive, got {n}")

    rng = derive_generator(seed, "entropy", *indices)
    tx_bits = (rng.random(n) < input_dist.p_one).astype(np.int64)
    p_zero = model.p_zero[_windows(tx_bits, model.eta)]
    return (rng.random(n) >= p_zero).astype(np.int8)


def forward_log_likelihood(
    y: Sequence[int] | np.ndarray,
    model: DemodulationModel,
    input_dist: InputDistribution,
    burn_in: int = 0,
) -> float:
    """``log2 p(y_{burn_in+1..n} | y_1..y_burn_in)`` by the forward recursion.

    The recursion starts from the all-zero state and is renormalised after
    every slot; with ``burn_in = 0`` this is ``log2 p(y^n)``.

    Raises
    ------
    InconsistentModelError
        When an output has zero probability given the preceding ones.
    """
    outputs = np.asarray(y, dtype=np.int64)
    if outputs.ndim != 1 or outputs.size == 0:
        raise ConfigurationError("y must be a non-empty bit vector")
    if not 0 <= burn_in < outputs.size:
        raise ConfigurationError(
            f"burn_in must lie in [0, {outputs.size}), got {burn_in}"
        )

    machine = ChannelStateMachine.from_model(model, input_dist)
    weights = machine.forward_weights()
    half = machine.n_states // 2
    alpha = np.zeros(machine.n_states)
    alpha[0] = 1.0
    log_mass = 0.0

    for _slot, _y in enumerate(outputs):
        merged = alpha[:half] + alpha[half:]
        alpha = (merged[:, None] * weights[_y]).reshape(-1)
        mass = alpha.sum()
        if not mass > 0:
            raise InconsistentModelError(
                f"Output y={_y} at slot {_slot} is impossible under the model "
                f"(eta={model.eta}, tau={model.tau}, p_one={input_dist.p_one})"
            )
        alpha /= mass
        if _slot >= burn_in:
            log_mass += math.log2(mass)
    return log_mass


def default_burn_in(eta: int, n: int) -> int:
    """``10 (eta + 1)`` slots, or none for sequences shorter than twice that."""
    burn_in = 10 * (eta + 1)
    return burn_in if n > 2 * burn_in else 0


def forward_entropy_estimate(
    y: Sequence[int] | np.ndarray,
    model: DemodulationModel,
    input_dist: InputDistribution,
    burn_in: int | None = None,
) -> float:
    """Sample entropy rate ``-(1/n) log2 p(y^n)`` after a burn-in."""
    n = len(y)
    burn_in = default_burn_in(model.eta, n) if burn_in is None else burn_in
    return -forward_log_likelihood(y, model, input_dist, burn_in) / (n - burn_in)


def _entropy_for_seed(
    model: DemodulationModel,
    input_dist: InputDistribution,
    n: int,
    seed: int,
    index: int,
    burn_in: int | None,
) -> float:
    y = sample_output_sequence(model, input_dist, n, seed, index)
    return forward_entropy_estimate(y, model, input_dist, burn_in)


def mutual_information_rate(
    model: DemodulationModel,
    input_dist: InputDistribution,
    n: int,
    seed: int,
    n_seeds: int = 1,
    burn_in: int | None = None,
    tolerance: float | None = None,
    max_workers: int = 1,
) -> RateEstimate:
    """Estimate ``I = H(Y) - H(Y|X)`` from ``n_seeds`` independent sequences.

    Every cell uses the same entropy streams ``0..n_seeds-1`` of ``seed``, so
    estimates of neighbouring cells share their randomness.
    The standard error is the cross-seed standard deviation over
    ``sqrt(n_seeds)``; it is NaN for a single seed.
    """
    if n_seeds < 1:
        raise ConfigurationError(f"n_seeds must be positive, got {n_seeds}")

    conditional = conditional_entropy_rate(model, input_dist)
    per_seed = run_in_threads(
        [
            functools.partial(
                _entropy_for_seed, model, input_dist, n, seed, _index, burn_in
            )
            for _index in range(n_seeds)
        ],
        max_workers=max_workers,
        description="Entropy seeds",
        disable_progress=True,
    )
    entropies = np.asarray(per_seed)
    std_err = (
        float(entropies.std(ddof=1) / math.sqrt(n_seeds)) if n_seeds > 1 else math.nan
    )
    if tolerance is not None and std_err > tolerance:
        logger.warning(
            "Entropy std_err %.3g exceeds tolerance %.3g (tau=%d, p_one=%.3g)",
            std_err,
            tolerance,
            model.tau,
            input_dist.p_one,
        )

    output_entropy = float(entropies.mean())
    return RateEstimate(
        mutual_information=output_entropy - conditional,
        std_err=std_err,
        output_entropy=output_entropy,
        conditional_entropy=conditional,
        n=n,
        seeds=list(range(n_seeds)),
        per_seed=entropies.tolist(),
    )


@dataclass(slots=True)
class RateSurface:
    """Mutual information over the ``(tau, p_one)`` grid of one scenario.

    ``frame`` has columns ``tau``, ``p_one``, ``I_bits_per_use``, ``std_err``,
    ``upper_bound`` and ``evaluated``; pruned cells hold NaN estimates.
    """

    frame: pd.DataFrame
    eta: int
    symbol_duration: float
    n: int
    seeds: list[int]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def argmax(self) -> tuple[int, float]:
        """``(tau, p_one)`` of the best cell.

        Ties go to the smallest ``tau``, then to ``p_one`` closest to 0.5.
        """
        evaluated = self.frame[self.frame["evaluated"]]
        ranked = evaluated.assign(
            _distance=(evaluated["p_one"] - 0.5).abs()
        ).sort_values(
            ["I_bits_per_use", "tau", "_distance"],
            ascending=[False, True, True],
            kind="stable",
        )
        best = ranked.iloc[0]
        return int(best["tau"]), float(best["p_one"])

    @property
    def achievable_rate(self) -> float:
        """Maximum estimate, bits per channel use."""
        tau, p_one = self.argmax
        row = self.frame[(self.frame["tau"] == tau) & (self.frame["p_one"] == p_one)]
        return float(row["I_bits_per_use"].iloc[0])

    @property
    def achievable_rate_per_second(self) -> float:
        """Bits per second, ``achievable_rate / t_s``."""
        return self.achievable_rate / self.symbol_duration

    def to_frame(self) -> pd.DataFrame:
        """CSV view with the documented columns plus the pruning bookkeeping."""
        return self.frame[[*RATE_SURFACE_COLUMNS, "upper_bound", "evaluated"]]

    def summary(self) -> dict[str, Any]:
        """JSON summary of the optimum."""
        tau, p_one = self.argmax
        best = self.frame[(self.frame["tau"] == tau) & (self.frame["p_one"] == p_one)]
        return {
            "eta": self.eta,
            "argmax": {"tau": tau, "p_one": p_one},
            "achievable_rate": self.achievable_rate,
            "std_err": float(best["std_err"].iloc[0]),
            "bits_per_sec": self.achievable_rate_per_second,
            "symbol_duration": self.symbol_duration,
            "n": self.n,
            "seeds": self.seeds,
            "n_evaluated": int(self.frame["evaluated"].sum()),
            "n_cells": len(self.frame),
            **self.metadata,
        }


def achievable_rate(
    models: dict[int, DemodulationModel],
    p_ones: Sequence[float],
    n: int,
    seed: int,
    symbol_duration: float,
    n_seeds: int = 1,
    prune: bool = False,
    burn_in: int | None = None,
    max_workers: int = 1,
) -> RateSurface:
    """Maximise the mutual information rate over thresholds and input laws.

    Parameters
    ----------
    models : dict[int, DemodulationModel]
        Demodulation table per threshold ``tau``, all with the same ``eta``.
    p_ones : Sequence[float]
        Input probabilities to try.
    n : int
        Output sequence length per seed.
    seed : int
        Master seed of the entropy streams.
    symbol_duration : float
        t_s, to convert to bits per second.
    n_seeds : int
        Independent sequences per cell.
    prune : bool
        Evaluate cells in decreasing ``output_entropy_upper_bound`` order and
        skip every cell whose bound is below the best estimate so far. The
        argmax is unchanged but skipped cells hold NaN. By default every cell
        is evaluated.
    burn_in : int | None
        Slots discarded from each entropy estimate; ``None`` uses
        ``default_burn_in``.
    max_workers : int
        Threads; the full grid fans out over cells, the pruned search over the
        seeds of one cell.

    Returns
    -------
    RateSurface
    """
    if not models or not p_ones:
        raise ConfigurationError("tau and p_one grids must not be empty")
    etas = {_model.eta for _model in models.values()}
    if len(etas) != 1:
        raise ConfigurationError(f"All models must share one eta, got {sorted(etas)}")

    cells = [
        {
            "tau": _tau,
            "p_one": float(_p_one),
            "upper_bound": output_entropy_upper_bound(
                models[_tau], InputDistribution(p_one=_p_one)
            ),
        }
        for _tau in sorted(models)
        for _p_one in p_ones
    ]

    def _record(cell: dict[str, Any], estimate: RateEstimate) -> None:
        cell.update(
            I_bits_per_use=estimate.mutual_information,
            std_err=estimate.std_err,
            evaluated=True,
        )

    if prune:
        order = sorted(
            range(len(cells)),
            key=lambda _i: (
                -cells[_i]["upper_bound"],
                cells[_i]["tau"],
                abs(cells[_i]["p_one"] - 0.5),
            ),
        )
        best = -math.inf
        for _i in order:
            cell = cells[_i]
            if cell["upper_bound"] < best:
                break
            estimate = mutual_information_rate(
                models[cell["tau"]],
                InputDistribution(p_one=cell["p_one"]),
                n,
                seed,
                n_seeds=n_seeds,
                burn_in=burn_in,
                max_workers=max_workers,
            )
            _record(cell, estimate)
            best = max(best, estimate.mutual_information)
    else:
        estimates = run_in_threads(
            [
                functools.partial(
                    mutual_information_rate,
                    models[_cell["tau"]],
                    InputDistribution(p_one=_cell["p_one"]),
                    n,
                    seed,
                    n_seeds=n_seeds,
                    burn_in=burn_in,
                )
                for _cell in cells
            ],
            max_workers=max_workers,
            description="Rate surface",
        )
        for _cell, _estimate in zip(cells, estimates):
            _record(_cell, _estimate)

    frame = pd.DataFrame(cells)
    frame["evaluated"] = frame["evaluated"].eq(True)
    frame = frame.reindex(
        columns=["tau", "p_one", "I_bits_per_use", "std_err", "upper_bound", "evaluated"]
    ).astype({"tau": int, "evaluated": bool, "I_bits_per_use": float, "std_err": float})

    eta = etas.pop()
    logger.info(
        "eta=%d: evaluated %d of %d (tau, p_one) cells",
        eta,
        int(frame["evaluated"].sum()),
        len(frame),
    )
    return RateSurface(
        frame=frame,
        eta=eta,
        symbol_duration=symbol_duration,
        n=n,
        seeds=list(range(n_seeds)),
        metadata={"pruned": prune, "seed": seed},
    )

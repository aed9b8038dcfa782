"""Particle-tracking Monte Carlo simulation of the diffusion channel.

Molecules perform free 3-D Brownian motion with per-axis step standard
deviation ``sqrt(2 D dt)``. At the end of every micro step a molecule whose
center lies within ``receiver_radius + molecule_radius`` of the receiver
center is absorbed and removed. The transmitter body is transparent to
molecule motion.

Micro steps are counted from the emission time; step ``k`` (0-based) ends at
``(k + 1) dt`` and belongs to delay slot ``k // steps_per_slot``, so an
absorption detected at the end of the step closing a slot counts towards that
slot.
"""

import functools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Literal, Sequence

import numpy as np
import pydantic

from src.utils import Configs, batch_sizes, chunk_bounds, run_in_threads

from .channel import ChannelCoefficients, analytical_coefficients, demodulate_counts
from .config import SimulationConfig
from .errors import ConfigurationError
from .rng import derive_generator


logger = logging.getLogger(__name__)

Engine = Literal["tracking", "delay-sampling"]
NOT_ABSORBED = -1


@dataclass(slots=True)
class ParticleState:
    """One messenger molecule.

    ``time`` is the simulation clock of this particle; ``absorption_time`` is
    set exactly once, after which ``position`` is frozen.
    """

    position: np.ndarray
    time: float = 0.0
    absorbed: bool = False
    absorption_time: float | None = None

    def __post_init__(self) -> None:
        """Validate the absorption bookkeeping."""
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if self.absorbed and self.absorption_time is None:
            raise ValueError("an absorbed particle needs an absorption_time")


@dataclass(slots=True)
class ArrivalHistogram:
    """Absorptions per delay slot, pooled over ``trials`` impulse emissions."""

    slot_counts: np.ndarray
    emitted: int
    trials: int = 1
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate counts against the number of emitted molecules."""
        self.slot_counts = np.asarray(self.slot_counts, dtype=np.int64)
        if np.any(self.slot_counts < 0):
            raise ValueError("slot counts must be non-negative")
        if self.slot_counts.sum() > self.emitted * self.trials:
            raise ValueError("more absorptions than emitted molecules")

    @property
    def total_emitted(self) -> int:
        """Molecules emitted over all trials."""
        return self.emitted * self.trials

    @property
    def survivors(self) -> int:
        """Molecules not absorbed within the observed slots."""
        return self.total_emitted - int(self.slot_counts.sum())

    @property
    def fractions(self) -> np.ndarray:
        """Empirical delay probabilities ``p_hat_i``."""
        return self.slot_counts / self.total_emitted

    def __add__(self, other: "ArrivalHistogram") -> "ArrivalHistogram":
        """Pool two histograms of the same impulse experiment."""
        if other.emitted != self.emitted or other.slot_counts.size != self.slot_counts.size:
            raise ValueError("can only pool histograms of the same experiment")
        return ArrivalHistogram(
            slot_counts=self.slot_counts + other.slot_counts,
            emitted=self.emitted,
            trials=self.trials + other.trials,
            metadata=self.metadata,
        )


@dataclass(slots=True)
class TransmissionTrace:
    """Transmitted bits, per-slot received counts and demodulated bits."""

    tx_bits: np.ndarray
    rx_counts: np.ndarray
    rx_bits: np.ndarray | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate vector lengths."""
        self.tx_bits = np.asarray(self.tx_bits, dtype=np.int8)
        self.rx_counts = np.asarray(self.rx_counts, dtype=np.int64)
        if self.tx_bits.shape != self.rx_counts.shape:
            raise ValueError("tx_bits and rx_counts must have equal length")
        if self.rx_bits is not None:
            self.rx_bits = np.asarray(self.rx_bits, dtype=np.int8)
            if self.rx_bits.shape != self.tx_bits.shape:
                raise ValueError("rx_bits must match tx_bits in length")

    def __len__(self) -> int:
        """Number of symbol slots."""
        return int(self.tx_bits.size)

    def demodulated(self, tau: int) -> "TransmissionTrace":
        """Return a copy with ``rx_bits`` filled by the threshold rule."""
        return replace(self, rx_bits=demodulate_counts(self.rx_counts, tau))


class ConvergenceReport(pydantic.BaseModel):
    """``p_hat_0`` at micro step ``dt`` and ``dt / 2``."""

    micro_step: float
    p0_coarse: float
    p0_fine: float
    std_err_coarse: float
    std_err_fine: float
    difference_in_std_err: float
    tolerance_in_std_err: float
    passed: bool


def _resolve(configs: Configs | None) -> Configs:
    return configs if configs is not None else Configs()


def _inside(positions: np.ndarray, radius: float) -> np.ndarray:
    """Center-distance check against the absorption radius."""
    return np.einsum("...i,...i->...", positions, positions) <= radius * radius


def advance_particle(
    state: ParticleState, cfg: SimulationConfig, rng: np.random.Generator
) -> ParticleState:
    """Advance one particle by one micro step.

    A particle that starts inside the absorption radius, or ends the step
    inside it, is absorbed at the end of the step.
    """
    if state.absorbed:
        raise ValueError("cannot advance an absorbed particle")

    end_time = state.time + cfg.effective_micro_step
    if _inside(state.position, cfg.absorption_radius):
        return ParticleState(state.position.copy(), end_time, True, end_time)

    position = state.position + rng.normal(0.0, cfg.step_sigma, size=3)
    if _inside(position, cfg.absorption_radius):
        return ParticleState(position, end_time, True, end_time)
    return ParticleState(position, end_time)


def track_batch(
    cfg: SimulationConfig,
    n_molecules: int,
    n_steps: int,
    rng: np.random.Generator,
    chunk_steps: int = 256,
) -> np.ndarray:
    """Track a burst released at the release point for ``n_steps`` micro steps.

    Returns
    -------
    np.ndarray
        0-based micro step of absorption per molecule, ``NOT_ABSORBED`` for
        survivors.
    """
    hit_step = np.full(n_molecules, NOT_ABSORBED, dtype=np.int64)
    positions = np.tile(cfg.release_position, (n_molecules, 1))
    live = np.arange(n_molecules)
    sigma = cfg.step_sigma
    radius = cfg.absorption_radius

    for _start, _stop in chunk_bounds(n_steps, chunk_steps):
        if live.size == 0:
            break

        increments = rng.normal(0.0, sigma, size=(_stop - _start, live.size, 3))
        paths = positions[live][None, :, :] + np.cumsum(increments, axis=0)
        inside = _inside(paths, radius)
        hit = inside.any(axis=0)
        first = inside.argmax(axis=0)

        hit_step[live[hit]] = _start + first[hit]
        positions[live] = paths[-1]
        positions[live[hit]] = paths[first[hit], np.flatnonzero(hit)]
        live = live[~hit]

    return hit_step


def _impulse_hit_steps(
    cfg: SimulationConfig,
    n_molecules: int,
    n_steps: int,
    seed: int,
    stream: tuple[int, ...],
    configs: Configs,
) -> np.ndarray:
    """Absorption steps of one burst, split into batches with own streams."""
    sizes = batch_sizes(n_molecules, configs.molecule_batch_size)
    tasks = [
        functools.partial(
            track_batch,
            cfg,
            _size,
            n_steps,
            derive_generator(seed, "impulse", *stream, _batch),
            configs.chunk_steps,
        )
        for _batch, _size in enumerate(sizes)
    ]
    results = run_in_threads(
        tasks, max_workers=configs.max_workers, description="Tracking molecules"
    )
    return np.concatenate(results) if results else np.empty(0, dtype=np.int64)


def _bin_hit_steps(hit_steps: np.ndarray, steps_per_slot: int, n_slots: int) -> np.ndarray:
    absorbed = hit_steps[hit_steps != NOT_ABSORBED]
    slots = absorbed // steps_per_slot
    return np.bincount(slots[slots < n_slots], minlength=n_slots)[:n_slots]


def simulate_impulse(
    cfg: SimulationConfig,
    n_molecules: int,
    n_slots: int,
    seed: int | None = None,
    repetition: int = 0,
    configs: Configs | None = None,
) -> ArrivalHistogram:
    """Emit ``n_molecules`` at time 0 and histogram their absorption slots.

    Parameters
    ----------
    cfg : SimulationConfig
        Deployment scenario.
    n_molecules : int
        Burst size.
    n_slots : int
        Observation window; molecules are tracked until ``n_slots * t_s``.
    seed : int | None
        Master seed; defaults to ``cfg.rng_seed``.
    repetition : int
        Index of this impulse experiment, selects the random stream.
    configs : Configs | None
        Runtime settings.

    Returns
    -------
    ArrivalHistogram
        ``slot_counts[i]`` absorptions in delay slot ``i``.
    """
    if n_molecules <= 0 or n_slots < 1:
        raise ConfigurationError(
            f"Need n_molecules > 0 and n_slots >= 1, got {n_molecules}, {n_slots}"
        )

    configs = _resolve(configs)
    seed = cfg.rng_seed if seed is None else seed
    steps_per_slot = cfg.steps_per_slot
    hit_steps = _impulse_hit_steps(
        cfg, n_molecules, n_slots * steps_per_slot, seed, (repetition,), configs
    )
    return ArrivalHistogram(
        slot_counts=_bin_hit_steps(hit_steps, steps_per_slot, n_slots),
        emitted=n_molecules,
        trials=1,
        metadata={"seed": seed, "repetition": repetition, "n_slots": n_slots},
    )


def hit_fraction_curve(
    cfg: SimulationConfig,
    n_molecules: int,
    times: Sequence[float],
    seed: int | None = None,
    configs: Configs | None = None,
) -> np.ndarray:
    """Empirical fraction of a burst absorbed by each of ``times``."""
    configs = _resolve(configs)
    seed = cfg.rng_seed if seed is None else seed
    dt = cfg.effective_micro_step
    n_steps = max(1, math.ceil(max(times) / dt - 1e-9))
    hit_steps = _impulse_hit_steps(cfg, n_molecules, n_steps, seed, (0,), configs)

    absorbed_at = np.where(
        hit_steps == NOT_ABSORBED, np.inf, (hit_steps + 1) * dt
    )
    return np.array(
        [np.count_nonzero(absorbed_at <= _t * (1 + 1e-12)) / n_molecules for _t in times]
    )


def estimate_channel_coefficients(
    cfg: SimulationConfig,
    eta: int,
    n_molecules: int,
    n_repetitions: int,
    seed: int | None = None,
    configs: Configs | None = None,
) -> ChannelCoefficients:
    """Monte Carlo estimate of ``p_0..p_eta`` pooled over repetitions.

    Coefficients whose standard error exceeds
    ``configs.coefficient_stderr_tolerance`` are listed under
    ``metadata["warnings"]``; the estimate is still returned.
    """
    if eta < 0:
        raise ConfigurationError(f"eta must be non-negative, got {eta}")
    if n_repetitions < 1:
        raise ConfigurationError(f"n_repetitions must be positive, got {n_repetitions}")

    configs = _resolve(configs)
    seed = cfg.rng_seed if seed is None else seed
    pooled = functools.reduce(
        ArrivalHistogram.__add__,
        (
            simulate_impulse(cfg, n_molecules, eta + 1, seed, _rep, configs)
            for _rep in range(n_repetitions)
        ),
    )

    p_hat = pooled.fractions
    std_err = np.sqrt(p_hat * (1.0 - p_hat) / pooled.total_emitted)
    warnings = [
        f"std_err of p_{_i} is {_se:.3g} > {configs.coefficient_stderr_tolerance:.3g}"
        for _i, _se in enumerate(std_err)
        if _se > configs.coefficient_stderr_tolerance
    ]
    for _warning in warnings:
        logger.warning("d=%s: %s", cfg.distance, _warning)

    return ChannelCoefficients(
        p=p_hat.tolist(),
        provenance="monte-carlo",
        std_err=std_err.tolist(),
        metadata={
            "seed": seed,
            "n_molecules": n_molecules,
            "n_repetitions": n_repetitions,
            "micro_step": cfg.effective_micro_step,
            "release_point": cfg.release_point,
            "transmitter_body": "transparent",
            "absorption_check": "end-of-step",
            "molecule_batch_size": configs.molecule_batch_size,
            "chunk_steps": configs.chunk_steps,
            "warnings": warnings,
        },
    )


def step_convergence(
    cfg: SimulationConfig,
    n_molecules: int,
    seed: int | None = None,
    configs: Configs | None = None,
) -> ConvergenceReport:
    """Compare ``p_hat_0`` at the configured micro step and at half of it."""
    configs = _resolve(configs)
    fine_cfg = cfg.with_micro_step(cfg.effective_micro_step / 2.0)
    coarse = estimate_channel_coefficients(cfg, 0, n_molecules, 1, seed, configs)
    fine = estimate_channel_coefficients(fine_cfg, 0, n_molecules, 1, seed, configs)

    se_coarse = coarse.std_err[0] if coarse.std_err else 0.0
    se_fine = fine.std_err[0] if fine.std_err else 0.0
    combined = math.hypot(se_coarse, se_fine)
    difference = abs(coarse.p[0] - fine.p[0])
    in_se = difference / combined if combined > 0 else (0.0 if difference == 0 else math.inf)
    return ConvergenceReport(
        micro_step=cfg.effective_micro_step,
        p0_coarse=coarse.p[0],
        p0_fine=fine.p[0],
        std_err_coarse=se_coarse,
        std_err_fine=se_fine,
        difference_in_std_err=in_se,
        tolerance_in_std_err=configs.discretization_tolerance,
        passed=in_se <= configs.discretization_tolerance,
    )


def random_bits(n: int, p_one: float, seed: int, *indices: int) -> np.ndarray:
    """I.i.d. bits with ``P(1) = p_one`` from the ``bits`` stream ``indices``."""
    rng = derive_generator(seed, "bits", *indices)
    return (rng.random(n) < p_one).astype(np.int8)


def _validate_bits(tx_bits: Sequence[int] | np.ndarray) -> np.ndarray:
    bits = np.asarray(tx_bits)
    if bits.ndim != 1 or bits.size == 0:
        raise ConfigurationError("tx_bits must be a non-empty bit vector")
    if not np.isin(bits, (0, 1)).all():
        raise ConfigurationError("tx_bits must contain only 0 and 1")
    return bits.astype(np.int8)


def _track_burst(
    cfg: SimulationConfig,
    n_molecules: int,
    n_slots: int,
    seed: int,
    slot: int,
    configs: Configs,
) -> np.ndarray:
    """Delay-slot counts of one burst tracked for ``n_slots`` slots."""
    steps_per_slot = cfg.steps_per_slot
    sizes = batch_sizes(n_molecules, configs.molecule_batch_size)
    hit_steps = np.concatenate(
        [
            track_batch(
                cfg,
                _size,
                n_slots * steps_per_slot,
                derive_generator(seed, "sequence", slot, _batch),
                configs.chunk_steps,
            )
            for _batch, _size in enumerate(sizes)
        ]
    )
    return _bin_hit_steps(hit_steps, steps_per_slot, n_slots)


def _burst_slots(cfg: SimulationConfig, bits: np.ndarray) -> list[tuple[int, int]]:
    """``(slot, burst size)`` of every non-empty emission."""
    return [
        (int(_slot), cfg.molecules_for_bit(int(_bit)))
        for _slot, _bit in enumerate(bits)
        if cfg.molecules_for_bit(int(_bit)) > 0
    ]


def simulate_sequence(
    cfg: SimulationConfig,
    tx_bits: Sequence[int] | np.ndarray,
    engine: Engine = "tracking",
    coefficients: ChannelCoefficients | None = None,
    max_delay_slots: int | None = None,
    seed: int | None = None,
    configs: Configs | None = None,
) -> TransmissionTrace:
    """Transmit a bit sequence through the channel.

    Each slot ``s`` releases ``molecules_for_bit(x_s)`` molecules at its start;
    ``rx_counts[r]`` counts absorptions during slot ``r`` from all bursts.

    Parameters
    ----------
    cfg : SimulationConfig
        Deployment scenario.
    tx_bits : Sequence[int]
        Transmitted bits.
    engine : {"tracking", "delay-sampling"}
        ``tracking`` follows every molecule by Brownian particle tracking.
        ``delay-sampling`` draws each molecule's delay slot from
        ``coefficients`` (default: analytical coefficients over the full trace),
        which is equal in distribution when the coefficients are the
        first-passage law.
    coefficients : ChannelCoefficients | None
        Long-horizon delay law for ``delay-sampling``; mass beyond its last
        entry is treated as never absorbed.
    max_delay_slots : int | None
        Stop following a burst after this many slots; ``None`` follows every
        molecule to the end of the trace.
    seed : int | None
        Master seed; defaults to ``cfg.rng_seed``.
    configs : Configs | None
        Runtime settings.

    Returns
    -------
    TransmissionTrace
        With ``rx_bits`` unset.
    """
    bits = _validate_bits(tx_bits)
    if max_delay_slots is not None and max_delay_slots < 1:
        raise ConfigurationError("max_delay_slots must be at least 1")

    configs = _resolve(configs)
    seed = cfg.rng_seed if seed is None else seed
    n = bits.size
    horizon = n if max_delay_slots is None else min(n, max_delay_slots)
    rx_counts = np.zeros(n, dtype=np.int64)
    bursts = _burst_slots(cfg, bits)

    if engine == "tracking":
        tasks = [
            functools.partial(
                _track_burst, cfg, _size, min(horizon, n - _slot), seed, _slot, configs
            )
            for _slot, _size in bursts
        ]
        per_burst = run_in_threads(
            tasks, max_workers=configs.max_workers, description="Tracking bursts"
        )
        for (_slot, _), _counts in zip(bursts, per_burst):
            rx_counts[_slot : _slot + _counts.size] += _counts

    elif engine == "delay-sampling":
        if coefficients is None:
            coefficients = analytical_coefficients(cfg, horizon - 1)
        delay_law = coefficients.array[:horizon]
        pvals = np.append(delay_law, max(0.0, 1.0 - delay_law.sum()))
        rng = derive_generator(seed, "sequence", 0)
        for _slot, _size in bursts:
            delays = rng.multinomial(_size, pvals)[:-1]
            stop = min(n, _slot + delays.size)
            rx_counts[_slot:stop] += delays[: stop - _slot]

    else:
        raise ConfigurationError(f"Unknown engine: {engine}")

    return TransmissionTrace(
        tx_bits=bits,
        rx_counts=rx_counts,
        metadata={
            "engine": engine,
            "seed": seed,
            "max_delay_slots": max_delay_slots,
            "coefficient_provenance": None
            if coefficients is None
            else coefficients.provenance,
        },
    )


def bit_error_ratio(trace: TransmissionTrace) -> float:
    """Fraction of slots with ``rx_bits != tx_bits``."""
    if trace.rx_bits is None:
        raise ValueError("trace has not been demodulated")
    return float(np.mean(trace.rx_bits != trace.tx_bits))

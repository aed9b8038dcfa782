"""ISI-aware binomial channel model.

A burst of ``n_one`` molecules emitted ``k`` slots ago contributes
``Binomial(n_one, p_k)`` molecules to the current slot. The received count is
the sum of those contributions over the ``eta + 1`` most recent bits and the
slot demodulates to 0 iff the count does not exceed the threshold ``tau``.

Windows are tuples ``(x_{r-eta}, ..., x_r)``, oldest bit first. As integers the
oldest bit is the most significant one, so ``window_index((0, 1)) == 1`` and
the newest bit of window ``w`` is ``w & 1``.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Iterable, Literal, Sequence

import numpy as np
import pydantic
from pydantic import Field
from scipy import special, stats

from .config import SimulationConfig
from .errors import DegenerateCoefficientsError


logger = logging.getLogger(__name__)

Provenance = Literal["monte-carlo", "analytical"]

PMF_NORMALIZATION_TOLERANCE = 1e-9
TABLE_TOLERANCE = 1e-12


class ChannelCoefficients(pydantic.BaseModel):
    """Delay probabilities ``p_0..p_eta`` of a single molecule.

    Attributes
    ----------
    p : list[float]
        ``p[i]`` is the probability that a molecule is absorbed exactly ``i``
        slots after its emission slot.
    provenance : {"monte-carlo", "analytical"}
        How the vector was obtained.
    std_err : list[float] | None
        Per-coefficient Monte Carlo standard errors.
    metadata : dict
        Free-form provenance details (geometry, sample sizes, warnings).
    """

    model_config = pydantic.ConfigDict(extra="ignore")

    p: list[float] = Field(min_length=1)
    provenance: Provenance
    std_err: list[float] | None = None
    metadata: dict[str, Any] = Field(default_factory=dict)

    @pydantic.model_validator(mode="after")
    def _check_probabilities(self) -> "ChannelCoefficients":
        values = np.asarray(self.p, dtype=float)
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError("every p_i must lie in [0, 1]")
        if values.sum() > 1 + TABLE_TOLERANCE:
            raise ValueError(f"sum of p_i exceeds 1: {values.sum()}")
        if self.std_err is not None and len(self.std_err) != len(self.p):
            raise ValueError("std_err must have one entry per coefficient")
        return self

    @pydantic.computed_field  # type: ignore[prop-decorator]
    @property
    def eta(self) -> int:
        """ISI-awareness window, ``len(p) - 1``."""
        return len(self.p) - 1

    @pydantic.computed_field  # type: ignore[prop-decorator]
    @property
    def survival(self) -> float:
        """Probability mass not absorbed within ``eta + 1`` slots."""
        return max(0.0, 1.0 - float(np.sum(self.p)))

    @property
    def array(self) -> np.ndarray:
        """Coefficients as a float array."""
        return np.asarray(self.p, dtype=float)

    def truncate(self, eta: int) -> "ChannelCoefficients":
        """Keep ``p_0..p_eta`` of a longer vector."""
        if not 0 <= eta <= self.eta:
            raise ValueError(f"Cannot truncate eta={self.eta} vector to eta={eta}")

        std_err = None if self.std_err is None else self.std_err[: eta + 1]
        return ChannelCoefficients(
            p=self.p[: eta + 1],
            provenance=self.provenance,
            std_err=std_err,
            metadata={**self.metadata, "truncated_from_eta": self.eta},
        )


def residual_mass(coeffs: ChannelCoefficients, eta: int) -> float:
    """Return ``sum(p_i for i > eta)``, the ISI a window of ``eta`` ignores."""
    return float(np.sum(coeffs.array[eta + 1 :]))


@dataclass(slots=True, frozen=True)
class Pmf:
    """Probability mass function over counts ``0..len(mass) - 1``."""

    mass: np.ndarray

    def __post_init__(self) -> None:
        """Validate non-negativity and normalization."""
        if self.mass.ndim != 1 or self.mass.size == 0:
            raise ValueError("Pmf mass must be a non-empty vector")
        if np.any(self.mass < -TABLE_TOLERANCE):
            raise ValueError("Pmf mass must be non-negative")
        total = float(self.mass.sum())
        if abs(total - 1.0) > PMF_NORMALIZATION_TOLERANCE:
            raise ValueError(f"Pmf mass sums to {total}, expected 1")

    @property
    def support_max(self) -> int:
        """Largest count with an entry."""
        return self.mass.size - 1

    def cdf(self, k: int) -> float:
        """Return ``P(N <= k)``."""
        if k < 0:
            return 0.0
        return float(min(1.0, self.mass[: k + 1].sum()))

    def mean(self) -> float:
        """Expected count."""
        return float(np.dot(np.arange(self.mass.size), self.mass))

    def convolve(self, other: "Pmf") -> "Pmf":
        """PMF of the sum of two independent counts."""
        return Pmf(np.convolve(self.mass, other.mass))


def window_index(bits: Sequence[int]) -> int:
    """Encode a window ``(x_{r-eta}, ..., x_r)`` as an integer."""
    index = 0
    for _bit in bits:
        index = (index << 1) | int(bool(_bit))
    return index


def window_bits(index: int, eta: int) -> tuple[int, ...]:
    """Decode an integer window of length ``eta + 1``, oldest bit first."""
    return tuple((index >> (eta - _pos)) & 1 for _pos in range(eta + 1))


def window_key(index: int, eta: int) -> str:
    """Bit-string key of a window, e.g. ``"01"``."""
    return format(index, f"0{eta + 1}b")


def ones_per_window(eta: int) -> np.ndarray:
    """Number of 1 bits of every window index ``0..2**(eta+1) - 1``."""
    indices = np.arange(2 ** (eta + 1))
    ones = np.zeros(indices.size, dtype=np.int64)
    for _pos in range(eta + 1):
        ones += (indices >> _pos) & 1
    return ones


def window_probabilities(eta: int, p_one: float) -> np.ndarray:
    """Probability of every window under i.i.d. inputs with ``P(x=1) = p_one``."""
    ones = ones_per_window(eta)
    zeros = eta + 1 - ones
    with np.errstate(divide="ignore", invalid="ignore"):
        probs = np.power(p_one, ones) * np.power(1.0 - p_one, zeros)
    return probs


def conditional_success_probs(coeffs: ChannelCoefficients) -> np.ndarray:
    """Return ``p*_i = p_i / (1 - sum_{j<i} p_j)``.

    ``p*_i`` is the probability that a molecule still in the environment at
    the start of delay slot ``i`` is absorbed during it.

    Raises
    ------
    DegenerateCoefficientsError
        When a denominator is not positive.
    """
    p = coeffs.array
    remaining = 1.0 - np.concatenate(([0.0], np.cumsum(p)[:-1]))
    if np.any(remaining <= 0):
        first = int(np.argmax(remaining <= 0))
        raise DegenerateCoefficientsError(
            f"No molecules remain before delay slot {first}: sum of p_j for j < "
            f"{first} is {1.0 - remaining[first]}"
        )
    return np.clip(p / remaining, 0.0, 1.0)


def reconstruct_coefficients(p_star: Iterable[float]) -> np.ndarray:
    """Invert ``conditional_success_probs``: ``p_i = p*_i (1 - sum_{j<i} p_j)``."""
    p: list[float] = []
    absorbed = 0.0
    for _p_star in p_star:
        p_i = float(_p_star) * (1.0 - absorbed)
        p.append(p_i)
        absorbed += p_i
    return np.asarray(p)


def first_passage_cdf(
    t: float | np.ndarray, cfg: SimulationConfig
) -> float | np.ndarray:
    """Point-source first passage probability ``F(t)``.

    ``F(t) = (r / d) erfc((d - r) / sqrt(4 D t))`` with ``r`` the absorption
    radius and ``d`` the distance from the release point to the receiver
    center. ``F(0) = 0`` and ``F(inf) = r / d``.
    """
    radius = cfg.absorption_radius
    distance = cfg.release_distance
    times = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        argument = np.where(
            times > 0,
            (distance - radius) / np.sqrt(4.0 * cfg.diffusion_coefficient * times),
            np.inf,
        )
    values = (radius / distance) * special.erfc(argument)
    return float(values) if values.ndim == 0 else values


def analytical_coefficients(cfg: SimulationConfig, eta: int) -> ChannelCoefficients:
    """Point-source coefficients ``p_i = F((i+1) t_s) - F(i t_s)``.

    This approximates the spherical transmitter by a point source at the
    release point; it is exact for ``release_point="center"`` with a vanishing
    transmitter radius.
    """
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")

    edges = cfg.symbol_duration * np.arange(eta + 2)
    cdf = np.asarray(first_passage_cdf(edges, cfg))
    p = np.clip(np.diff(cdf), 0.0, 1.0)
    return ChannelCoefficients(
        p=p.tolist(),
        provenance="analytical",
        metadata={
            "approximation": "point-source",
            "release_distance": cfg.release_distance,
            "absorption_radius": cfg.absorption_radius,
            "asymptotic_hit_probability": cfg.absorption_radius / cfg.release_distance,
        },
    )


def binomial_pmf(n: int, prob: float) -> Pmf:
    """``Binomial(n, prob)`` PMF, evaluated in log space."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must lie in [0, 1], got {prob}")
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")

    counts = np.arange(n + 1)
    mass = np.exp(stats.binom.logpmf(counts, n, prob))
    return Pmf(mass / mass.sum())


def received_count_pmf(
    window: Sequence[int], coeffs: ChannelCoefficients, n_one: int
) -> Pmf:
    """PMF of the count received in the newest slot of ``window``.

    The bit emitted ``k`` slots ago (``window[eta - k]``) contributes
    ``Binomial(n_one * bit, p_k)``; the contributions are independent and the
    PMF is built with ``eta`` successive convolutions.
    """
    eta = coeffs.eta
    if len(window) != eta + 1:
        raise ValueError(f"window must have {eta + 1} bits, got {len(window)}")

    pmf = Pmf(np.ones(1))
    for _delay in range(eta + 1):
        if window[eta - _delay]:
            pmf = pmf.convolve(binomial_pmf(n_one, coeffs.p[_delay]))
    return pmf


def _lower_tail_pmf_table(
    coeffs: ChannelCoefficients, n_one: int, length: int
) -> np.ndarray:
    """Received-count PMFs of every window, truncated to counts ``< length``.

    Truncation is exact for the lower tail: ``P(N = k)`` for ``k < length``
    only involves contribution counts below ``length``.
    Row ``w`` belongs to window index ``w``.
    """
    table = np.zeros((1, length))
    table[0, 0] = 1.0
    eta = coeffs.eta
    # Append bits oldest first, so the delay of position ``i`` is ``eta - i``.
    for _position in range(eta + 1):
        kernel = binomial_pmf(n_one, coeffs.p[eta - _position]).mass[:length]
        with_one = np.zeros_like(table)
        for _shift, _weight in enumerate(kernel):
            if _weight > 0:
                with_one[:, _shift:] += _weight * table[:, : length - _shift]
        table = np.stack([table, with_one], axis=1).reshape(-1, length)
    return table


class DemodulationModel(pydantic.BaseModel):
    """``P(y_r = 0 | window)`` for every window of ``eta + 1`` bits.

    Attributes
    ----------
    eta : int
        ISI-awareness window.
    n_one : int
        Molecules per bit 1.
    tau : int
        Demodulation threshold; ``y = 0`` iff the count is at most ``tau``.
    table : dict[str, float]
        Keyed by window bit-string, oldest bit first.
    coefficients : ChannelCoefficients | None
        Coefficients the table was built from.
    physical : bool
        Enforce the invariants of a diffusion channel without zero-bit
        emissions: the all-zero window never demodulates to 1 and adding an
        emission never increases ``P(y=0|w)``. Synthetic tables used for rate
        analysis may switch this off.
    """

    model_config = pydantic.ConfigDict(extra="ignore")

    eta: int = Field(ge=0)
    n_one: int = Field(ge=0)
    tau: int = Field(ge=0)
    table: dict[str, float]
    coefficients: ChannelCoefficients | None = None
    physical: bool = True

    @pydantic.model_validator(mode="after")
    def _check_table(self) -> "DemodulationModel":
        n_windows = 2 ** (self.eta + 1)
        if len(self.table) != n_windows:
            raise ValueError(
                f"table must have {n_windows} entries, got {len(self.table)}"
            )
        if any(len(_key) != self.eta + 1 for _key in self.table):
            raise ValueError(f"table keys must have {self.eta + 1} bits")

        raw = np.fromiter(self.table.values(), dtype=float, count=len(self.table))
        if np.any(raw < -TABLE_TOLERANCE) or np.any(raw > 1 + TABLE_TOLERANCE):
            raise ValueError("table entries must lie in [0, 1]")
        if not self.physical:
            return self
        p_zero = self.p_zero
        if abs(p_zero[0] - 1.0) > TABLE_TOLERANCE:
            raise ValueError("all-zero window must demodulate to 0 with certainty")
        if not is_monotone(p_zero, self.eta):
            raise ValueError("adding an emission must not increase P(y=0|w)")
        return self

    @cached_property
    def p_zero(self) -> np.ndarray:
        """``P(y=0 | w)`` indexed by window integer."""
        values = np.empty(len(self.table))
        for _key, _value in self.table.items():
            values[int(_key, 2)] = _value
        return np.clip(values, 0.0, 1.0)

    @property
    def n_windows(self) -> int:
        """Number of windows, ``2 ** (eta + 1)``."""
        return 2 ** (self.eta + 1)

    def prob_zero(self, window: Sequence[int]) -> float:
        """Return ``P(y=0 | window)``."""
        return float(self.p_zero[window_index(window)])

    @classmethod
    def from_array(
        cls,
        p_zero: np.ndarray,
        eta: int,
        n_one: int,
        tau: int,
        coefficients: ChannelCoefficients | None = None,
        physical: bool = True,
    ) -> "DemodulationModel":
        """Build a model from a vector indexed by window integer."""
        table = {
            window_key(_index, eta): float(_value)
            for _index, _value in enumerate(np.clip(p_zero, 0.0, 1.0))
        }
        return cls(
            eta=eta,
            n_one=n_one,
            tau=tau,
            table=table,
            coefficients=coefficients,
            physical=physical,
        )


def is_monotone(p_zero: np.ndarray, eta: int, tol: float = TABLE_TOLERANCE) -> bool:
    """Check that setting any window bit to 1 never increases ``P(y=0|w)``."""
    indices = np.arange(p_zero.size)
    for _pos in range(eta + 1):
        bit = 1 << _pos
        without = indices[(indices & bit) == 0]
        if np.any(p_zero[without | bit] > p_zero[without] + tol):
            return False
    return True


def demod_prob_tables(
    coeffs: ChannelCoefficients, n_one: int, taus: Iterable[int]
) -> dict[int, DemodulationModel]:
    """Demodulation tables for several thresholds at once.

    ``P(y=0|w) = sum_{i<=tau} P(N_rx = i | w)``, computed from PMFs truncated
    to ``max(taus) + 1`` counts.
    """
    taus = sorted({int(_tau) for _tau in taus})
    if not taus or taus[0] < 0:
        raise ValueError(f"taus must be non-negative and non-empty, got {taus}")

    length = taus[-1] + 1
    cdf = np.cumsum(_lower_tail_pmf_table(coeffs, n_one, length), axis=1)
    # A count can never exceed the total emissions of the window.
    saturated = (coeffs.eta + 1) * n_one
    models: dict[int, DemodulationModel] = {}
    for _tau in taus:
        p_zero = np.ones(cdf.shape[0]) if _tau >= saturated else cdf[:, _tau]
        models[_tau] = DemodulationModel.from_array(
            p_zero, eta=coeffs.eta, n_one=n_one, tau=_tau, coefficients=coeffs
        )
    return models


def demod_prob_table(
    coeffs: ChannelCoefficients, n_one: int, tau: int
) -> DemodulationModel:
    """Demodulation table ``P(y=0|w)`` for one threshold."""
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    return demod_prob_tables(coeffs, n_one, [tau])[tau]


def demodulate(count: int, tau: int) -> int:
    """Threshold rule: 0 if ``count <= tau`` else 1."""
    return 0 if count <= tau else 1


def demodulate_counts(counts: np.ndarray, tau: int) -> np.ndarray:
    """Vectorised ``demodulate``."""
    return (np.asarray(counts) > tau).astype(np.int8)


def bit_error_probability(model: DemodulationModel, p_one: float) -> float:
    """Exact ``P(y_r != x_r)`` under i.i.d. inputs."""
    probs = window_probabilities(model.eta, p_one)
    newest = np.arange(model.n_windows) & 1
    error = np.where(newest == 1, model.p_zero, 1.0 - model.p_zero)
    return float(np.dot(probs, error))

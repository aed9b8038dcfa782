"""Test the binomial ISI channel model against brute-force oracles."""

import itertools
import math

import numpy as np
import pydantic
import pytest

from src.mcvd.channel import (
    ChannelCoefficients,
    DemodulationModel,
    Pmf,
    analytical_coefficients,
    binomial_pmf,
    bit_error_probability,
    conditional_success_probs,
    demod_prob_table,
    demod_prob_tables,
    demodulate,
    demodulate_counts,
    first_passage_cdf,
    is_monotone,
    received_count_pmf,
    reconstruct_coefficients,
    residual_mass,
    window_bits,
    window_index,
    window_key,
    window_probabilities,
)
from src.mcvd.config import SimulationConfig, build_config
from src.mcvd.errors import DegenerateCoefficientsError


def _coefficients(*p: float) -> ChannelCoefficients:
    return ChannelCoefficients(p=list(p), provenance="analytical")


def _pascal_binomial(n: int, prob: float) -> np.ndarray:
    """Binomial PMF by repeated Bernoulli convolution (Pascal recurrence)."""
    row = np.array([1.0])
    for _ in range(n):
        row = np.concatenate([row * (1 - prob), [0.0]]) + np.concatenate(
            [[0.0], row * prob]
        )
    return row


def _enumerated_count_pmf(
    window: tuple[int, ...], p: list[float], n_one: int
) -> np.ndarray:
    """Exhaustive per-molecule enumeration of the sequential absorption process.

    A molecule emitted ``k`` slots ago is either absorbed in one of the slots
    ``0..k`` after emission, each reached with the conditional probabilities
    ``p*_j``, or is still free after slot ``k``. Only absorptions in slot ``k``
    count towards the current slot.
    """
    eta = len(p) - 1
    p_star = conditional_success_probs(ChannelCoefficients(p=p, provenance="analytical"))

    def outcomes(delay: int) -> list[tuple[bool, float]]:
        result = []
        free = 1.0
        for _slot in range(delay + 1):
            result.append((_slot == delay, free * p_star[_slot]))
            free *= 1 - p_star[_slot]
        result.append((False, free))
        return result

    molecules = [
        outcomes(eta - _position)
        for _position, _bit in enumerate(window)
        if _bit
        for _ in range(n_one)
    ]
    mass = np.zeros(len(molecules) + 1)
    for _path in itertools.product(*molecules):
        count = sum(_counted for _counted, _ in _path)
        mass[count] += math.prod(_prob for _, _prob in _path)
    return mass


@pytest.fixture()
def small_config() -> SimulationConfig:
    """A small geometry with fast diffusion."""
    return build_config(
        diffusion_coefficient=1.0,
        receiver_radius=1.0,
        transmitter_radius=0.01,
        molecule_radius=0.001,
        distance=1.0,
        symbol_duration=1.0,
        micro_step=0.01,
        molecules_per_one=4,
    )


def test_coefficients_validation():
    """Test probability checks on coefficient vectors."""
    with pytest.raises(pydantic.ValidationError):
        _coefficients(0.7, 0.4)
    with pytest.raises(pydantic.ValidationError):
        _coefficients(-0.1)

    coefficients = _coefficients(0.5, 0.25)
    assert coefficients.eta == 1
    assert coefficients.survival == pytest.approx(0.25)
    assert coefficients.truncate(0).p == [0.5]
    assert residual_mass(coefficients, 0) == pytest.approx(0.25)


def test_conditional_success_probs():
    """Test the conditional probabilities and their inverse."""
    assert conditional_success_probs(_coefficients(1.0)).tolist() == [1.0]
    np.testing.assert_allclose(
        conditional_success_probs(_coefficients(0.5, 0.25)), [0.5, 0.5]
    )

    rng = np.random.default_rng(7)
    for _ in range(20):
        p = rng.dirichlet(np.ones(5))[:4]
        p_star = conditional_success_probs(_coefficients(*p))
        np.testing.assert_allclose(reconstruct_coefficients(p_star), p, atol=1e-14)


def test_conditional_success_probs_degenerate():
    """Test that no remaining mass before a later slot is rejected."""
    with pytest.raises(DegenerateCoefficientsError):
        conditional_success_probs(_coefficients(1.0, 0.0))


def test_binomial_pmf():
    """Test binomial PMFs against the Pascal recurrence."""
    np.testing.assert_allclose(binomial_pmf(2, 0.5).mass, [0.25, 0.5, 0.25])
    assert binomial_pmf(5, 0.0).mass.tolist() == [1.0, 0, 0, 0, 0, 0]
    np.testing.assert_allclose(
        binomial_pmf(50, 0.3).mass, _pascal_binomial(50, 0.3), atol=1e-12
    )
    assert binomial_pmf(750, 0.37).mass.sum() == pytest.approx(1.0, abs=1e-9)

    with pytest.raises(ValueError):
        binomial_pmf(3, 1.5)


def test_pmf_convolution_preserves_normalization():
    """Test that convolving PMFs keeps unit mass."""
    pmf = binomial_pmf(7, 0.2).convolve(binomial_pmf(11, 0.6))
    assert pmf.mass.sum() == pytest.approx(1.0, abs=1e-12)
    assert pmf.support_max == 18
    assert pmf.mean() == pytest.approx(7 * 0.2 + 11 * 0.6)
    assert pmf.cdf(18) == pytest.approx(1.0)

    with pytest.raises(ValueError):
        Pmf(np.array([0.5, 0.2]))


def test_window_encoding():
    """Test that the oldest bit is the most significant one."""
    assert window_index((0, 1)) == 1
    assert window_index((1, 0)) == 2
    assert window_bits(6, 2) == (1, 1, 0)
    assert window_key(1, 2) == "001"
    for _index in range(16):
        assert window_index(window_bits(_index, 3)) == _index

    probs = window_probabilities(2, 0.3)
    assert probs.sum() == pytest.approx(1.0)
    assert probs[0] == pytest.approx(0.7**3)


def test_received_count_pmf_simple_windows():
    """Test the trivial windows."""
    coefficients = _coefficients(0.4, 0.2)
    assert received_count_pmf((0, 0), coefficients, 3).mass.tolist() == [1.0]
    np.testing.assert_allclose(
        received_count_pmf((0,), _coefficients(0.4), 3).mass, [1.0]
    )
    np.testing.assert_allclose(
        received_count_pmf((1,), _coefficients(0.4), 3).mass, binomial_pmf(3, 0.4).mass
    )


def test_received_count_pmf_matches_enumeration():
    """Test convolved binomials against per-molecule enumeration."""
    np.testing.assert_allclose(
        received_count_pmf((1, 1), _coefficients(0.4, 0.2), 3).mass,
        _enumerated_count_pmf((1, 1), [0.4, 0.2], 3),
        atol=1e-12,
    )

    rng = np.random.default_rng(2024)
    n_vectors = 0
    for _eta, _n_one in [(0, 4), (1, 1), (1, 2), (1, 4), (2, 1), (2, 2)]:
        for _ in range(4):
            p = rng.uniform(size=_eta + 1)
            p = p / p.sum() * rng.uniform(0.2, 0.95)
            coefficients = _coefficients(*p)
            n_vectors += 1
            tables = demod_prob_tables(coefficients, _n_one, range(_n_one * 3 + 1))
            for _index in range(2 ** (_eta + 1)):
                window = window_bits(_index, _eta)
                expected = _enumerated_count_pmf(window, list(p), _n_one)
                actual = received_count_pmf(window, coefficients, _n_one).mass
                assert np.max(np.abs(actual - expected[: actual.size])) < 1e-10
                assert np.max(np.abs(expected[actual.size :]), initial=0.0) < 1e-10

                for _tau, _model in tables.items():
                    assert _model.p_zero[_index] == pytest.approx(
                        expected[: _tau + 1].sum(), abs=1e-10
                    )
    assert n_vectors >= 20


def test_demod_prob_table():
    """Test threshold tables and their invariants."""
    coefficients = _coefficients(0.4, 0.2)
    model = demod_prob_table(coefficients, 3, 1)
    assert model.prob_zero((0, 0)) == 1.0
    assert model.prob_zero((1, 1)) == pytest.approx(
        _enumerated_count_pmf((1, 1), [0.4, 0.2], 3)[:2].sum()
    )
    assert is_monotone(model.p_zero, 1)
    assert len(model.table) == 4

    saturated = demod_prob_table(coefficients, 3, 6)
    assert np.all(saturated.p_zero == 1.0)

    tables = demod_prob_tables(coefficients, 3, [0, 1, 2, 3])
    stacked = np.stack([tables[_tau].p_zero for _tau in range(4)])
    assert np.all(np.diff(stacked, axis=0) >= -1e-15)


def test_demod_table_non_increasing_in_coefficients():
    """Test that a larger p_k never raises P(y=0|w) of windows using it."""
    low = demod_prob_table(_coefficients(0.3, 0.1), 5, 2)
    high = demod_prob_table(_coefficients(0.3, 0.2), 5, 2)
    assert np.all(high.p_zero <= low.p_zero + 1e-15)


def test_demodulation_model_validation():
    """Test that non-physical tables are rejected unless flagged."""
    table = {"00": 1.0, "01": 0.2, "10": 0.9, "11": 0.05}
    model = DemodulationModel(eta=1, n_one=3, tau=1, table=table)
    assert model.p_zero.tolist() == [1.0, 0.2, 0.9, 0.05]

    with pytest.raises(pydantic.ValidationError):
        DemodulationModel(eta=1, n_one=3, tau=1, table={**table, "11": 0.5})
    with pytest.raises(pydantic.ValidationError):
        DemodulationModel(eta=1, n_one=3, tau=1, table={**table, "00": 0.5})
    with pytest.raises(pydantic.ValidationError):
        DemodulationModel(eta=1, n_one=3, tau=1, table={"00": 1.0, "01": 0.2})

    constant = DemodulationModel(
        eta=1,
        n_one=3,
        tau=1,
        table=dict.fromkeys(table, 0.5),
        physical=False,
    )
    assert constant.p_zero.tolist() == [0.5] * 4


def test_demodulation_model_json_round_trip():
    """Test that tables survive JSON serialization."""
    model = demod_prob_table(_coefficients(0.4, 0.2), 3, 1)
    restored = DemodulationModel.model_validate_json(model.model_dump_json())
    np.testing.assert_array_equal(restored.p_zero, model.p_zero)
    assert restored.coefficients is not None
    assert restored.coefficients.p == [0.4, 0.2]


def test_demodulate():
    """Test the inclusive threshold rule."""
    assert demodulate(0, 1) == 0
    assert demodulate(2, 1) == 1
    assert demodulate(4, 4) == 0
    assert demodulate_counts(np.array([0, 1, 2, 3]), 1).tolist() == [0, 0, 1, 1]


def test_bit_error_probability():
    """Test the exact model-predicted error probability."""
    noiseless = DemodulationModel(
        eta=0, n_one=1, tau=0, table={"0": 1.0, "1": 0.0}
    )
    assert bit_error_probability(noiseless, 0.5) == 0.0

    model = DemodulationModel(eta=0, n_one=1, tau=0, table={"0": 1.0, "1": 0.3})
    assert bit_error_probability(model, 0.4) == pytest.approx(0.4 * 0.3)


def test_first_passage_cdf(small_config: SimulationConfig):
    """Test the point-source first passage probability."""
    radius = small_config.absorption_radius
    distance = small_config.release_distance
    assert first_passage_cdf(0.0, small_config) == 0.0
    assert first_passage_cdf(1e12, small_config) == pytest.approx(
        radius / distance, rel=1e-5
    )
    values = first_passage_cdf(np.array([0.5, 1.0, 2.0, 4.0]), small_config)
    assert np.all(np.diff(values) > 0)
    assert values[1] == pytest.approx(
        radius / distance * math.erfc((distance - radius) / 2.0)
    )


def test_analytical_coefficients(small_config: SimulationConfig):
    """Test coefficients from the first passage probability."""
    coefficients = analytical_coefficients(small_config, 20)
    assert coefficients.provenance == "analytical"
    assert coefficients.eta == 20
    assert sum(coefficients.p) < coefficients.metadata["asymptotic_hit_probability"]
    assert sum(coefficients.p) == pytest.approx(
        first_passage_cdf(21.0, small_config)
    )

    frozen = build_config(**{**small_config.model_dump(), "diffusion_coefficient": 0.0})
    assert analytical_coefficients(frozen, 3).p == [0.0] * 4


def test_reference_coefficients_decay():
    """Test that p_0 dominates and p_i decays at the reference deployment."""
    cfg = SimulationConfig.reference_default(4.0)
    assert cfg.symbol_duration == pytest.approx(0.4)
    p = analytical_coefficients(cfg, 14).array
    assert p[0] == p.max()
    assert np.all(np.diff(p) < 0)

"""Test the achievable-rate engine."""

import itertools
import math

import numpy as np
import pandas as pd
import pytest

from src.mcvd.channel import (
    DemodulationModel,
    analytical_coefficients,
    demod_prob_tables,
)
from src.mcvd.config import SimulationConfig
from src.mcvd.errors import ConfigurationError, InconsistentModelError
from src.mcvd.rate import (
    ChannelStateMachine,
    InputDistribution,
    RateSurface,
    achievable_rate,
    binary_entropy,
    conditional_entropy_rate,
    default_burn_in,
    forward_entropy_estimate,
    forward_log_likelihood,
    mutual_information_rate,
    output_entropy_upper_bound,
    sample_output_sequence,
)
from src.mcvd.rng import derive_generator


def _noiseless(eta: int) -> DemodulationModel:
    """``y`` equals the newest input bit."""
    p_zero = 1.0 - (np.arange(2 ** (eta + 1)) & 1)
    return DemodulationModel.from_array(p_zero, eta=eta, n_one=1, tau=0)


def _constant(eta: int, tau: int = 0) -> DemodulationModel:
    """Output independent of the input."""
    return DemodulationModel.from_array(
        np.full(2 ** (eta + 1), 0.5), eta=eta, n_one=1, tau=tau, physical=False
    )


def _random_model(eta: int, seed: int) -> DemodulationModel:
    rng = np.random.default_rng(seed)
    return DemodulationModel.from_array(
        rng.uniform(0.05, 0.95, 2 ** (eta + 1)), eta=eta, n_one=1, tau=0, physical=False
    )


def _exhaustive_log2_likelihood(
    y: np.ndarray, model: DemodulationModel, p_one: float
) -> float:
    """``log2 p(y^n)`` by summing over every input sequence."""
    total = 0.0
    for _bits in itertools.product([0, 1], repeat=y.size):
        history = (0,) * model.eta + _bits
        prob = math.prod(p_one if _b else 1.0 - p_one for _b in _bits)
        for _slot, _y in enumerate(y):
            window = history[_slot : _slot + model.eta + 1]
            p_zero = model.prob_zero(window)
            prob *= p_zero if _y == 0 else 1.0 - p_zero
        total += prob
    return math.log2(total)


def test_binary_entropy():
    """Test the binary entropy at its edges and midpoint."""
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.5) == pytest.approx(1.0)
    assert binary_entropy(0.11) == pytest.approx(
        -(0.11 * math.log2(0.11) + 0.89 * math.log2(0.89))
    )
    np.testing.assert_allclose(binary_entropy(np.array([0.2, 0.8])), [0.7219281, 0.7219281])


def test_state_machine():
    """Test state transitions and that each row of P(s'|s) sums to one."""
    machine = ChannelStateMachine.from_model(_noiseless(2), InputDistribution(p_one=0.3))
    assert machine.n_states == 8
    assert machine.next_state(0b011, 1) == 0b111
    assert machine.next_state(0b110, 0) == 0b100
    matrix = machine.transition_matrix()
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0)
    assert matrix[0b001, 0b011] == pytest.approx(0.3)
    assert matrix[0b001, 0b010] == pytest.approx(0.7)


def test_conditional_entropy_rate():
    """Test the exact conditional entropy on hand-evaluated tables."""
    half = InputDistribution(p_one=0.5)
    assert conditional_entropy_rate(_noiseless(3), half) == 0.0
    assert conditional_entropy_rate(_constant(2), half) == pytest.approx(1.0)

    model = DemodulationModel(
        eta=1,
        n_one=1,
        tau=0,
        table={"00": 1.0, "01": 0.2, "10": 0.9, "11": 0.05},
    )
    expected = 0.25 * (binary_entropy(0.2) + binary_entropy(0.9) + binary_entropy(0.05))
    assert conditional_entropy_rate(model, half) == pytest.approx(expected, rel=1e-12)


def test_upper_bound():
    """Test that the bound equals H_b(p_one) without noise and 0 without signal."""
    for _p_one in [0.1, 0.5, 0.8]:
        dist = InputDistribution(p_one=_p_one)
        assert output_entropy_upper_bound(_noiseless(2), dist) == pytest.approx(
            binary_entropy(_p_one)
        )
        assert output_entropy_upper_bound(_constant(2), dist) == pytest.approx(0.0, abs=1e-12)


def test_sample_output_sequence():
    """Test silent and noiseless output sequences."""
    zeros = sample_output_sequence(_noiseless(2), InputDistribution(p_one=0.0), 500, 3)
    assert not zeros.any()

    y = sample_output_sequence(_noiseless(2), InputDistribution(p_one=0.4), 1000, 3, 7)
    x = (derive_generator(3, "entropy", 7).random(1000) < 0.4).astype(np.int8)
    np.testing.assert_array_equal(y, x)

    with pytest.raises(ConfigurationError):
        sample_output_sequence(_noiseless(1), InputDistribution(p_one=0.5), 0, 3)


def test_sample_output_frequencies():
    """Test window-conditional output frequencies against the table."""
    model = _random_model(1, seed=2)
    dist = InputDistribution(p_one=0.5)
    n = 100_000
    y = sample_output_sequence(model, dist, n, 11)
    x = (derive_generator(11, "entropy").random(n) < 0.5).astype(np.int64)
    windows = 2 * np.concatenate([[0], x[:-1]]) + x
    for _window in range(4):
        mask = windows == _window
        p_zero = model.p_zero[_window]
        spread = math.sqrt(p_zero * (1 - p_zero) / mask.sum())
        assert abs(np.mean(y[mask] == 0) - p_zero) < 5 * spread


@pytest.mark.parametrize(("eta", "n", "p_one"), [(0, 12, 0.5), (1, 10, 0.3), (2, 9, 0.7)])
def test_forward_matches_exhaustive(eta: int, n: int, p_one: float):
    """Test the forward recursion against enumeration of every input sequence."""
    model = _random_model(eta, seed=eta)
    dist = InputDistribution(p_one=p_one)
    y = sample_output_sequence(model, dist, n, 5)
    assert forward_log_likelihood(y, model, dist) == pytest.approx(
        _exhaustive_log2_likelihood(y, model, p_one), abs=1e-9
    )

    burn_in = 3
    conditional = forward_log_likelihood(y, model, dist, burn_in=burn_in)
    prefix = _exhaustive_log2_likelihood(y[:burn_in], model, p_one)
    assert conditional == pytest.approx(
        _exhaustive_log2_likelihood(y, model, p_one) - prefix, abs=1e-9
    )


def test_forward_on_iid_channel():
    """Test that a history-free table gives the plug-in entropy of an i.i.d. source."""
    p_zero = np.tile([0.9, 0.2], 4)
    model = DemodulationModel.from_array(p_zero, eta=2, n_one=1, tau=0, physical=False)
    dist = InputDistribution(p_one=0.35)
    y = sample_output_sequence(model, dist, 20_000, 1)
    burn_in = default_burn_in(2, y.size)
    assert burn_in == 30

    q_zero = 0.65 * 0.9 + 0.35 * 0.2
    tail = y[burn_in:]
    plug_in = -np.mean(np.where(tail == 0, math.log2(q_zero), math.log2(1 - q_zero)))
    assert forward_entropy_estimate(y, model, dist) == pytest.approx(plug_in, abs=1e-9)


def test_forward_errors():
    """Test rejection of impossible outputs and bad burn-in."""
    silent = InputDistribution(p_one=0.0)
    with pytest.raises(InconsistentModelError):
        forward_log_likelihood([0, 1], _noiseless(1), silent)
    with pytest.raises(ConfigurationError):
        forward_log_likelihood([], _noiseless(1), silent)
    with pytest.raises(ConfigurationError):
        forward_log_likelihood([0, 0], _noiseless(1), silent, burn_in=2)
    assert default_burn_in(3, 50) == 0


def test_mutual_information_noiseless_and_constant():
    """Test I = H_b(p_one) without noise and I = 0 without signal."""
    for _p_one in [0.2, 0.5]:
        estimate = mutual_information_rate(
            _noiseless(2), InputDistribution(p_one=_p_one), 50_000, seed=0, n_seeds=2
        )
        assert estimate.conditional_entropy == 0.0
        assert estimate.mutual_information == pytest.approx(binary_entropy(_p_one), abs=0.01)
        assert estimate.seeds == [0, 1]

    flat = mutual_information_rate(_constant(2), InputDistribution(p_one=0.3), 1_000, seed=0)
    assert flat.mutual_information == pytest.approx(0.0, abs=1e-12)
    assert math.isnan(flat.std_err)


def test_mutual_information_independent_of_workers():
    """Test identical seed estimates for 1 and 8 worker threads."""
    model = _random_model(3, seed=4)
    dist = InputDistribution(p_one=0.5)
    serial = mutual_information_rate(model, dist, 5_000, seed=9, n_seeds=4)
    threaded = mutual_information_rate(model, dist, 5_000, seed=9, n_seeds=4, max_workers=8)
    assert serial.per_seed == threaded.per_seed
    assert serial.std_err > 0

    with pytest.raises(ConfigurationError):
        mutual_information_rate(model, dist, 100, seed=0, n_seeds=0)


def test_achievable_rate_pruning():
    """Test that opt-in pruning skips cells whose bound cannot beat the best estimate."""
    models = {0: _noiseless(1), 1: _constant(1, tau=1)}
    pruned = achievable_rate(
        models, [0.3, 0.5], 20_000, seed=1, symbol_duration=0.4, prune=True
    )
    assert pruned.frame["evaluated"].sum() == 1
    assert pruned.argmax == (0, 0.5)
    assert pruned.achievable_rate_per_second == pytest.approx(pruned.achievable_rate / 0.4)

    full = achievable_rate(models, [0.3, 0.5], 20_000, seed=1, symbol_duration=0.4)
    assert full.frame["evaluated"].all()
    assert full.frame["I_bits_per_use"].notna().all()
    threaded = achievable_rate(
        models, [0.3, 0.5], 20_000, seed=1, symbol_duration=0.4, max_workers=4
    )
    pd.testing.assert_frame_equal(threaded.frame, full.frame)
    assert full.argmax == pruned.argmax
    assert full.achievable_rate == pruned.achievable_rate

    frame = full.to_frame()
    assert list(frame.columns) == [
        "tau",
        "p_one",
        "I_bits_per_use",
        "std_err",
        "upper_bound",
        "evaluated",
    ]
    assert np.all(frame.loc[frame["tau"] == 1, "I_bits_per_use"].abs() < 1e-12)

    summary = pruned.summary()
    assert summary["argmax"] == {"tau": 0, "p_one": 0.5}
    assert summary["n_evaluated"] == 1
    assert summary["n_cells"] == 4


def test_achievable_rate_validation():
    """Test rejection of empty grids and mixed windows."""
    with pytest.raises(ConfigurationError):
        achievable_rate({}, [0.5], 100, seed=0, symbol_duration=1.0)
    with pytest.raises(ConfigurationError):
        achievable_rate(
            {0: _noiseless(1), 1: _noiseless(2)}, [0.5], 100, seed=0, symbol_duration=1.0
        )


def test_argmax_ties():
    """Test that ties go to the smallest tau, then to p_one closest to 0.5."""
    frame = pd.DataFrame(
        {
            "tau": [1, 1, 1, 2, 3],
            "p_one": [0.3, 0.6, 0.5, 0.5, 0.5],
            "I_bits_per_use": [0.7, 0.7, 0.6, 0.7, np.nan],
            "std_err": [0.0] * 5,
            "upper_bound": [1.0] * 5,
            "evaluated": [True, True, True, True, False],
        }
    )
    surface = RateSurface(frame=frame, eta=1, symbol_duration=2.0, n=10, seeds=[0])
    assert surface.argmax == (1, 0.6)
    assert surface.achievable_rate == 0.7
    assert surface.achievable_rate_per_second == 0.35


@pytest.mark.integration_test
def test_entropy_estimate_converges_across_seeds():
    """Test the cross-seed spread and the lower bound of the entropy estimate."""
    cfg = SimulationConfig.reference_default(4.0)
    models = demod_prob_tables(
        analytical_coefficients(cfg, 1), cfg.molecules_per_one, range(1, 51)
    )
    dist = InputDistribution(p_one=0.5)
    tau = max(models, key=lambda _tau: output_entropy_upper_bound(models[_tau], dist))
    estimate = mutual_information_rate(
        models[tau], dist, 100_000, seed=5, n_seeds=10, max_workers=4
    )
    spread = float(np.std(estimate.per_seed, ddof=1))
    assert spread < 1e-3
    assert estimate.output_entropy >= estimate.conditional_entropy - estimate.std_err
    assert estimate.mutual_information <= binary_entropy(0.5) + estimate.std_err


TABLE_DISTANCES = [4.0, 8.0, 12.0, 16.0, 20.0, 24.0]


@pytest.mark.integration_test
def test_achievable_rate_trends_over_distance():
    """Test the rate table trends for the six reference distances.

    Rates fall with distance, the one-slot window is optimistic and the best
    input law is close to equiprobable.
    """
    taus = list(range(1, 51))
    p_ones = np.round(np.arange(0.05, 0.951, 0.05), 2).tolist()
    rates: dict[tuple[float, int], float] = {}
    for _index, _distance in enumerate(TABLE_DISTANCES):
        cfg = SimulationConfig.reference_default(_distance)
        for _eta in (1, 14):
            models = demod_prob_tables(
                analytical_coefficients(cfg, _eta), cfg.molecules_per_one, taus
            )
            surface = achievable_rate(
                models,
                p_ones,
                100_000,
                seed=_index,
                symbol_duration=cfg.symbol_duration,
                n_seeds=4,
                prune=True,
                max_workers=4,
            )
            rates[_distance, _eta] = surface.achievable_rate
            assert abs(surface.argmax[1] - 0.5) <= 0.1
            assert surface.achievable_rate_per_second == pytest.approx(
                surface.achievable_rate / cfg.symbol_duration
            )

    for _eta in (1, 14):
        series = [rates[_d, _eta] for _d in TABLE_DISTANCES]
        assert all(_far <= _near + 1e-3 for _near, _far in itertools.pairwise(series))
    for _distance in TABLE_DISTANCES:
        assert rates[_distance, 1] >= rates[_distance, 14] - 1e-3

    assert rates[4.0, 14] == pytest.approx(0.9999, abs=0.03)
    assert rates[4.0, 1] == pytest.approx(1.0, abs=0.03)

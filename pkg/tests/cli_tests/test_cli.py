"""Test the experiment runner end to end on a tiny scenario."""

from pathlib import Path

import pandas as pd
import pytest

from src.mcvd.cli import (
    SCALE_PRESETS,
    ExperimentSpec,
    build_parser,
    main,
    resolve_spec,
)
from src.mcvd.config import ScenarioFile
from src.mcvd.errors import ConfigurationError
from src.mcvd.io import read_envelope, read_json
from src.utils import Configs


TINY_SCENARIO = """
[simulation]
diffusion_coefficient = 1.0
receiver_radius = 1.0
transmitter_radius = 0.1
molecule_radius = 0.01
symbol_duration = 0.2
micro_steps_per_slot = 20
molecules_per_one = 20

[axes]
distances = "0.5,1.0"
etas = [1, 2]
rate_etas = [1]
taus = [2, 5]
p_ones = [0.3, 0.5]
alphas = [0.05]
"""


@pytest.fixture()
def scenario_path(tmp_path: Path) -> Path:
    """Scenario TOML with close nodes and few micro steps."""
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_SCENARIO, encoding="utf-8")
    return path


def _run(command: str, scenario_path: Path, out: Path, *extra: str) -> int:
    return main([command, "--config", str(scenario_path), "--out", str(out), *extra])


def test_parser_axes_and_defaults():
    """Test sub-commands and axis flags."""
    args = build_parser().parse_args(
        ["rate", "--distances", "4,8", "--rate-etas", "1,14", "--prune"]
    )
    assert args.command == "rate"
    assert args.distances == "4,8"
    assert args.rate_etas == "1,14"
    assert args.prune

    with pytest.raises(SystemExit):
        build_parser().parse_args(["teleport"])


def test_spec_defaults_per_command():
    """Test engine defaults and the provenance restriction."""
    simulate = ExperimentSpec(command="simulate")
    assert simulate.engine == "tracking"
    assert simulate.max_delay_slots == max(simulate.axes.etas) + 1
    assert ExperimentSpec(command="verify").engine == "delay-sampling"
    assert ExperimentSpec(command="rate").engine is None
    assert ExperimentSpec(command="coeffs", provenance="both").provenances == [
        "analytical",
        "monte-carlo",
    ]
    assert SCALE_PRESETS["paper"].entropy_n == 1_000_000
    assert SCALE_PRESETS["desk"].bits_per_trace == 1_000

    with pytest.raises(ValueError):
        ExperimentSpec(command="verify", provenance="both")


def test_resolve_spec_overrides(scenario_path: Path):
    """Test that axis flags override the config file."""
    args = build_parser().parse_args(
        ["sweep", "--config", str(scenario_path), "--taus", "1:3", "--seed", "7"]
    )
    spec, configs = resolve_spec(args, Configs())
    assert spec.axes.taus == [1, 2, 3]
    assert spec.axes.distances == [0.5, 1.0]
    assert spec.seed == 7
    assert configs.max_workers == 1

    args = build_parser().parse_args(["sweep", "--workers", "0"])
    with pytest.raises(ConfigurationError):
        resolve_spec(args, Configs())


def test_invalid_arguments_exit_code(
    scenario_path: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]
):
    """Test that bad arguments end with exit code 2 and a message."""
    assert _run("verify", scenario_path, tmp_path / "v", "--provenance", "both") == 2
    assert "mcvd: error:" in capsys.readouterr().err

    assert main(["sweep", "--config", str(tmp_path / "missing.toml")]) == 2
    assert "not found" in capsys.readouterr().err

    assert _run("sweep", scenario_path, tmp_path / "s", "--alphas", "1.5") == 2


def test_sweep(scenario_path: Path, tmp_path: Path):
    """Test the predicted bit error table."""
    assert _run("sweep", scenario_path, tmp_path) == 0
    frame = pd.read_csv(tmp_path / "sweep.csv")
    assert list(frame.columns) == [
        "d",
        "eta",
        "tau",
        "p_one",
        "bit_error_probability",
        "residual_isi",
    ]
    assert len(frame) == 2 * 2 * 2 * 2
    assert frame["bit_error_probability"].between(0, 1).all()
    longest = frame[frame["eta"] == 2]
    assert (longest["residual_isi"] == 0).all()

    manifest = read_json(tmp_path / "manifest.json")
    assert manifest["outputs"] == ["sweep.csv"]
    assert manifest["spec"]["command"] == "sweep"


def test_coeffs_both_provenances(scenario_path: Path, tmp_path: Path):
    """Test analytical and Monte Carlo coefficient files."""
    assert _run("coeffs", scenario_path, tmp_path, "--provenance", "both") == 0
    analytical = read_envelope(tmp_path / "coeffs_d0.5_analytical.json")
    estimated = read_envelope(tmp_path / "coeffs_d0.5_monte-carlo.json")
    assert analytical.kind == "channel-coefficients"
    assert analytical.metadata["eta"] == 2
    assert len(analytical.data["p"]) == 3
    assert estimated.provenance == "monte-carlo"
    assert len(estimated.data["std_err"]) == 3
    assert (tmp_path / "coeffs_d1_monte-carlo.json").exists()


def test_simulate(scenario_path: Path, tmp_path: Path):
    """Test trace, arrival and summary files."""
    assert _run("simulate", scenario_path, tmp_path, "--distances", "0.5") == 0
    trace = pd.read_csv(tmp_path / "trace_d0.5.csv")
    assert list(trace.columns) == ["slot", "tx_bit", "count", "rx_bit"]
    assert len(trace) == SCALE_PRESETS["desk"].bits_per_trace

    arrivals = pd.read_csv(tmp_path / "arrivals_d0.5.csv")
    assert list(arrivals.columns) == ["slot", "count", "fraction", "model_p"]
    assert len(arrivals) == 3

    summary = read_envelope(tmp_path / "trace_d0.5.json")
    assert 0 <= summary.data["bit_error_ratio"] <= 1
    assert summary.metadata["tau"] in (2, 5)


def test_verify(scenario_path: Path, tmp_path: Path):
    """Test the fit grid and its three aggregate views."""
    assert _run("verify", scenario_path, tmp_path) == 0
    grid = pd.read_csv(tmp_path / "fit_grid.csv")
    assert list(grid.columns) == ["d", "eta", "tau", "alpha", "ratio", "n_tested", "n_excluded"]
    assert len(grid) == 2 * 2 * 2
    assert ((grid["n_tested"] + grid["n_excluded"]) == SCALE_PRESETS["desk"].repetitions).all()
    assert len(pd.read_csv(tmp_path / "fig1_ratio_vs_eta.csv")) == 2
    assert len(pd.read_csv(tmp_path / "fig2_ratio_vs_eta_distance.csv")) == 4
    assert len(pd.read_csv(tmp_path / "fig3_ratio_vs_tau_distance.csv")) == 8


def test_verify_tracking_delay_limit(scenario_path: Path, tmp_path: Path):
    """Test that the tracked fit grid uses and records the delay limit."""
    assert (
        _run(
            "verify",
            scenario_path,
            tmp_path,
            "--engine",
            "tracking",
            "--max-delay-slots",
            "2",
            "--workers",
            "2",
        )
        == 0
    )
    envelope = read_envelope(tmp_path / "fit_grid.json")
    assert envelope.metadata["engine"] == "tracking"
    assert envelope.metadata["max_delay_slots"] == 2
    manifest = read_json(tmp_path / "manifest.json")
    assert manifest["spec"]["max_delay_slots"] == 2


def test_rate(scenario_path: Path, tmp_path: Path):
    """Test the rate surface and the achievable rate table."""
    assert _run("rate", scenario_path, tmp_path, "--distances", "0.5", "--workers", "2") == 0
    surface = pd.read_csv(tmp_path / "rate_surface_d0.5_eta1.csv")
    assert len(surface) == 4
    table = pd.read_csv(tmp_path / "achievable_rate_table.csv")
    assert list(table.columns) == ["d", "t_s", "rate_eta1", "bits_per_sec"]
    row = table.iloc[0]
    assert row["t_s"] == pytest.approx(0.2)
    assert row["bits_per_sec"] == pytest.approx(row["rate_eta1"] / 0.2)

    summary = read_envelope(tmp_path / "rate_summary_d0.5_eta1.json")
    assert summary.data["achievable_rate"] == pytest.approx(row["rate_eta1"])


def test_manifest_rerun_is_byte_identical(scenario_path: Path, tmp_path: Path):
    """Test that a manifest reproduces every output file."""
    first = tmp_path / "first"
    assert _run("simulate", scenario_path, first, "--distances", "1.0", "--seed", "3") == 0

    second = tmp_path / "second"
    assert main(
        ["simulate", "--manifest", str(first / "manifest.json"), "--out", str(second)]
    ) == 0
    names = sorted(_path.name for _path in first.iterdir())
    assert names == sorted(_path.name for _path in second.iterdir())
    for _name in names:
        assert (first / _name).read_bytes() == (second / _name).read_bytes()

    assert main(
        ["verify", "--manifest", str(first / "manifest.json"), "--out", str(second)]
    ) == 2


@pytest.mark.parametrize(
    ("command", "extra"),
    [
        ("coeffs", ["--provenance", "both"]),
        ("simulate", []),
        ("verify", ["--engine", "tracking", "--max-delay-slots", "2"]),
        ("rate", ["--distances", "0.5"]),
        ("sweep", []),
    ],
)
def test_outputs_independent_of_workers(
    scenario_path: Path, tmp_path: Path, command: str, extra: list[str]
):
    """Test byte-identical outputs for 1 and 8 worker threads."""
    serial, threaded = tmp_path / "serial", tmp_path / "threaded"
    for _out, _workers in [(serial, "1"), (threaded, "8")]:
        assert _run(command, scenario_path, _out, "--workers", _workers, *extra) == 0

    names = sorted(_path.name for _path in serial.iterdir())
    assert names == sorted(_path.name for _path in threaded.iterdir())
    for _name in names:
        assert (serial / _name).read_bytes() == (threaded / _name).read_bytes()


def test_default_scenario_matches_reference_axes():
    """Test the built-in scenario axes."""
    axes = ScenarioFile().axes
    assert axes.distances == [4.0, 8.0, 12.0, 16.0, 20.0, 24.0]
    assert axes.taus == list(range(1, 51))
    assert len(axes.p_ones) == 19
    assert axes.rate_etas == [1, 14]

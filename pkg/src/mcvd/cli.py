"""Experiment runner for the MCvD channel toolkit.

Usage
-----
    uv run -m src.mcvd coeffs --provenance both --out outputs/coeffs
    uv run -m src.mcvd simulate --distances 4,8 --out outputs/simulate
    uv run -m src.mcvd verify --scale desk --out outputs/verify
    uv run -m src.mcvd rate --config configs/paper.toml --out outputs/rate
    uv run -m src.mcvd sweep --etas 0:14 --out outputs/sweep
    uv run -m src.mcvd rate --manifest outputs/rate/manifest.json --out rerun

Every run writes ``manifest.json`` next to its outputs. It holds the fully
resolved spec and the runtime knobs that shape the random streams, and can be
passed back with ``--manifest`` to reproduce the run byte for byte.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import pandas as pd
import pydantic
from dotenv import load_dotenv

from src.utils import Configs, pretty_print, set_up_logging

from .channel import bit_error_probability, residual_mass
from .config import MAX_SEED, ScenarioAxes, ScenarioFile, load_scenario
from .context import ExperimentContext
from .diffusion import (
    Engine,
    bit_error_ratio,
    random_bits,
    simulate_impulse,
    simulate_sequence,
    step_convergence,
)
from .errors import ConfigurationError, McvdError
from .io import read_json, write_csv, write_envelope, write_json
from .rate import achievable_rate
from .rng import derive_seed
from .verification import run_fit_grid


logger = logging.getLogger(__name__)

Command = Literal["coeffs", "simulate", "verify", "rate", "sweep"]
Scale = Literal["desk", "paper"]
ProvenanceChoice = Literal["analytical", "monte-carlo", "both"]
AXES = ("distances", "etas", "rate_etas", "taus", "p_ones", "alphas")


class ScalePreset(pydantic.BaseModel):
    """Sizes fixed by a scale preset."""

    model_config = pydantic.ConfigDict(frozen=True)

    bits_per_trace: int
    repetitions: int
    entropy_n: int
    entropy_seeds: int
    n_molecules: int


SCALE_PRESETS: dict[str, ScalePreset] = {
    "desk": ScalePreset(
        bits_per_trace=1_000,
        repetitions=10,
        entropy_n=100_000,
        entropy_seeds=4,
        n_molecules=10_000,
    ),
    "paper": ScalePreset(
        bits_per_trace=10_000,
        repetitions=30,
        entropy_n=1_000_000,
        entropy_seeds=10,
        n_molecules=100_000,
    ),
}


class ExperimentSpec(pydantic.BaseModel):
    """Fully resolved description of one command run.

    The output directory and the worker count are not part of the spec: they
    never change the content of the outputs.
    """

    model_config = pydantic.ConfigDict(extra="forbid")

    command: Command
    scale: Scale = "desk"
    seed: int = pydantic.Field(default=0, ge=0, le=MAX_SEED)
    provenance: ProvenanceChoice = "analytical"
    engine: Engine | None = None
    max_delay_slots: int | None = pydantic.Field(default=None, ge=1)
    tau: int | None = pydantic.Field(default=None, ge=0)
    check_convergence: bool = False
    prune: bool = False
    scenario: ScenarioFile = ScenarioFile()

    @pydantic.model_validator(mode="after")
    def _resolve_defaults(self) -> "ExperimentSpec":
        if self.provenance == "both" and self.command != "coeffs":
            raise ValueError("--provenance both is only supported by coeffs")
        if self.engine is None and self.command in ("simulate", "verify"):
            self.engine = "tracking" if self.command == "simulate" else "delay-sampling"
        if self.engine == "tracking" and self.max_delay_slots is None:
            self.max_delay_slots = max(self.scenario.axes.etas) + 1
        return self

    @property
    def preset(self) -> ScalePreset:
        """Sizes of the chosen scale."""
        return SCALE_PRESETS[self.scale]

    @property
    def axes(self) -> ScenarioAxes:
        """Grid axes of the scenario."""
        return self.scenario.axes

    @property
    def provenances(self) -> list[str]:
        """Coefficient sources to produce."""
        if self.provenance == "both":
            return ["analytical", "monte-carlo"]
        return [self.provenance]


class RuntimeKnobs(pydantic.BaseModel):
    """``Configs`` values that determine the random stream layout."""

    molecule_batch_size: int
    chunk_steps: int


class Manifest(pydantic.BaseModel):
    """Everything needed to rerun a command."""

    spec: ExperimentSpec
    runtime: RuntimeKnobs
    outputs: list[str]


def _fmt(value: float) -> str:
    return f"{value:g}"


def _single_provenance(spec: ExperimentSpec) -> str:
    return spec.provenances[0]


def _best_threshold(
    ctx: ExperimentContext, distance: float, eta: int, provenance: str, taus: list[int]
) -> int:
    """Threshold with the smallest predicted bit error probability at p_one=0.5."""
    models = ctx.demodulation_models(distance, eta, provenance, taus)
    errors = {_tau: bit_error_probability(_model, 0.5) for _tau, _model in models.items()}
    return min(sorted(errors), key=lambda _tau: errors[_tau])


def cmd_coeffs(spec: ExperimentSpec, ctx: ExperimentContext, out: Path) -> list[Path]:
    """Write ``p_0..p_eta`` per distance and provenance."""
    eta = max([*spec.axes.etas, *spec.axes.rate_etas])
    outputs: list[Path] = []
    for _d in spec.axes.distances:
        cfg = ctx.simulation_config(_d)
        for _provenance in spec.provenances:
            coefficients = ctx.coefficients(_d, eta, _provenance)
            outputs.append(
                write_envelope(
                    out / f"coeffs_d{_fmt(_d)}_{_provenance}.json",
                    kind="channel-coefficients",
                    data=coefficients,
                    config=cfg,
                    seed=spec.seed,
                    provenance=_provenance,
                    metadata={"eta": eta, "survival": coefficients.survival},
                )
            )

        if spec.check_convergence:
            report = step_convergence(
                cfg,
                spec.preset.n_molecules,
                seed=derive_seed(spec.seed, "convergence", ctx.distance_index(_d)),
                configs=ctx.configs,
            )
            if not report.passed:
                logger.warning(
                    "d=%s: halving the micro step moved p_0 by %.2f std errors",
                    _d,
                    report.difference_in_std_err,
                )
            outputs.append(
                write_envelope(
                    out / f"convergence_d{_fmt(_d)}.json",
                    kind="step-convergence",
                    data=report,
                    config=cfg,
                    seed=spec.seed,
                    provenance="monte-carlo",
                )
            )
    return outputs


def cmd_simulate(spec: ExperimentSpec, ctx: ExperimentContext, out: Path) -> list[Path]:
    """Simulate one i.i.d. trace and one impulse response per distance."""
    provenance = _single_provenance(spec)
    eta = max(spec.axes.etas)
    outputs: list[Path] = []
    for _index, _d in enumerate(spec.axes.distances):
        cfg = ctx.simulation_config(_d)
        tau = spec.tau
        if tau is None:
            tau = _best_threshold(ctx, _d, eta, provenance, spec.axes.taus)
        model = ctx.demodulation_models(_d, eta, provenance, [tau])[tau]

        tx_bits = random_bits(spec.preset.bits_per_trace, 0.5, spec.seed, _index)
        trace = simulate_sequence(
            cfg,
            tx_bits,
            engine=spec.engine or "tracking",
            max_delay_slots=spec.max_delay_slots,
            seed=derive_seed(spec.seed, "sequence", _index),
            configs=ctx.configs,
        ).demodulated(tau)
        outputs.append(
            write_csv(
                pd.DataFrame(
                    {
                        "slot": np.arange(len(trace)),
                        "tx_bit": trace.tx_bits,
                        "count": trace.rx_counts,
                        "rx_bit": trace.rx_bits,
                    }
                ),
                out / f"trace_d{_fmt(_d)}.csv",
            )
        )

        histogram = simulate_impulse(
            cfg,
            spec.preset.n_molecules,
            eta + 1,
            seed=derive_seed(spec.seed, "impulse", _index),
            configs=ctx.configs,
        )
        outputs.append(
            write_csv(
                pd.DataFrame(
                    {
                        "slot": np.arange(eta + 1),
                        "count": histogram.slot_counts,
                        "fraction": histogram.fractions,
                        "model_p": ctx.coefficients(_d, eta, provenance).array,
                    }
                ),
                out / f"arrivals_d{_fmt(_d)}.csv",
            )
        )
        outputs.append(
            write_envelope(
                out / f"trace_d{_fmt(_d)}.json",
                kind="transmission-trace",
                data={
                    "bit_error_ratio": bit_error_ratio(trace),
                    "predicted_bit_error_probability": bit_error_probability(model, 0.5),
                    "impulse_survivors": histogram.survivors,
                    "impulse_emitted": histogram.total_emitted,
                },
                config=cfg,
                seed=spec.seed,
                provenance=provenance,
                metadata={**trace.metadata, "tau": tau, "eta": eta},
            )
        )
    return outputs


def cmd_verify(spec: ExperimentSpec, ctx: ExperimentContext, out: Path) -> list[Path]:
    """Chi-square fit grid and its three aggregate views."""
    grid = run_fit_grid(
        [ctx.simulation_config(_d) for _d in spec.axes.distances],
        etas=spec.axes.etas,
        taus=spec.axes.taus,
        alphas=spec.axes.alphas,
        n_repetitions=spec.preset.repetitions,
        n_bits=spec.preset.bits_per_trace,
        seed=spec.seed,
        engine=spec.engine or "delay-sampling",
        provenance=_single_provenance(spec),  # type: ignore[arg-type]
        n_molecules=spec.preset.n_molecules,
        max_delay_slots=spec.max_delay_slots,
        configs=ctx.configs,
    )
    return [
        write_csv(grid.to_frame(), out / "fit_grid.csv"),
        write_csv(grid.records, out / "fit_grid_tests.csv"),
        write_csv(grid.ratio_vs_eta(), out / "fig1_ratio_vs_eta.csv"),
        write_csv(grid.ratio_vs_eta_distance(), out / "fig2_ratio_vs_eta_distance.csv"),
        write_csv(grid.ratio_vs_tau_distance(), out / "fig3_ratio_vs_tau_distance.csv"),
        write_envelope(
            out / "fit_grid.json",
            kind="fit-grid",
            data=grid.ratio_vs_eta().to_dict(orient="records"),
            config=spec.scenario,
            seed=spec.seed,
            provenance=_single_provenance(spec),
            metadata=grid.metadata,
        ),
    ]


def cmd_rate(spec: ExperimentSpec, ctx: ExperimentContext, out: Path) -> list[Path]:
    """Rate surfaces per ``(d, eta)`` and the achievable rate table."""
    provenance = _single_provenance(spec)
    realistic_eta = max(spec.axes.rate_etas)
    outputs: list[Path] = []
    table_rows = []
    for _index, _d in enumerate(spec.axes.distances):
        cfg = ctx.simulation_config(_d)
        row: dict[str, float] = {"d": _d, "t_s": cfg.symbol_duration}
        for _eta in sorted(spec.axes.rate_etas):
            surface = achievable_rate(
                ctx.demodulation_models(_d, _eta, provenance, spec.axes.taus),
                spec.axes.p_ones,
                n=spec.preset.entropy_n,
                seed=derive_seed(spec.seed, "entropy", _index, _eta),
                symbol_duration=cfg.symbol_duration,
                n_seeds=spec.preset.entropy_seeds,
                prune=spec.prune,
                max_workers=ctx.configs.max_workers,
            )
            stem = f"d{_fmt(_d)}_eta{_eta}"
            outputs.append(write_csv(surface.to_frame(), out / f"rate_surface_{stem}.csv"))
            outputs.append(
                write_envelope(
                    out / f"rate_summary_{stem}.json",
                    kind="rate-summary",
                    data=surface.summary(),
                    config=cfg,
                    seed=spec.seed,
                    provenance=provenance,
                )
            )
            row[f"rate_eta{_eta}"] = surface.achievable_rate
            if _eta == realistic_eta:
                row["bits_per_sec"] = surface.achievable_rate_per_second
        table_rows.append(row)

    outputs.append(write_csv(pd.DataFrame(table_rows), out / "achievable_rate_table.csv"))
    return outputs


def cmd_sweep(spec: ExperimentSpec, ctx: ExperimentContext, out: Path) -> list[Path]:
    """Model-predicted bit error probability and residual ISI per grid cell."""
    provenance = _single_provenance(spec)
    horizon = max(spec.axes.etas)
    rows = []
    for _d in spec.axes.distances:
        long_coefficients = ctx.coefficients(_d, horizon, provenance)
        for _eta in sorted(spec.axes.etas):
            models = ctx.demodulation_models(_d, _eta, provenance, spec.axes.taus)
            residual = residual_mass(long_coefficients, _eta)
            rows.extend(
                {
                    "d": _d,
                    "eta": _eta,
                    "tau": _tau,
                    "p_one": _p_one,
                    "bit_error_probability": bit_error_probability(_model, _p_one),
                    "residual_isi": residual,
                }
                for _tau, _model in models.items()
                for _p_one in spec.axes.p_ones
            )
    return [write_csv(pd.DataFrame(rows), out / "sweep.csv")]


COMMANDS: dict[str, Callable[[ExperimentSpec, ExperimentContext, Path], list[Path]]] = {
    "coeffs": cmd_coeffs,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "rate": cmd_rate,
    "sweep": cmd_sweep,
}


def run_command(spec: ExperimentSpec, out: Path, configs: Configs) -> Manifest:
    """Run one command and write its manifest."""
    ctx = ExperimentContext(spec.scenario, spec.seed, spec.preset.n_molecules, configs)
    outputs = COMMANDS[spec.command](spec, ctx, out)
    manifest = Manifest(
        spec=spec,
        runtime=RuntimeKnobs(
            molecule_batch_size=configs.molecule_batch_size,
            chunk_steps=configs.chunk_steps,
        ),
        outputs=sorted(_path.name for _path in outputs),
    )
    write_json(manifest, out / "manifest.json")
    return manifest


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one sub-command per experiment."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Scenario TOML file (default: reference setup)")
    common.add_argument("--seed", type=int, default=None, help="Master seed (u64)")
    common.add_argument("--scale", choices=list(SCALE_PRESETS), default=None)
    common.add_argument("--out", help="Output directory (default: MCVD_OUTPUT_DIR)")
    common.add_argument(
        "--provenance", choices=["analytical", "monte-carlo", "both"], default=None
    )
    common.add_argument("--engine", choices=["tracking", "delay-sampling"], default=None)
    common.add_argument("--workers", type=int, default=None, help="Worker threads")
    common.add_argument("--manifest", help="Rerun from a manifest.json")
    common.add_argument("--check-convergence", action="store_true")
    common.add_argument("--tau", type=int, default=None, help="simulate: threshold")
    common.add_argument("--max-delay-slots", type=int, default=None)
    common.add_argument(
        "--prune",
        action="store_true",
        help="rate: skip cells whose entropy bound cannot beat the best estimate",
    )
    for _axis in AXES:
        common.add_argument(
            f"--{_axis.replace('_', '-')}",
            dest=_axis,
            default=None,
            help="List 'a,b,c' or inclusive range 'start:stop[:step]'",
        )

    parser = argparse.ArgumentParser(
        prog="mcvd",
        description="ISI-aware MCvD channel simulation, verification and rate analysis.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for _name, _fn in COMMANDS.items():
        subparsers.add_parser(_name, parents=[common], help=_fn.__doc__)
    return parser


def _scenario_from_args(args: argparse.Namespace) -> ScenarioFile:
    scenario = load_scenario(args.config)
    overrides = {
        _axis: getattr(args, _axis) for _axis in AXES if getattr(args, _axis) is not None
    }
    if not overrides:
        return scenario
    axes = ScenarioAxes.model_validate(
        {**scenario.axes.model_dump(), **overrides}
    )
    return scenario.model_copy(update={"axes": axes})


def resolve_spec(
    args: argparse.Namespace, configs: Configs
) -> tuple[ExperimentSpec, Configs]:
    """Build the spec and runtime settings from arguments or a manifest.

    Raises
    ------
    ConfigurationError
        With the validation message when the arguments are inconsistent.
    """
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigurationError(f"--workers must be positive, got {args.workers}")
        configs = configs.model_copy(update={"max_workers": args.workers})

    try:
        if args.manifest:
            manifest = Manifest.model_validate(read_json(Path(args.manifest)))
            if manifest.spec.command != args.command:
                raise ConfigurationError(
                    f"Manifest is for '{manifest.spec.command}', not '{args.command}'"
                )
            return manifest.spec, configs.model_copy(
                update=manifest.runtime.model_dump()
            )

        params = {
            "command": args.command,
            "scale": args.scale,
            "seed": args.seed,
            "provenance": args.provenance,
            "engine": args.engine,
            "max_delay_slots": args.max_delay_slots,
            "tau": args.tau,
            "check_convergence": args.check_convergence or None,
            "prune": args.prune or None,
        }
        spec = ExperimentSpec(
            scenario=_scenario_from_args(args),
            **{_key: _value for _key, _value in params.items() if _value is not None},
        )
    except pydantic.ValidationError as exc:
        raise ConfigurationError(f"Invalid arguments: {exc}") from exc
    return spec, configs


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI; returns the process exit code."""
    args = build_parser().parse_args(argv)

    load_dotenv()
    configs = Configs()  # pyright: ignore[reportCallIssue]
    set_up_logging(configs.log_level)

    try:
        spec, configs = resolve_spec(args, configs)
        out = Path(args.out or configs.output_dir)
        manifest = run_command(spec, out, configs)
    except McvdError as exc:
        print(f"mcvd: error: {exc}", file=sys.stderr)
        return 2

    pretty_print({"command": spec.command, "out": str(out), "outputs": manifest.outputs})
    return 0


if __name__ == "__main__":
    sys.exit(main())

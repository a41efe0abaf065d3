import argparse
import json
import os
import sys
from typing import Iterable, Optional

from dotenv import load_dotenv

try:
    import readline
except ImportError:  # pragma: no cover - not available on every platform
    readline = None

import numpy as np

from . import __version__
from .artifacts import (
    write_json,
    write_manifest,
    write_spectrum_csv,
    write_timeseries_csv,
    write_traces_csv,
    write_variance_csv,
)
from .detection_chain import (
    apply_loss,
    detected_variances,
    detection_bound_db,
    end_to_end_efficiency,
    poincare_ellipsoid,
    stokes_state,
    to_db,
    total_efficiency,
)
from .noise_lock import (
    MODES,
    artifact_frequencies,
    detected_levels,
    find_artifact_peaks,
    locked_spectrum_with_artifacts,
    locked_traces,
    plateau_level,
    run_batch,
    run_lock,
    run_scan,
    scan_extrema,
    static_prediction,
)
from .opo_core import Branch, fit_pump_gain, output_variance
from .scenario import ENV_OUTPUT_DIR, env_seed, load_scenario, write_default_scenario
from .utils import (
    EXIT_OK,
    Fore,
    LockFailure,
    ScenarioError,
    SqueezeLabError,
    color_text,
    configure_logging,
    get_logger,
    handle_errors,
    loading_animation,
    validate_path,
)
from .validate import run_checks

SCRIPT_NAME = "squeezelab"
CONFIG_FILE = "squeezelab_config.json"
LAB_MEASURED_SQUEEZING_DB = -5.6
TRAJECTORY_STRIDE = 100
COMMAND_FLAGS = [
    "--budget",
    "--spectrum",
    "--scan",
    "--lock",
    "--poincare",
    "--validate",
    "--batch",
    "--init",
]

logger = get_logger(__name__)


def display_banner() -> None:
    banner = f"{SCRIPT_NAME.upper()} v{__version__}"
    print(color_text(banner, Fore.CYAN if Fore else None))


def setup_auto_completion(flags: Iterable[str]) -> None:
    if readline is None:
        return

    def completer(text: str, state: int) -> Optional[str]:
        options = [flag for flag in flags if flag.startswith(text)]
        return options[state] if state < len(options) else None

    readline.set_completer(completer)
    readline.parse_and_bind("tab: complete")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description=f"{SCRIPT_NAME.upper()} - Squeezed-light and noise-locking simulator",
    )
    command_group = parser.add_mutually_exclusive_group(required=True)
    for flag, command, help_text in (
        ("--budget", "budget", "Print the efficiency budget and detection bound"),
        ("--spectrum", "spectrum", "Write the detected variance spectrum as CSV"),
        ("--scan", "scan", "Simulate an LO phase scan on the zero-span analyzer"),
        ("--lock", "lock", "Simulate the closed noise-locking loop"),
        ("--poincare", "poincare", "Export the Stokes noise ellipsoid"),
        ("--validate", "validate", "Run the fast self-check suite"),
        ("--batch", "batch", "Run seed-parallel lock sweeps"),
        ("--init", "init", "Write the default scenario to the given path"),
    ):
        command_group.add_argument(
            flag, dest="command", action="store_const", const=command, help=help_text
        )
    parser.add_argument(
        "scenario_file",
        nargs="?",
        help="Scenario JSON file (default scenario if omitted; target path for --init).",
    )
    parser.add_argument(
        "-o",
        "--output",
        dest="output_path",
        help=f"Artifact directory (default: ${ENV_OUTPUT_DIR} or the scenario's run.output_dir)",
    )
    parser.add_argument("--seed", type=int, help="Override the scenario seed")
    parser.add_argument("--scale", type=float, dest="scale_factor", help="Desk-scale frequency factor")
    parser.add_argument("--mode", choices=MODES, help="Override the scenario run mode")
    parser.add_argument("--fmin", type=float, default=1.0e3, help="Spectrum start frequency in Hz")
    parser.add_argument("--fmax", type=float, default=1.0e7, help="Spectrum stop frequency in Hz")
    parser.add_argument("--points", type=int, default=200, help="Spectrum grid points")
    parser.add_argument(
        "--measured-antisqueezing",
        type=float,
        dest="measured_antisqueezing",
        help="Measured anti-squeezing in dB for the pump-gain fit",
    )
    parser.add_argument(
        "--seeds", type=int, default=20, help="Number of seeds for --batch (default: 20)"
    )
    parser.add_argument("--workers", type=int, help="Worker processes for --batch")
    parser.add_argument(
        "--traces",
        action="store_true",
        help="With --lock: also lock the other quadrature and write anti-squeezing, shot-noise and squeezing traces",
    )
    parser.add_argument("--verbose", action="store_true", help="Enable verbose logging")
    parser.add_argument(
        "--no-animation", action="store_true", help="Disable loading animation"
    )
    parser.add_argument(
        "--save-config", dest="save_config_file", help="Save current settings to JSON"
    )
    parser.add_argument(
        "--load-config", dest="load_config_file", help="Load settings from JSON"
    )
    parser.add_argument("--version", action="version", version=f"{SCRIPT_NAME} {__version__}")
    return parser


def _persist_config(args: argparse.Namespace, path: str) -> None:
    data = vars(args).copy()
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=4)
    logger.info("Configuration saved to %s", path)


def _load_config(path: str) -> dict:
    if not os.path.exists(path):
        handle_errors(f"Configuration file not found: {path}", error_cls=ScenarioError)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as error:
        handle_errors(
            f"{path}: invalid JSON at line {error.lineno}: {error.msg}", error_cls=ScenarioError
        )
    logger.info("Configuration loaded from %s", path)
    return data


def _apply_loaded_config(args: argparse.Namespace, config: dict) -> None:
    for key, value in config.items():
        if key in {"save_config_file", "load_config_file"}:
            continue
        if hasattr(args, key):
            setattr(args, key, value)


def _resolve_output_dir(args: argparse.Namespace, scenario) -> str:
    directory = args.output_path or os.environ.get(ENV_OUTPUT_DIR) or scenario.output_dir
    os.makedirs(directory, exist_ok=True)
    return validate_path(directory, "Output directory", must_exist=True, is_dir=True)


def _prepare_scenario(args: argparse.Namespace):
    scenario = load_scenario(args.scenario_file)
    seed = args.seed if args.seed is not None else env_seed()
    return scenario.with_overrides(seed=seed, scale_factor=args.scale_factor, mode=args.mode)


def _print_rows(rows) -> None:
    width = max(len(label) for label, _ in rows)
    for label, value in rows:
        print(f"  {label.ljust(width)}  {value}")


def _format_db(value: float) -> str:
    if np.isneginf(value):
        return "-inf dB"
    return f"{value:+.2f} dB"


def cmd_budget(scenario, output_dir: str, measured_antisqueezing: Optional[float] = None) -> dict:
    """
    Prints the efficiency chain, the detection bound and, when a measured
    anti-squeezing level is known, the fitted pump gain and predicted squeezing.
    """
    budget = scenario.budget
    # the cavity model already carries escape loss when it is folded upstream
    eta = total_efficiency(budget)
    eta_total = end_to_end_efficiency(budget)
    bound = detection_bound_db(eta_total)
    rows = [(label, f"{factor:.4f}") for label, factor in budget.stages()]
    if budget.escape_included_upstream:
        rows.append(("escape efficiency (in cavity model)", f"{budget.escape_efficiency:.4f}"))
    rows.append(("cavity escape efficiency", f"{scenario.params.escape_efficiency:.4f}"))
    rows.append(("post-cavity efficiency", f"{eta:.4f}"))
    rows.append(("total detection efficiency", f"{eta_total:.4f}"))
    rows.append(("detection bound", _format_db(bound)))
    report = {
        "stages": {label: factor for label, factor in budget.stages()},
        "escape_efficiency": budget.escape_efficiency,
        "escape_included_upstream": budget.escape_included_upstream,
        "escape_efficiency_from_geometry": scenario.params.escape_efficiency,
        "post_cavity_efficiency": eta,
        "total_efficiency": eta_total,
        "detection_bound_db": bound,
    }

    measured = measured_antisqueezing
    if measured is None:
        measured = scenario.measured_antisqueezing_db
    if measured is not None:
        omega = 2.0 * np.pi * scenario.fit_frequency
        gain = fit_pump_gain(
            measured, eta, scenario.params, noise=scenario.noise, analysis_frequency=scenario.fit_frequency
        )
        fitted = scenario.params.with_pump_gain(gain)
        predicted = to_db(apply_loss(output_variance(fitted, scenario.noise, omega, Branch.MINUS), eta))
        rows.append(("fitted g/kappa_a", f"{gain / fitted.kappa_a:.4f}"))
        rows.append(
            (
                "predicted squeezing",
                f"{_format_db(predicted)} (lab measured {LAB_MEASURED_SQUEEZING_DB:+.1f} dB)",
            )
        )
        report.update(
            measured_antisqueezing_db=measured,
            fit_frequency_hz=scenario.fit_frequency,
            fitted_gain_fraction=gain / fitted.kappa_a,
            predicted_squeezing_db=predicted,
        )

    print(color_text("Efficiency budget", Fore.GREEN if Fore else None))
    _print_rows(rows)
    path = write_json(os.path.join(output_dir, "budget.json"), report)
    write_manifest(output_dir, scenario, "budget", [path])
    return report


def cmd_spectrum(scenario, output_dir: str, fmin: float, fmax: float, points: int) -> str:
    if not (0 < fmin < fmax) or points < 1:
        handle_errors("Spectrum grid needs 0 < fmin < fmax and at least one point.", error_cls=ScenarioError)
    grid = np.array([fmin]) if points == 1 else np.geomspace(fmin, fmax, points)
    spectra = detected_variances(scenario.params, scenario.noise, scenario.budget, scenario.detector, grid)
    path = write_variance_csv(
        os.path.join(output_dir, "spectrum.csv"), grid, spectra.minus.values, spectra.plus.values
    )
    write_manifest(output_dir, scenario, "spectrum", [path])
    logger.info("Spectrum written to %s", path)
    return path


def cmd_scan(scenario, output_dir: str, no_animation: bool = False) -> dict:
    loading_animation("Scanning LO phase", disable_animation=no_animation)
    lock = scenario.lock
    if lock.mode != "scan":
        lock = scenario.with_overrides(mode="scan").lock
    trace = run_scan(lock)
    trough_db, crest_db = scan_extrema(trace, lock.scan.settle())
    carrier = lock.scan.zero_span.center_frequency * lock.scale_factor
    plus, minus = detected_levels(lock, [carrier])
    summary = {
        "trough_db": trough_db,
        "crest_db": crest_db,
        "expected_trough_db": to_db(float(minus[0])),
        "expected_crest_db": to_db(float(plus[0])),
        "analysis_frequency_hz": carrier,
        "ramp_rate_rad_s": lock.scan.ramp_rate,
    }
    files = [
        write_timeseries_csv(trace, os.path.join(output_dir, "scan_trace.csv")),
        write_json(os.path.join(output_dir, "scan_summary.json"), summary),
    ]
    write_manifest(output_dir, scenario, "scan", files)
    print(color_text("Phase scan", Fore.GREEN if Fore else None))
    _print_rows([("trough", _format_db(trough_db)), ("crest", _format_db(crest_db))])
    return summary


def cmd_lock(scenario, output_dir: str, no_animation: bool = False, traces: bool = False) -> dict:
    """
    Runs the closed loop and writes trajectories, spectra and a summary.

    Raises:
    - LockFailure: verdict ``never``; diagnostics are written first.
    """
    loading_animation("Running noise lock", disable_animation=no_animation)
    lock = scenario.lock
    if lock.mode == "scan":
        lock = scenario.with_overrides(mode="lock_squeeze").lock
    result = run_lock(lock)
    summary = result.summary()
    files = [
        write_timeseries_csv(
            result.phase_trajectory, os.path.join(output_dir, "phase_trajectory.csv"), TRAJECTORY_STRIDE
        ),
        write_timeseries_csv(
            result.error_signal, os.path.join(output_dir, "error_signal.csv"), TRAJECTORY_STRIDE
        ),
    ]
    if result.locked_spectrum is not None:
        artifacts = locked_spectrum_with_artifacts(result, lock)
        targets = artifact_frequencies(lock)
        plateau = plateau_level(result.locked_spectrum, targets.values())
        prediction = float(np.mean(static_prediction(lock, result.locked_spectrum.frequencies)))
        heights = {peak.frequency: peak.height_db for peak in find_artifact_peaks(artifacts, targets.values(), plateau)}
        summary.update(
            plateau_db=to_db(plateau),
            static_prediction_db=to_db(prediction),
            artifact_peaks={
                name: heights[frequency] for name, frequency in targets.items() if frequency in heights
            },
        )
        files.append(write_spectrum_csv(result.locked_spectrum, os.path.join(output_dir, "locked_spectrum.csv")))
        files.append(write_spectrum_csv(artifacts, os.path.join(output_dir, "locked_spectrum_artifacts.csv")))
        if traces:
            companion = locked_traces(lock, result)
            files.append(
                write_traces_csv(
                    os.path.join(output_dir, "locked_traces.csv"),
                    companion.shot_noise.frequencies,
                    {
                        "antisqueeze": companion.antisqueeze,
                        "shot_noise": companion.shot_noise,
                        "squeeze": companion.squeeze,
                    },
                )
            )
    files.append(write_json(os.path.join(output_dir, "lock_summary.json"), summary))
    write_manifest(output_dir, scenario, "lock", files)

    print(color_text(f"Lock verdict: {result.verdict}", Fore.GREEN if Fore and result.verdict == "locked" else None))
    rows = [("acquired at", "n/a" if result.lock_acquired_at is None else f"{result.lock_acquired_at:.4g} s")]
    if result.residual_phase_rms is not None:
        rows.append(("residual phase rms", f"{result.residual_phase_rms:.3g} rad"))
    if "plateau_db" in summary:
        rows.append(("locked plateau", _format_db(summary["plateau_db"])))
        rows.append(("static prediction", _format_db(summary["static_prediction_db"])))
    _print_rows(rows)
    if result.verdict == "never":
        raise LockFailure(f"Noise lock never acquired: {result.diagnostic}")
    return summary


def cmd_poincare(scenario, output_dir: str) -> dict:
    """Stokes state and noise ellipsoid at the lower edge of the analyzer window."""
    lock = scenario.lock
    frequency = lock.analyzer.fmin
    plus, minus = detected_levels(lock, [frequency])
    theta = lock.target_phase
    state = stokes_state(
        scenario.lo_power, scenario.wavelength, float(plus[0]), float(minus[0]), theta, scenario.detector
    )
    record = poincare_ellipsoid(state)
    record.update(
        analysis_frequency_hz=frequency,
        theta_lock_rad=theta,
        lo_photon_flux=state.lo_photon_flux,
        variances_normalized=list(state.var_s_normalized),
    )
    path = write_json(os.path.join(output_dir, "poincare.json"), record)
    write_manifest(output_dir, scenario, "poincare", [path])
    print(color_text("Poincare ellipsoid", Fore.GREEN if Fore else None))
    _print_rows(
        [
            ("photon flux", f"{state.lo_photon_flux:.4g} /s"),
            ("semi-axes (S1, S2, S3)", ", ".join(f"{axis:.4f}" for axis in record["semi_axes"])),
        ]
    )
    return record


def cmd_validate(scenario=None, no_animation: bool = False) -> bool:
    loading_animation("Running self-checks", disable_animation=no_animation)
    results = run_checks(scenario)
    width = max(len(result.name) for result in results)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        color = (Fore.GREEN if result.passed else Fore.RED) if Fore else None
        print(f"  {result.name.ljust(width)}  {color_text(status, color)}  {result.detail}")
    return all(result.passed for result in results)


def cmd_batch(scenario, output_dir: str, seeds: int, workers: Optional[int], no_animation: bool = False) -> dict:
    loading_animation(f"Running {seeds} lock seeds", disable_animation=no_animation)
    lock = scenario.lock
    if lock.mode == "scan":
        lock = scenario.with_overrides(mode="lock_squeeze").lock
    batch = run_batch(lock, range(lock.seed, lock.seed + seeds), workers=workers)
    report = {"capture_probability": batch.capture_probability, "runs": batch.runs}
    path = write_json(os.path.join(output_dir, "batch.json"), report)
    write_manifest(output_dir, scenario, "batch", [path])
    _print_rows([("capture probability", f"{batch.capture_probability:.3f}")])
    return report


def _execute_command(args: argparse.Namespace) -> int:
    command = args.command
    if command == "init":
        if not args.scenario_file:
            handle_errors("--init needs a target path.", error_cls=ScenarioError)
        write_default_scenario(args.scenario_file)
        return EXIT_OK

    scenario = _prepare_scenario(args)
    if command == "validate":
        return EXIT_OK if cmd_validate(scenario, args.no_animation) else 1

    output_dir = _resolve_output_dir(args, scenario)
    if command == "budget":
        cmd_budget(scenario, output_dir, args.measured_antisqueezing)
    elif command == "spectrum":
        cmd_spectrum(scenario, output_dir, args.fmin, args.fmax, args.points)
    elif command == "scan":
        cmd_scan(scenario, output_dir, args.no_animation)
    elif command == "lock":
        cmd_lock(scenario, output_dir, args.no_animation, args.traces)
    elif command == "poincare":
        cmd_poincare(scenario, output_dir)
    elif command == "batch":
        cmd_batch(scenario, output_dir, args.seeds, args.workers, args.no_animation)
    else:  # pragma: no cover - argparse restricts the choices
        handle_errors("Invalid command. See --help.")
    return EXIT_OK


def main(argv: Optional[list] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    setup_auto_completion(COMMAND_FLAGS)

    try:
        if args.save_config_file:
            _persist_config(args, args.save_config_file)
            return EXIT_OK

        if args.load_config_file:
            config = _load_config(args.load_config_file)
            _apply_loaded_config(args, config)

        display_banner()
        return _execute_command(args)
    except SqueezeLabError as error:
        logger.error(str(error))
        return getattr(error, "exit_code", 1)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

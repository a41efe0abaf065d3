"""Fast self-check: analytic invariants plus a short stochastic-vs-analytic comparison."""

from typing import NamedTuple

import numpy as np

from .detection_chain import (
    EfficiencyBudget,
    apply_loss,
    stokes_state,
    to_db,
    total_efficiency,
)
from .dsp import welch_psd
from .noise_lock import error_signal_curve, expected_error_curve
from .opo_core import (
    Branch,
    CavityGeometry,
    CavityParams,
    NoiseInputs,
    decay_rates_from_geometry,
    fit_pump_gain,
    output_variance,
    variance_spectrum,
)
from .stochastic_sim import VACUUM_PSD_LEVEL, SimConfig, simulate_output_quadratures
from .utils import SqueezeLabError, get_logger


logger = get_logger(__name__)

LAB_GEOMETRY = CavityGeometry(
    round_trip_length=0.6, output_coupler_transmission=0.115, intracavity_loss=0.004
)
LAB_BUDGET = EfficiencyBudget(0.95, 0.966, 0.99, 0.997)


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def _lossless(gain_fraction, kappa=2.0 * np.pi * 5.0e3):
    return CavityParams(kappa_out_a=kappa, kappa_b=kappa).with_pump_gain(gain_fraction * kappa)


def check_escape_efficiency():
    escape = decay_rates_from_geometry(LAB_GEOMETRY).escape_efficiency
    return CheckResult("escape efficiency", abs(escape - 0.9664) <= 5e-4, f"{escape:.5f}")


def check_minimum_uncertainty():
    grid = np.logspace(0, 9, 1000)
    worst = 0.0
    for fraction in (0.1, 0.4, 0.9):
        spectra = variance_spectrum(_lossless(fraction), NoiseInputs(), grid)
        worst = max(worst, float(np.max(np.abs(spectra.plus.values * spectra.minus.values - 1.0))))
    return CheckResult("minimum-uncertainty product", worst <= 1e-9, f"max |V+V- - 1| = {worst:.2e}")


def check_vacuum_decoupling():
    params = _lossless(0.4)
    grid = np.logspace(0, 6, 50)
    reference = variance_spectrum(params, NoiseInputs(), grid)
    identical = True
    for level in (0.0, 1.0, 100.0):
        noise = NoiseInputs(v_pump=(level, level), v_detuning=level)
        spectra = variance_spectrum(params, noise, grid)
        identical &= np.array_equal(spectra.plus.values, reference.plus.values)
        identical &= np.array_equal(spectra.minus.values, reference.minus.values)
    return CheckResult("vacuum-seed decoupling", bool(identical), "bit-identical" if identical else "changed")


def check_loss_chain():
    eta = total_efficiency(LAB_BUDGET)
    template = CavityParams(kappa_out_a=1.0, kappa_b=1.0)
    gain = fit_pump_gain(7.0, eta, template)
    predicted = to_db(apply_loss(output_variance(template.with_pump_gain(gain), NoiseInputs(), 0.0, Branch.MINUS), eta))
    passed = abs(eta - 0.9031) < 5e-4 and abs(predicted - (-5.6)) <= 0.4
    return CheckResult(
        "loss-chain reproduction",
        passed,
        f"eta = {eta:.4f}, g/kappa = {gain:.3f}, predicted {predicted:.2f} dB (measured -5.6 dB)",
    )


def check_stokes_uncertainty(seed=7, count=1000):
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(count):
        v_minus = rng.uniform(0.05, 1.0)
        v_plus = rng.uniform(1.0 / v_minus, 20.0 / v_minus)
        theta = rng.uniform(0.0, np.pi)
        state = stokes_state(1e-3, 795e-9, v_plus, v_minus, theta)
        worst = min(worst, state.var_s_normalized[1] * state.var_s_normalized[2])
    return CheckResult("Stokes uncertainty", worst >= 1.0 - 1e-12, f"min V(S2)V(S3) = {worst:.6f}")


def oracle_deviation_db(params, sample_rate, n_samples, segment, frequencies, seed=0, integrator="exact_ou"):
    """Largest |Welch − analytic| in dB over ``frequencies`` for both branches."""
    config = SimConfig(
        params,
        duration=n_samples / sample_rate,
        sample_rate=sample_rate,
        rng_seed=seed,
        integrator=integrator,
    )
    outputs = simulate_output_quadratures(config)
    spectra = variance_spectrum(params, NoiseInputs(), frequencies)
    worst = 0.0
    for series, analytic in ((outputs.plus, spectra.plus), (outputs.minus, spectra.minus)):
        estimate = welch_psd(series, segment, overlap_fraction=0.5, reference_level=VACUUM_PSD_LEVEL)
        measured = np.interp(frequencies, estimate.frequencies, estimate.relative())
        worst = max(worst, float(np.max(np.abs(to_db(measured) - to_db(analytic.values)))))
    return worst


def check_short_oracle():
    params = _lossless(0.4)
    frequencies = np.linspace(500.0, 4500.0, 5)
    deviation = oracle_deviation_db(params, 2.0e5, 1 << 19, 512, frequencies, seed=11)
    return CheckResult("stochastic oracle (short)", deviation <= 0.3, f"max deviation {deviation:.3f} dB")


def check_determinism():
    params = _lossless(0.4)
    config = SimConfig(params, duration=0.05, sample_rate=2.0e5, rng_seed=3)
    first = simulate_output_quadratures(config)
    second = simulate_output_quadratures(config)
    identical = np.array_equal(first.minus.samples, second.minus.samples) and np.array_equal(
        first.plus.samples, second.plus.samples
    )
    return CheckResult("determinism", bool(identical), "bit-identical" if identical else "differs")


def check_error_curve(scenario, periods=2000):
    """Simulated lock-in characteristic against its closed form on four phases."""
    theta = np.array([0.0, np.pi / 8, np.pi / 4, 3 * np.pi / 8])
    simulated = error_signal_curve(scenario.lock, theta, periods=periods).values
    expected = expected_error_curve(scenario.lock, theta).values
    scale = float(np.max(np.abs(expected)))
    deviation = float(np.max(np.abs(simulated - expected))) / scale if scale > 0 else np.inf
    passed = deviation <= 0.25 and np.sign(simulated[2]) == np.sign(expected[2])
    return CheckResult(
        "error-signal shape",
        bool(passed),
        f"peak {simulated[2]:.4g} at pi/4 (closed form {expected[2]:.4g}), max deviation {deviation:.1%}",
    )


def run_checks(scenario=None):
    """Runs every check; a check that raises counts as failed."""
    checks = [
        check_escape_efficiency,
        check_minimum_uncertainty,
        check_vacuum_decoupling,
        check_loss_chain,
        check_stokes_uncertainty,
        check_determinism,
        check_short_oracle,
    ]
    if scenario is not None:
        checks.append(lambda: check_error_curve(scenario))
    results = []
    for check in checks:
        try:
            result = check()
        except SqueezeLabError as error:
            name = getattr(check, "__name__", "check").replace("check_", "").replace("_", " ")
            result = CheckResult(name, False, f"error: {error}")
        logger.debug("%s: %s (%s)", result.name, "pass" if result.passed else "FAIL", result.detail)
        results.append(result)
    return results

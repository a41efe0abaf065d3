from dataclasses import replace

import numpy as np
import pytest

from squeezelab.detection_chain import from_db, to_db
from squeezelab.noise_lock import (
    _classify,
    artifact_frequencies,
    auto_demod_phase,
    detected_levels,
    error_signal_curve,
    expected_error_curve,
    find_artifact_peaks,
    locked_spectrum_with_artifacts,
    locked_traces,
    plateau_level,
    run_batch,
    run_lock,
    run_scan,
    scan_extrema,
    shot_noise_spectrum,
    static_prediction,
)
from squeezelab.opo_core import Spectrum
from squeezelab.utils import PhysicsError, ScenarioError


PHASES = np.array([0.0, np.pi / 8, np.pi / 4, 3 * np.pi / 8, np.pi / 2, 5 * np.pi / 8])


def test_scenario_uses_simulation_frequencies(default_scenario):
    lock = default_scenario.lock
    assert lock.lock_in.mod_frequency == pytest.approx(3501.0)
    assert lock.zero_span.center_frequency == pytest.approx(2.0e5)
    assert lock.control_rate == pytest.approx(1.0e5)


def test_loop_sign_flips_for_antisqueezing(default_scenario):
    squeeze = default_scenario.lock
    anti = replace(squeeze, mode="lock_antisqueeze")
    assert anti.loop_sign() == -squeeze.loop_sign()
    assert anti.target_phase == pytest.approx(np.pi / 2)


def test_lock_scenario_validation(default_scenario):
    with pytest.raises(PhysicsError):
        replace(default_scenario.lock, mode="hold")
    with pytest.raises(PhysicsError):
        replace(default_scenario.lock, capture_window=2.0)
    with pytest.raises(PhysicsError):
        replace(default_scenario.lock, quadrature_override=(2.0, 1.0))


def test_detected_levels_preserve_order(default_scenario):
    frequencies = [2.0e6, 1.0e3, 2.0e6]
    plus, minus = detected_levels(default_scenario.lock, frequencies)
    assert plus[0] == plus[2]
    assert np.all(plus > minus)


def test_static_prediction_with_quadrature_override(default_scenario):
    lock = replace(default_scenario.lock, quadrature_override=(from_db(-5.6), from_db(7.0)))
    assert to_db(static_prediction(lock, [1.0e4])[0]) == pytest.approx(-5.6)
    anti = replace(lock, mode="lock_antisqueeze")
    assert to_db(static_prediction(anti, [1.0e4])[0]) == pytest.approx(7.0)


def test_expected_error_curve_crosses_zero_at_both_lock_points(default_scenario):
    values = expected_error_curve(default_scenario.lock, PHASES).values
    assert values[0] == pytest.approx(0.0, abs=1e-12)
    assert values[4] == pytest.approx(0.0, abs=1e-9)
    assert np.argmax(np.abs(values)) == 2
    assert np.sign(values[2]) == -np.sign(values[5])


def test_error_signal_vanishes_without_asymmetry(default_scenario):
    lock = replace(default_scenario.lock, quadrature_override=(1.0, 1.0))
    theta = np.linspace(0, np.pi, 7)
    np.testing.assert_allclose(expected_error_curve(lock, theta).values, 0.0)
    simulated = error_signal_curve(lock, theta, periods=200).values
    assert np.max(np.abs(simulated)) < 0.05


def test_error_signal_curve_needs_whole_periods(default_scenario):
    with pytest.raises(PhysicsError):
        error_signal_curve(default_scenario.lock, [0.0], periods=0)


@pytest.mark.slow
def test_simulated_error_curve_follows_closed_form(default_scenario):
    lock = default_scenario.lock
    expected = expected_error_curve(lock, PHASES).values
    simulated = error_signal_curve(lock, PHASES, periods=4000).values
    scale = np.max(np.abs(expected))
    assert np.max(np.abs(simulated - expected)) <= 0.2 * scale
    assert np.argmax(np.abs(simulated)) == 2
    assert abs(simulated[0]) < 0.2 * scale
    assert np.sign(simulated[2]) == -np.sign(simulated[5])


def test_auto_demod_phase_is_used_when_unset(default_scenario):
    phase = auto_demod_phase(default_scenario.lock)
    assert np.isfinite(phase)
    assert -np.pi <= phase <= np.pi


def test_classify_verdicts(default_scenario):
    lock = default_scenario.lock
    assert _classify(lock, np.full(20000, 1.0))[0] == "never"
    verdict, acquired, lost, residual = _classify(lock, np.zeros(20000))
    assert (verdict, acquired, lost, residual) == ("locked", 0, None, 0.0)
    trajectory = np.concatenate([np.zeros(10000), np.full(5000, 1.0)])
    verdict, _, lost, _ = _classify(lock, trajectory)
    assert (verdict, lost) == ("lost", 10000)


def test_classify_wraps_modulo_pi(default_scenario):
    assert _classify(default_scenario.lock, np.full(20000, np.pi))[0] == "locked"


def test_run_lock_needs_a_lock_mode(short_lock):
    with pytest.raises(PhysicsError):
        run_lock(replace(short_lock, mode="scan"))


def test_run_scan_needs_scan_mode(short_lock):
    with pytest.raises(ScenarioError, match="scan"):
        run_scan(short_lock)


def test_run_lock_without_asymmetry_never_locks(short_lock):
    result = run_lock(replace(short_lock, quadrature_override=(1.0, 1.0)))
    assert result.verdict == "never"
    assert "asymmetry" in result.diagnostic
    assert result.locked_spectrum is None
    assert result.summary()["verdict"] == "never"


def test_run_lock_dither_rate_guard(short_lock):
    with pytest.raises(PhysicsError, match="dither"):
        run_lock(replace(short_lock, decimation=100))


def test_plateau_and_artifact_peaks_on_synthetic_spectrum():
    frequencies = np.arange(1000.0, 10001.0, 100.0)
    values = np.full(frequencies.shape, 0.5)
    values[frequencies == 5000.0] = 50.0
    spectrum = Spectrum(frequencies, values)
    assert plateau_level(spectrum, [5000.0]) == pytest.approx(0.5)
    (peak,) = find_artifact_peaks(spectrum, [5050.0])
    assert peak.observed_frequency == 5000.0
    assert peak.height_db == pytest.approx(20.0)
    assert find_artifact_peaks(spectrum, [1.0e6]) == []


def test_artifact_frequencies_are_on_the_lab_axis(default_scenario):
    frequencies = artifact_frequencies(default_scenario.lock)
    assert frequencies["dither"] == pytest.approx(35010.0)
    assert frequencies["pzt_resonance"] == pytest.approx(19000.0)
    assert frequencies["pickup_88000Hz"] == pytest.approx(88000.0)


@pytest.mark.slow
def test_default_servo_locks_and_reproduces_static_prediction(default_scenario):
    lock = default_scenario.lock
    result = run_lock(lock)
    assert result.verdict == "locked"
    assert result.residual_phase_rms < lock.capture_window
    plateau = plateau_level(result.locked_spectrum, artifact_frequencies(lock).values())
    prediction = np.mean(static_prediction(lock, result.locked_spectrum.frequencies))
    assert to_db(plateau) == pytest.approx(to_db(prediction), abs=0.5)
    assert to_db(plateau) == pytest.approx(-2.8, abs=0.5)

    artifacts = locked_spectrum_with_artifacts(result, lock)
    dither = artifact_frequencies(lock)["dither"]
    resonance = artifact_frequencies(lock)["pzt_resonance"]
    with_pickup, pzt_peak = find_artifact_peaks(artifacts, [dither, resonance], plateau)
    (without_pickup,) = find_artifact_peaks(result.locked_spectrum, [dither], plateau)
    assert with_pickup.height_db > 10.0
    assert pzt_peak.height_db >= 6.0
    assert without_pickup.height_db < 3.0


@pytest.mark.slow
def test_servo_run_is_reproducible(short_lock):
    first = run_lock(short_lock)
    second = run_lock(short_lock)
    assert np.array_equal(first.phase_trajectory.samples, second.phase_trajectory.samples)
    assert first.verdict == second.verdict


@pytest.mark.slow
def test_scan_extrema_match_detected_levels(default_scenario):
    lock = replace(default_scenario.lock, mode="scan")
    trace = run_scan(lock)
    trough_db, crest_db = scan_extrema(trace, lock.scan.settle())
    plus, minus = detected_levels(lock, [lock.scan.zero_span.center_frequency * lock.scale_factor])
    assert trough_db == pytest.approx(to_db(minus[0]), abs=1.0)
    assert crest_db == pytest.approx(to_db(plus[0]), abs=1.0)
    assert trough_db == pytest.approx(-5.6, abs=0.5)
    assert crest_db == pytest.approx(7.0, abs=0.5)


def _settled_near_lock_point(run, window):
    phase = run["final_phase_mod_pi"]
    return min(phase, np.pi - phase) < window


@pytest.mark.slow
def test_batch_captures_every_seed(default_scenario):
    lock = default_scenario.lock
    seeds = list(range(1, 21))
    batch = run_batch(lock, seeds)
    assert [run["seed"] for run in batch.runs] == seeds
    assert batch.capture_probability == 1.0
    assert all(-np.pi / 2 <= run["initial_phase_rad"] <= np.pi / 2 for run in batch.runs)
    assert all(_settled_near_lock_point(run, lock.capture_window) for run in batch.runs)


@pytest.mark.slow
def test_batch_never_captures_without_asymmetry(default_scenario):
    lock = replace(default_scenario.lock, quadrature_override=(1.0, 1.0), duration=0.5)
    batch = run_batch(lock, range(50), workers=1)
    assert batch.capture_probability == 0.0
    assert all(run["verdict"] == "never" for run in batch.runs)


@pytest.mark.slow
def test_capture_probability_grows_with_asymmetry(default_scenario):
    probabilities = []
    for asymmetry_db in (1.5, 3.0, 6.0, 12.0):
        override = (from_db(-asymmetry_db / 2), from_db(asymmetry_db / 2))
        lock = replace(default_scenario.lock, quadrature_override=override, duration=1.0)
        probabilities.append(run_batch(lock, range(50)).capture_probability)
    # 50 seeds per level: allow one seed of jitter between neighbours
    assert all(later >= earlier - 0.02 for earlier, later in zip(probabilities, probabilities[1:]))
    assert probabilities[-1] == 1.0


@pytest.mark.slow
def test_locked_traces_bracket_shot_noise(default_scenario):
    lock = replace(default_scenario.lock, duration=1.0)
    traces = locked_traces(lock)
    shot = traces.shot_noise
    assert to_db(np.mean(shot.values)) == pytest.approx(0.0, abs=0.3)
    assert np.array_equal(traces.squeeze.frequencies, shot.frequencies)
    assert np.mean(traces.squeeze.values) < np.mean(shot.values) < np.mean(traces.antisqueeze.values)


def test_shot_noise_spectrum_sits_at_zero_db(default_scenario):
    shot = shot_noise_spectrum(default_scenario.lock)
    assert to_db(np.mean(shot.values)) == pytest.approx(0.0, abs=0.3)
    assert shot.frequencies[0] >= default_scenario.lock.analyzer.fmin


@pytest.mark.slow
def test_sign_switch_locks_to_antisqueezed_quadrature(default_scenario):
    lock = replace(default_scenario.lock, mode="lock_antisqueeze", duration=1.0)
    result = run_lock(lock)
    assert result.verdict == "locked"
    final = np.mean(result.slow_phase.samples[-1000:])
    assert abs(np.mod(final - np.pi / 2 + np.pi / 2, np.pi) - np.pi / 2) < lock.capture_window

import numpy as np
import pytest

from squeezelab.detection_chain import (
    DetectorModel,
    EfficiencyBudget,
    add_dark_noise,
    apply_loss,
    cmrr_leakage,
    detected_variances,
    detection_bound_db,
    end_to_end_efficiency,
    from_db,
    homodyne_variance,
    photon_flux,
    poincare_ellipsoid,
    polarimeter_signal,
    quadrature_at_phase,
    stokes_state,
    subtract_dark_noise,
    to_db,
    total_efficiency,
)
from squeezelab.opo_core import CavityParams, NoiseInputs
from squeezelab.dsp import welch_psd
from squeezelab.stochastic_sim import VACUUM_PSD_LEVEL, TimeSeries, synthesize_quadratures, vacuum_noise
from squeezelab.utils import PhysicsError


LAB_BUDGET = EfficiencyBudget(0.95, 0.966, 0.99, 0.997)


def test_total_efficiency_multiplies_stages():
    assert total_efficiency(LAB_BUDGET) == pytest.approx(0.9031, abs=5e-4)


def test_escape_stage_dropped_when_included_upstream():
    budget = EfficiencyBudget(0.95, 0.966, 0.99, 0.997, escape_included_upstream=True)
    labels = [label for label, _ in budget.stages()]
    assert "escape efficiency" not in labels
    assert total_efficiency(budget) == pytest.approx(0.95 * 0.99 * 0.997**2)


def test_detection_bound():
    assert detection_bound_db(0.9031) == pytest.approx(10 * np.log10(0.0969), abs=1e-3)
    assert detection_bound_db(1.0) == float("-inf")
    with pytest.raises(PhysicsError):
        detection_bound_db(0.0)


def test_budget_rejects_out_of_range_stage():
    with pytest.raises(PhysicsError):
        EfficiencyBudget(quantum_efficiency=1.2)


def test_apply_loss_pulls_towards_vacuum():
    assert apply_loss(1.0, 0.7) == pytest.approx(1.0)
    assert apply_loss(0.0, 0.7) == pytest.approx(0.3)
    assert apply_loss(10.0, 0.5) == pytest.approx(5.5)


def test_homodyne_projection():
    assert homodyne_variance(4.0, 0.25, 0.0) == pytest.approx(0.25)
    assert homodyne_variance(4.0, 0.25, np.pi / 2) == pytest.approx(4.0)
    assert homodyne_variance(4.0, 0.25, np.pi / 4) == pytest.approx(2.125)
    with pytest.raises(PhysicsError):
        homodyne_variance(0.25, 4.0, 0.0)


def test_dark_noise_add_and_subtract():
    raw = add_dark_noise(0.5, 16.0)
    assert raw == pytest.approx(0.5 + 10 ** -1.6)
    assert subtract_dark_noise(raw, 16.0) == pytest.approx(0.5)
    with pytest.raises(PhysicsError, match="over-subtraction"):
        subtract_dark_noise(0.01, 16.0)


def test_cmrr_leakage():
    assert cmrr_leakage(40.0, 45.0) == pytest.approx(10 ** -0.5)
    with pytest.raises(PhysicsError):
        cmrr_leakage(40.0, -1.0)


def test_lo_noise_table_interpolates_in_log_frequency():
    detector = DetectorModel(lo_classical_noise=((1e3, 40.0), (1e5, 40.0), (2e6, 0.0)))
    levels = detector.lo_noise_db([10.0, 1e4, np.sqrt(1e5 * 2e6), 1e8])
    np.testing.assert_allclose(levels, [40.0, 40.0, 20.0, 0.0])


def test_detected_variances_without_pump_or_leakage_are_vacuum():
    params = CavityParams(kappa_out_a=1e5, kappa_l_a=1e3, kappa_b=1e5)
    spectra = detected_variances(params, NoiseInputs(), LAB_BUDGET, DetectorModel(), [1e3, 1e5, 1e7])
    np.testing.assert_allclose(spectra.plus.values, 1.0)
    np.testing.assert_allclose(spectra.minus.values, 1.0)


def test_detected_variances_include_leakage():
    params = CavityParams(kappa_out_a=1e5, kappa_b=1e5)
    detector = DetectorModel(lo_classical_noise=((1e3, 45.0), (1e6, 45.0)))
    spectra = detected_variances(params, NoiseInputs(), LAB_BUDGET, detector, [1e4])
    assert spectra.minus.values[0] == pytest.approx(2.0)


def test_photon_flux():
    assert photon_flux(1e-3, 795e-9) == pytest.approx(4.0e15, rel=2e-3)


def test_stokes_state_reads_squeezed_quadrature_on_s2():
    state = stokes_state(1e-3, 795e-9, 4.0, 0.3, 0.0)
    assert state.var_s_normalized == pytest.approx((1.0, 0.3, 4.0))
    assert state.mean_s[0] == pytest.approx(state.lo_photon_flux)
    assert state.var_s[1] == pytest.approx(0.3 * state.lo_photon_flux)


def test_stokes_state_conjugate_variances_obey_uncertainty():
    rng = np.random.default_rng(3)
    for _ in range(200):
        v_minus = rng.uniform(0.05, 1.0)
        v_plus = rng.uniform(1.0 / v_minus, 10.0 / v_minus)
        state = stokes_state(1e-3, 795e-9, v_plus, v_minus, rng.uniform(0, np.pi))
        assert state.var_s_normalized[1] * state.var_s_normalized[2] >= 1.0 - 1e-12


def test_stokes_state_rejects_saturating_lo():
    with pytest.raises(PhysicsError, match="mW"):
        stokes_state(3e-3, 795e-9, 2.0, 0.5, 0.0)


def test_stokes_state_rejects_sub_uncertainty_input():
    with pytest.raises(PhysicsError, match="uncertainty"):
        stokes_state(1e-3, 795e-9, 1.0, 0.5, 0.0)


def test_poincare_ellipsoid_for_coherent_state_is_a_sphere():
    record = poincare_ellipsoid(stokes_state(1e-3, 795e-9, 1.0, 1.0, 0.0))
    assert record["semi_axes"] == pytest.approx([1.0, 1.0, 1.0])
    assert record["normalized"] is True
    flux = photon_flux(1e-3, 795e-9)
    assert record["center"][0] == pytest.approx(np.sqrt(flux))


def test_poincare_ellipsoid_for_squeezed_state():
    record = poincare_ellipsoid(stokes_state(1e-3, 795e-9, 4.0, 0.25, 0.0))
    assert record["semi_axes"] == pytest.approx([1.0, 0.5, 2.0])


def test_polarimeter_signal_scales_y_mode():
    x_pol = TimeSeries(1e3, np.zeros(4))
    y_pol = TimeSeries(1e3, np.array([1.0, -1.0, 0.5, 0.0]))
    signal = polarimeter_signal(x_pol, y_pol, 3.0)
    np.testing.assert_allclose(signal.samples, [6.0, -6.0, 3.0, 0.0])
    with pytest.raises(PhysicsError):
        polarimeter_signal(TimeSeries(2e3, np.zeros(4)), y_pol, 1.0)


def test_to_db_rejects_non_positive():
    assert to_db(10.0) == pytest.approx(10.0)
    with pytest.raises(PhysicsError):
        to_db(0.0)


def test_end_to_end_efficiency_restores_folded_escape_stage():
    folded = EfficiencyBudget(0.95, 0.966, 0.99, 0.997, escape_included_upstream=True)
    assert end_to_end_efficiency(folded) == pytest.approx(total_efficiency(LAB_BUDGET))
    assert end_to_end_efficiency(LAB_BUDGET) == total_efficiency(LAB_BUDGET)
    assert detection_bound_db(end_to_end_efficiency(folded)) == pytest.approx(-10.14, abs=0.01)


@pytest.mark.parametrize("variance", [0.1, 1.0, 7.5])
def test_apply_loss_composes_and_contracts(variance):
    chained = apply_loss(apply_loss(variance, 0.8), 0.9)
    assert chained == pytest.approx(apply_loss(variance, 0.72))
    # every loss stage moves the variance towards vacuum
    assert abs(apply_loss(variance, 0.6) - 1.0) <= abs(variance - 1.0)
    assert apply_loss(variance, 1.0) == pytest.approx(variance)


def test_db_conversion_round_trip():
    levels = np.array([-5.6, 0.0, 7.0, 16.0])
    np.testing.assert_allclose(to_db(from_db(levels)), levels, atol=1e-12)
    assert from_db(to_db(0.25)) == pytest.approx(0.25)


def test_quadrature_at_phase_rotates_streams():
    plus = TimeSeries(1e3, np.array([1.0, 2.0, 3.0]))
    minus = TimeSeries(1e3, np.array([-1.0, 0.5, 0.0]))
    np.testing.assert_allclose(quadrature_at_phase(plus, minus, 0.0).samples, minus.samples)
    np.testing.assert_allclose(quadrature_at_phase(plus, minus, np.pi / 2).samples, plus.samples, atol=1e-12)
    theta = np.array([0.0, np.pi / 2, np.pi])
    rotated = quadrature_at_phase(plus.samples, minus.samples, theta)
    np.testing.assert_allclose(rotated, [-1.0, 2.0, 0.0], atol=1e-12)


def test_polarimeter_pipeline_reads_squeezed_quadrature_on_s2():
    fs, n = 1.0e4, 1 << 17
    v_plus, v_minus = 4.0, 0.3
    pair = synthesize_quadratures(
        lambda f: np.full(np.shape(f), v_plus), lambda f: np.full(np.shape(f), v_minus), n, fs, seed=5
    )
    y_squeezed = quadrature_at_phase(pair.plus, pair.minus, 0.0)
    y_vacuum = vacuum_noise(n / fs, fs, seed=5)
    x_pol = TimeSeries(fs, np.zeros(n))
    amplitude = 2.5
    squeezed = welch_psd(polarimeter_signal(x_pol, y_squeezed, amplitude), 1024)
    shot = welch_psd(polarimeter_signal(x_pol, y_vacuum, amplitude), 1024)
    band = slice(5, -5)
    ratio = np.mean(squeezed.values[band]) / np.mean(shot.values[band])
    assert ratio == pytest.approx(v_minus, rel=0.05)
    assert np.mean(shot.values[band]) == pytest.approx(4 * amplitude**2 * VACUUM_PSD_LEVEL, rel=0.05)
    state = stokes_state(1e-3, 795e-9, v_plus, v_minus, 0.0)
    assert state.var_s_normalized[1] == pytest.approx(ratio, rel=0.05)

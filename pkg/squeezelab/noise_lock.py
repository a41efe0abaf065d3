"""Quantum-noise locking: dithered LO phase, zero-span sensing, lock-in and PID.

Frequencies inside a ``LockScenario`` are simulation frequencies (laboratory
values divided by ``scale_factor``); spectra handed back to callers are on
the laboratory axis again. Variances are shot-noise normalised throughout.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy import special

from .detection_chain import (
    DetectorModel,
    EfficiencyBudget,
    detected_variances,
    homodyne_variance,
    quadrature_at_phase,
    subtract_dark_noise,
    to_db,
)
from .dsp import (
    LockInAmplifier,
    LockInConfig,
    PidConfig,
    PidState,
    SpectrumAnalyzerConfig,
    ZeroSpanAnalyzer,
    ZeroSpanConfig,
    analyzer_psd,
    pid_step,
)
from .opo_core import CavityParams, NoiseInputs, Spectrum
from .stochastic_sim import (
    PORT_DARK,
    PORT_PZT_DRIVE,
    VACUUM_PSD_LEVEL,
    DisturbanceModel,
    PztPlant,
    TimeSeries,
    port_generator,
    simulate_phase_disturbance,
    synthesize_quadratures,
    vacuum_noise,
)
from .utils import ScenarioError, get_logger, physics_error


logger = get_logger(__name__)

MODES = ("scan", "lock_squeeze", "lock_antisqueeze")
PORT_INITIAL_PHASE = 12
ACQUISITION_DWELL_PERIODS = 10
LOST_LOCK_PERIODS = 100
MIN_SAMPLES_PER_DITHER = 20
SCAN_TRACE_RATE = 1.0e3
SATURATION_TAIL_FRACTION = 0.1
ERROR_CURVE_PERIODS = 1000
ERROR_CURVE_SETTLE_PERIODS = 200

# laboratory settings for the two phase-scan analysis frequencies
SCAN_PRESETS = {
    "2MHz": ZeroSpanConfig(center_frequency=2.0e6, rbw=1.0e5, vbw=30.0),
    "50kHz": ZeroSpanConfig(center_frequency=5.0e4, rbw=1.0e4, vbw=30.0),
}

# laboratory FFT-analyzer windows for the locked spectra; VBW smoothing is replaced by averaging
ANALYZER_PRESETS = {
    "1-100kHz": SpectrumAnalyzerConfig(rbw=100.0, averages=16, fmin=1.0e3, fmax=1.0e5),
    "2.2-3kHz": SpectrumAnalyzerConfig(rbw=10.0, averages=16, fmin=2.2e3, fmax=3.0e3),
}


@dataclass(frozen=True)
class ScanSettings:
    zero_span: ZeroSpanConfig
    ramp_rate: float = 0.8
    duration: float = 4.3
    settle_time: Optional[float] = None

    def settle(self):
        if self.settle_time is not None:
            return self.settle_time
        return 5.0 / (2.0 * np.pi * self.zero_span.vbw)


@dataclass(frozen=True)
class LockScenario:
    """A complete servo experiment in simulation units.

    ``quadrature_override`` replaces the cavity and loss chain with fixed
    detected (V−, V+) levels, for scenarios stated as measured squeezing.
    """

    params: CavityParams
    noise: NoiseInputs
    budget: EfficiencyBudget
    detector: DetectorModel
    disturbance: DisturbanceModel
    zero_span: ZeroSpanConfig
    lock_in: LockInConfig
    pid: PidConfig
    duration: float = 2.0
    seed: int = 0
    mode: str = "lock_squeeze"
    sample_rate: float = 1.0e6
    decimation: int = 10
    control_block: int = 10
    scale_factor: float = 10.0
    initial_phase: float = 0.3
    capture_window: float = 0.2
    pzt_drive_noise: float = 0.0
    analyzer: SpectrumAnalyzerConfig = field(default_factory=SpectrumAnalyzerConfig)
    scan: Optional[ScanSettings] = None
    quadrature_override: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in MODES:
            physics_error(f"Unknown mode {self.mode!r}; expected one of {MODES}.")
        if self.decimation < 1 or self.control_block < 1:
            physics_error("Decimation and control block must be >= 1.")
        if not self.duration > 0 or not self.scale_factor > 0:
            physics_error("Duration and scale factor must be positive.")
        if not 0 < self.capture_window < np.pi / 2:
            physics_error("Capture window must lie in (0, pi/2).")
        if self.pzt_drive_noise < 0:
            physics_error("PZT drive noise must be >= 0.")
        if self.quadrature_override is not None:
            v_minus, v_plus = self.quadrature_override
            if not 0 <= v_minus <= v_plus:
                physics_error("Quadrature override needs 0 <= V- <= V+.")

    @property
    def control_rate(self):
        return self.sample_rate / self.decimation

    @property
    def target_phase(self):
        return np.pi / 2 if self.mode == "lock_antisqueeze" else 0.0

    def loop_sign(self):
        """PID sign for this mode; the configured sign is the squeeze-lock sign."""
        return -self.pid.sign if self.mode == "lock_antisqueeze" else self.pid.sign

    def with_seed(self, seed, initial_phase=None):
        phase = self.initial_phase if initial_phase is None else initial_phase
        return replace(self, seed=int(seed), initial_phase=phase)


class ErrorCurve(NamedTuple):
    theta: np.ndarray
    values: np.ndarray


class ArtifactPeak(NamedTuple):
    frequency: float
    observed_frequency: float
    height_db: float


@dataclass
class LockResult:
    verdict: str
    phase_trajectory: TimeSeries
    slow_phase: TimeSeries
    error_signal: TimeSeries
    band_power: Optional[TimeSeries]
    locked_spectrum: Optional[Spectrum]
    lock_acquired_at: Optional[float]
    residual_phase_rms: Optional[float]
    demod_phase: float
    lost_at: Optional[float] = None
    diagnostic: str = ""
    difference_signal: Optional[TimeSeries] = field(default=None, repr=False)
    artifact_signal: Optional[TimeSeries] = field(default=None, repr=False)
    analysis_start: float = 0.0

    def summary(self):
        return {
            "verdict": self.verdict,
            "lock_acquired_at_s": self.lock_acquired_at,
            "lost_at_s": self.lost_at,
            "residual_phase_rms_rad": self.residual_phase_rms,
            "demod_phase_rad": self.demod_phase,
            "diagnostic": self.diagnostic,
        }


def detected_levels(scenario, lab_frequencies):
    """Detected (V+, V−) at laboratory frequencies, dark noise excluded."""
    lab_frequencies = np.atleast_1d(np.asarray(lab_frequencies, dtype=float))
    if scenario.quadrature_override is not None:
        v_minus, v_plus = scenario.quadrature_override
        return np.full(lab_frequencies.shape, float(v_plus)), np.full(lab_frequencies.shape, float(v_minus))
    order = np.argsort(lab_frequencies)
    grid = lab_frequencies[order]
    unique, inverse = np.unique(grid, return_inverse=True)
    spectra = detected_variances(
        scenario.params, scenario.noise, scenario.budget, scenario.detector, unique
    )
    plus = np.empty_like(lab_frequencies)
    minus = np.empty_like(lab_frequencies)
    plus[order] = spectra.plus.values[inverse]
    minus[order] = spectra.minus.values[inverse]
    return plus, minus


def static_prediction(scenario, lab_frequencies, theta=None):
    """Open-loop detected variance at the lock point (θ = 0 or π/2)."""
    theta = scenario.target_phase if theta is None else theta
    plus, minus = detected_levels(scenario, lab_frequencies)
    return homodyne_variance(plus, minus, theta)


def _carrier_levels(scenario, zero_span=None):
    zero_span = zero_span or scenario.zero_span
    plus, minus = detected_levels(scenario, [zero_span.center_frequency * scenario.scale_factor])
    return float(plus[0]), float(minus[0])


def _pzt_plant(scenario):
    linear = replace(scenario.disturbance.pzt_resonance, quadratic=0.0)
    return PztPlant(linear, scenario.control_rate)


def _dither_response(scenario):
    """(phase amplitude δ, complex sensing response) at the dither frequency."""
    frequency = scenario.lock_in.mod_frequency
    pzt = _pzt_plant(scenario).frequency_response(frequency)[0]
    analyzer = ZeroSpanAnalyzer(scenario.zero_span, scenario.sample_rate)
    sensing = pzt * analyzer.modulation_response(frequency) / abs(pzt)
    return scenario.lock_in.mod_amplitude * abs(pzt), sensing


def auto_demod_phase(scenario):
    """Demodulation phase matching the PZT, VBW and band-pass delays at the dither frequency."""
    _, sensing = _dither_response(scenario)
    return float(np.angle(sensing))


def _resolved_lock_in(scenario):
    if scenario.lock_in.demod_phase is not None:
        return scenario.lock_in
    return replace(scenario.lock_in, demod_phase=auto_demod_phase(scenario))


def expected_error_curve(scenario, theta_grid):
    """
    Closed-form lock-in output versus static LO phase θ0.

    First-harmonic response of a sinusoidal dither,
    (V+ − V−)·sin(2θ0)·J1(2δ), scaled by the sensing-chain gain at the
    dither frequency and by the cosine of the demodulation phase error.
    """
    theta = np.asarray(theta_grid, dtype=float)
    v_plus, v_minus = _carrier_levels(scenario)
    delta, sensing = _dither_response(scenario)
    demod = _resolved_lock_in(scenario).demod_phase
    gain = abs(sensing) * np.cos(np.angle(sensing) - demod)
    values = (v_plus - v_minus) * special.j1(2.0 * delta) * gain * np.sin(2.0 * theta)
    return ErrorCurve(theta=theta, values=values)


def error_signal_curve(scenario, theta_grid, periods=ERROR_CURVE_PERIODS):
    """
    Settled lock-in output versus static LO phase θ0, from the simulated chain.

    For each θ0 the dithered photocurrent is read by the zero-span analyzer,
    decimated and demodulated; the value is the mean output over ``periods``
    dither periods after ``ERROR_CURVE_SETTLE_PERIODS``. Every θ0 sees the
    same noise record.
    """
    theta = np.asarray(theta_grid, dtype=float)
    if periods < 1:
        physics_error("Error curve needs at least one dither period.")
    fc = scenario.control_rate
    samples_per_period = fc / scenario.lock_in.mod_frequency
    settle = int(np.ceil(ERROR_CURVE_SETTLE_PERIODS * samples_per_period))
    n_ctrl = settle + int(np.ceil(periods * samples_per_period))
    n_raw = n_ctrl * scenario.decimation
    lock_in = _resolved_lock_in(scenario)

    t_ctrl = np.arange(n_ctrl) / fc
    drive = lock_in.mod_amplitude * np.sin(2.0 * np.pi * lock_in.mod_frequency * t_ctrl)
    theta_ac = _pzt_plant(scenario).step(drive)
    quadratic = scenario.disturbance.pzt_resonance.quadratic
    if quadratic:
        theta_ac = theta_ac + quadratic * theta_ac**2
    dither = np.repeat(theta_ac, scenario.decimation)
    quadratures = _quadrature_streams(scenario, n_raw)
    dark = _dark_stream(scenario, n_raw)

    values = np.empty(theta.shape)
    for index, theta0 in np.ndenumerate(theta):
        current = quadrature_at_phase(quadratures.plus, quadratures.minus, theta0 + dither).samples + dark
        analyzer = ZeroSpanAnalyzer(scenario.zero_span, scenario.sample_rate)
        reading = analyzer.process(current)[scenario.decimation - 1 :: scenario.decimation]
        demodulated = LockInAmplifier(lock_in, fc).process(reading)
        values[index] = float(np.mean(demodulated[settle:]))
    logger.debug("Error curve: %d phases, %d dither periods each", theta.size, periods)
    return ErrorCurve(theta=theta, values=values)


def _wrapped_error(theta, target):
    return np.mod(theta - target + np.pi / 2, np.pi) - np.pi / 2


def _first_dwell(inside, dwell):
    if inside.size < dwell:
        return None
    counts = np.convolve(inside.astype(int), np.ones(dwell, dtype=int), mode="valid")
    hits = np.flatnonzero(counts == dwell)
    return int(hits[0]) if hits.size else None


def _longest_excursion_start(outside, limit):
    """Index where the first run of more than ``limit`` outside samples begins."""
    edges = np.diff(np.concatenate(([0], outside.astype(int), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    for start, stop in zip(starts, stops):
        if stop - start > limit:
            return int(start)
    return None


def _artifact_stream(scenario, theta_ac, n_raw):
    """Electrical pickup of the PZT motion plus fixed electronic tones, at the raw rate."""
    detector = scenario.detector
    artifacts = np.zeros(n_raw)
    if detector.pzt_pickup_db is not None:
        quadratic = scenario.disturbance.pzt_resonance.quadratic
        motion = theta_ac + quadratic * theta_ac**2
        artifacts += 10.0 ** (detector.pzt_pickup_db / 20.0) * np.repeat(motion, scenario.decimation)
    if detector.pickup_tones:
        t = np.arange(n_raw) / scenario.sample_rate
        for frequency, level_db in detector.pickup_tones:
            # level is tone power relative to shot noise in 1 Hz of lab bandwidth
            amplitude = 2.0 * np.sqrt(10.0 ** (level_db / 10.0) / scenario.scale_factor)
            artifacts += amplitude * np.sin(2.0 * np.pi * frequency / scenario.scale_factor * t)
    return artifacts


def _quadrature_streams(scenario, n_raw):
    def plus_fn(lab_frequency):
        return detected_levels(scenario, lab_frequency)[0]

    def minus_fn(lab_frequency):
        return detected_levels(scenario, lab_frequency)[1]

    return synthesize_quadratures(
        plus_fn, minus_fn, n_raw, scenario.sample_rate, scenario.seed, scenario.scale_factor
    )


def _dark_stream(scenario, n_raw):
    sigma = np.sqrt(scenario.detector.dark_variance * scenario.sample_rate)
    return sigma * port_generator(scenario.seed, PORT_DARK).standard_normal(n_raw)


def _relative_spectrum(series, scenario):
    """Analyzer trace relative to shot noise with the dark-noise floor subtracted."""
    raw = analyzer_psd(series, scenario.analyzer, scenario.scale_factor, VACUUM_PSD_LEVEL)
    values = subtract_dark_noise(np.clip(raw.relative(), 0.0, None), scenario.detector.dark_noise_rel_db)
    return Spectrum(raw.frequencies, np.atleast_1d(values), reference_level=1.0)


def _classify(scenario, slow_phase):
    fc = scenario.control_rate
    periods = fc / scenario.lock_in.mod_frequency
    error = _wrapped_error(slow_phase, scenario.target_phase)
    inside = np.abs(error) < scenario.capture_window
    acquired = _first_dwell(inside, int(np.ceil(ACQUISITION_DWELL_PERIODS * periods)))
    if acquired is None:
        return "never", None, None, None
    excursion = _longest_excursion_start(~inside[acquired:], int(np.ceil(LOST_LOCK_PERIODS * periods)))
    if excursion is None:
        residual = float(np.sqrt(np.mean(error[acquired:] ** 2)))
        return "locked", acquired, None, residual
    lost = acquired + excursion
    residual = float(np.sqrt(np.mean(error[acquired:lost] ** 2)))
    return "lost", acquired, lost, residual


def run_lock(scenario):
    """
    Simulates the closed noise-locking loop.

    The photocurrent runs at ``sample_rate``; the zero-span reading is
    decimated to the control rate, demodulated, and the PID updates once per
    ``control_block`` control samples with the actuation held in between.
    Dither and PZT drive noise reach θ through the same resonant plant as the
    control voltage.

    Parameters:
    - scenario (LockScenario): mode must be lock_squeeze or lock_antisqueeze.

    Returns:
    - LockResult: verdict ``never`` for no asymmetry, saturation or divergence.

    Raises:
    - PhysicsError: wrong mode or guard violations.
    """
    if scenario.mode not in ("lock_squeeze", "lock_antisqueeze"):
        physics_error(f"run_lock needs a lock mode, got {scenario.mode!r}.")
    fc = scenario.control_rate
    fd = scenario.lock_in.mod_frequency
    if fc < MIN_SAMPLES_PER_DITHER * fd:
        physics_error(
            f"Control rate {fc:.6g} Hz gives fewer than {MIN_SAMPLES_PER_DITHER} samples per "
            f"dither period at {fd:.6g} Hz."
        )
    block = scenario.control_block
    n_ctrl = int(scenario.duration * fc) // block * block
    if n_ctrl < block:
        physics_error("Lock duration is shorter than one control block.")
    n_raw = n_ctrl * scenario.decimation
    t_ctrl = np.arange(n_ctrl) / fc
    lock_in = _resolved_lock_in(scenario)
    pid = replace(scenario.pid, sign=scenario.loop_sign())

    disturbance = simulate_phase_disturbance(scenario.disturbance, n_ctrl / fc, fc, scenario.seed)
    drive = lock_in.mod_amplitude * np.sin(2.0 * np.pi * fd * t_ctrl)
    if scenario.pzt_drive_noise > 0:
        sigma = scenario.pzt_drive_noise * np.sqrt(fc / 2.0)
        drive = drive + sigma * port_generator(scenario.seed, PORT_PZT_DRIVE).standard_normal(n_ctrl)
    theta_ac = _pzt_plant(scenario).step(drive)
    open_loop = scenario.initial_phase + disturbance.samples

    v_plus, v_minus = _carrier_levels(scenario)
    if not v_plus > v_minus:
        logger.warning("No phase-sensitive asymmetry (V+ = %.6g, V- = %.6g): lock impossible.", v_plus, v_minus)
        trajectory = TimeSeries(fc, open_loop + theta_ac)
        return LockResult(
            verdict="never",
            phase_trajectory=trajectory,
            slow_phase=TimeSeries(fc, open_loop),
            error_signal=TimeSeries(fc, np.zeros(n_ctrl)),
            band_power=None,
            locked_spectrum=None,
            lock_acquired_at=None,
            residual_phase_rms=None,
            demod_phase=lock_in.demod_phase,
            diagnostic="no phase-sensitive asymmetry: V+ <= V-, the error signal vanishes",
        )

    quadratures = _quadrature_streams(scenario, n_raw)
    artifacts = _artifact_stream(scenario, theta_ac, n_raw)
    additive = _dark_stream(scenario, n_raw) + artifacts
    quadratic = scenario.disturbance.pzt_resonance.quadratic

    analyzer = ZeroSpanAnalyzer(scenario.zero_span, scenario.sample_rate)
    amplifier = LockInAmplifier(lock_in, fc)
    control_plant = _pzt_plant(scenario)
    state = PidState()
    actuation = 0.0
    dt = block / fc
    decimation = scenario.decimation

    theta = np.zeros(n_ctrl)
    slow = np.zeros(n_ctrl)
    error = np.zeros(n_ctrl)
    power = np.zeros(n_ctrl)
    actuations = np.zeros(n_ctrl // block)
    difference = np.zeros(n_raw)
    diagnostic = ""
    diverged = False

    logger.debug("Closed loop: %d control samples at %.6g Hz, demod phase %.4f rad", n_ctrl, fc, lock_in.demod_phase)
    for index in range(n_ctrl // block):
        ctrl = slice(index * block, (index + 1) * block)
        raw = slice(index * block * decimation, (index + 1) * block * decimation)
        theta_control = control_plant.step(np.full(block, actuation))
        theta_pzt = theta_ac[ctrl] + theta_control
        if quadratic:
            theta_pzt = theta_pzt + quadratic * theta_pzt**2
        theta_block = open_loop[ctrl] + theta_pzt
        theta_raw = np.repeat(theta_block, decimation)
        current = (
            quadrature_at_phase(quadratures.plus.samples[raw], quadratures.minus.samples[raw], theta_raw)
            + additive[raw]
        )
        reading = analyzer.process(current)[decimation - 1 :: decimation]
        demodulated = amplifier.process(reading)
        state, actuation = pid_step(state, float(np.mean(demodulated)), dt, pid)

        theta[ctrl] = theta_block
        slow[ctrl] = open_loop[ctrl] + theta_control
        error[ctrl] = demodulated
        power[ctrl] = reading
        actuations[index] = actuation
        difference[raw] = current
        if not (np.isfinite(actuation) and np.all(np.isfinite(theta_block))):
            diagnostic = f"loop diverged at t = {index * dt:.6g} s"
            diverged = True
            break

    if diverged:
        verdict, acquired, lost, residual = "never", None, None, None
    else:
        verdict, acquired, lost, residual = _classify(scenario, slow)
        tail = actuations[-max(1, int(SATURATION_TAIL_FRACTION * actuations.size)):]
        low, high = pid.output_limits
        if np.all((tail <= low) | (tail >= high)):
            diagnostic = "actuation saturated at the PID output limit"
            if verdict != "never":
                verdict, acquired, lost, residual = "never", None, None, None

    if diverged:
        theta, slow, error, power, difference = (
            np.nan_to_num(array) for array in (theta, slow, error, power, difference)
        )
    difference_series = TimeSeries(scenario.sample_rate, difference)
    artifact_series = TimeSeries(scenario.sample_rate, artifacts)
    analysis_start = 0.0 if acquired is None else acquired / fc
    clean = difference_series.with_samples(difference_series.samples - artifacts).tail(analysis_start)
    locked_spectrum = _relative_spectrum(clean, scenario) if verdict != "never" else None

    result = LockResult(
        verdict=verdict,
        phase_trajectory=TimeSeries(fc, theta),
        slow_phase=TimeSeries(fc, slow),
        error_signal=TimeSeries(fc, error),
        band_power=TimeSeries(fc, power),
        locked_spectrum=locked_spectrum,
        lock_acquired_at=None if acquired is None else acquired / fc,
        residual_phase_rms=residual,
        demod_phase=lock_in.demod_phase,
        lost_at=None if lost is None else lost / fc,
        diagnostic=diagnostic or ("" if verdict == "locked" else f"verdict {verdict}"),
        difference_signal=difference_series,
        artifact_signal=artifact_series,
        analysis_start=analysis_start,
    )
    logger.info(
        "Lock verdict: %s (acquired at %s, residual %s rad)",
        verdict,
        "n/a" if result.lock_acquired_at is None else f"{result.lock_acquired_at:.4g} s",
        "n/a" if residual is None else f"{residual:.3g}",
    )
    return result


def locked_spectrum_with_artifacts(result, scenario):
    """Analyzer trace of the recorded difference signal with its dither and PZT peaks."""
    if result.difference_signal is None:
        physics_error("Lock result carries no difference signal.")
    if result.verdict != "locked":
        logger.warning("Spectrum requested for a %s run; it will not show a locked plateau.", result.verdict)
    return _relative_spectrum(result.difference_signal.tail(result.analysis_start), scenario)


class LockedTraces(NamedTuple):
    antisqueeze: Optional[Spectrum]
    shot_noise: Spectrum
    squeeze: Optional[Spectrum]


def shot_noise_spectrum(scenario):
    """Analyzer trace of the LO alone (vacuum input) with the dark floor subtracted."""
    segment = scenario.analyzer.segment_length(scenario.sample_rate, scenario.scale_factor)
    n_raw = segment * scenario.analyzer.averages
    vacuum = vacuum_noise(n_raw / scenario.sample_rate, scenario.sample_rate, scenario.seed)
    series = vacuum.with_samples(vacuum.samples + _dark_stream(scenario, len(vacuum)))
    return _relative_spectrum(series, scenario)


def locked_traces(scenario, result=None):
    """
    Anti-squeezed, shot-noise and squeezed locked spectra on one analyzer grid.

    ``result`` is reused for the scenario's own mode; the other lock mode is
    run here. A mode that never locks leaves its trace as None.
    """
    spectra = {}
    for mode in ("lock_antisqueeze", "lock_squeeze"):
        if result is not None and scenario.mode == mode:
            run = result
        else:
            run = run_lock(replace(scenario, mode=mode))
        spectra[mode] = run.locked_spectrum
    return LockedTraces(
        antisqueeze=spectra["lock_antisqueeze"],
        shot_noise=shot_noise_spectrum(scenario),
        squeeze=spectra["lock_squeeze"],
    )


def artifact_frequencies(scenario):
    """Laboratory frequencies where the locked spectrum carries known peaks."""
    scale = scenario.scale_factor
    frequencies = {"dither": scenario.lock_in.mod_frequency * scale}
    resonance = scenario.disturbance.pzt_resonance
    if scenario.detector.pzt_pickup_db is not None:
        frequencies["pzt_resonance"] = resonance.frequency * scale
        if resonance.quadratic:
            frequencies["pzt_second_harmonic"] = 2.0 * resonance.frequency * scale
    for frequency, _ in scenario.detector.pickup_tones:
        frequencies[f"pickup_{frequency:g}Hz"] = float(frequency)
    return frequencies


def _exclusion_mask(spectrum, frequencies, half_width):
    mask = np.ones(len(spectrum), dtype=bool)
    for frequency in frequencies:
        mask &= np.abs(spectrum.frequencies - frequency) > half_width
    return mask


def plateau_level(spectrum, exclude=(), half_width=None):
    """Mean level away from the listed artifact frequencies."""
    step = spectrum.frequencies[1] - spectrum.frequencies[0] if len(spectrum) > 1 else 0.0
    half_width = 5.0 * step if half_width is None else half_width
    mask = _exclusion_mask(spectrum, exclude, half_width)
    if not np.any(mask):
        physics_error("Every spectrum bin lies inside an artifact exclusion zone.")
    return float(np.mean(spectrum.values[mask]))


def find_artifact_peaks(spectrum, frequencies, plateau=None, tolerance_bins=3):
    """Peak height in dB above the plateau near each expected artifact frequency."""
    frequencies = list(frequencies)
    if plateau is None:
        plateau = plateau_level(spectrum, frequencies)
    step = spectrum.frequencies[1] - spectrum.frequencies[0] if len(spectrum) > 1 else 0.0
    peaks = []
    for frequency in frequencies:
        window = np.abs(spectrum.frequencies - frequency) <= tolerance_bins * step
        if not np.any(window):
            logger.debug("Artifact frequency %.6g Hz lies outside the spectrum window.", frequency)
            continue
        index = np.flatnonzero(window)[np.argmax(spectrum.values[window])]
        peaks.append(
            ArtifactPeak(
                frequency=float(frequency),
                observed_frequency=float(spectrum.frequencies[index]),
                height_db=float(to_db(spectrum.values[index] / plateau)),
            )
        )
    return peaks


def run_scan(scenario, ramp_rate=None):
    """
    Open-loop LO phase ramp read by the zero-span analyzer.

    θ(t) = θ0 + ramp·t + disturbance, no dither. The returned band-power trace
    is shot-noise normalised with the dark-noise floor subtracted and thinned
    to ``SCAN_TRACE_RATE``.
    """
    if scenario.mode != "scan":
        raise ScenarioError(f"run_scan needs mode 'scan', got {scenario.mode!r}.")
    settings = scenario.scan or ScanSettings(zero_span=scenario.zero_span)
    ramp = settings.ramp_rate if ramp_rate is None else ramp_rate
    fs = scenario.sample_rate
    n_raw = int(round(settings.duration * fs))
    if n_raw < 2:
        physics_error("Scan duration is too short.")
    disturbance = simulate_phase_disturbance(scenario.disturbance, settings.duration, fs, scenario.seed)
    theta = scenario.initial_phase + ramp * np.arange(n_raw) / fs + disturbance.samples
    scan_scenario = replace(scenario, zero_span=settings.zero_span)
    quadratures = _quadrature_streams(scan_scenario, n_raw)
    current = quadrature_at_phase(quadratures.plus.samples, quadratures.minus.samples, theta) + _dark_stream(
        scenario, n_raw
    )
    analyzer = ZeroSpanAnalyzer(settings.zero_span, fs)
    reading = analyzer.process(current)
    stride = max(1, int(fs // SCAN_TRACE_RATE))
    thinned = reading[stride - 1 :: stride] - scenario.detector.dark_variance
    logger.debug("Scan: %d samples at %.6g Hz, ramp %.4g rad/s", n_raw, fs, ramp)
    return TimeSeries(fs / stride, thinned, start_time=(stride - 1) / fs)


def scan_extrema(trace, settle_time):
    """(trough dB, crest dB) of a scan trace after the VBW settling transient."""
    settled = trace.tail(settle_time).samples
    if settled.size == 0:
        physics_error("Scan trace is shorter than its settling time.")
    trough = float(np.min(settled))
    if trough <= 0:
        physics_error("Scan trough falls to or below the dark-noise floor.")
    return to_db(trough), to_db(float(np.max(settled)))


def _run_seed(job):
    scenario, seed, randomize = job
    phase = None
    if randomize:
        phase = float(port_generator(seed, PORT_INITIAL_PHASE).uniform(-np.pi / 2, np.pi / 2))
    result = run_lock(scenario.with_seed(seed, phase))
    summary = result.summary()
    summary["seed"] = int(seed)
    summary["initial_phase_rad"] = scenario.initial_phase if phase is None else phase
    summary["final_phase_mod_pi"] = float(
        np.mod(np.mean(result.slow_phase.samples[-max(1, len(result.slow_phase) // 10):]), np.pi)
    )
    return summary


class BatchResult(NamedTuple):
    runs: list
    capture_probability: float


def run_batch(scenario, seeds, workers=None, randomize_initial_phase=True):
    """Seed-parallel lock runs; capture probability is the locked fraction."""
    seeds = [int(seed) for seed in seeds]
    if not seeds:
        physics_error("Batch needs at least one seed.")
    jobs = [(scenario, seed, randomize_initial_phase) for seed in seeds]
    if workers == 1:
        runs = [_run_seed(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            runs = list(executor.map(_run_seed, jobs))
    captured = sum(run["verdict"] == "locked" for run in runs)
    probability = captured / len(runs)
    logger.info("Batch: %d/%d seeds locked", captured, len(runs))
    return BatchResult(runs=runs, capture_probability=probability)

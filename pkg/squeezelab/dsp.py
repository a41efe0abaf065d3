"""Instrument emulation: spectrum analyzer, lock-in amplifier, PID and PSD estimation.

Filters come in two flavours sharing one set of coefficients: streaming
classes that keep their state between blocks (used inside the closed loop)
and one-shot functions that run a whole series.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate, optimize, signal

from .opo_core import Spectrum
from .stochastic_sim import VACUUM_PSD_LEVEL
from .utils import get_logger, physics_error


logger = get_logger(__name__)

BANDPASS_GUARD = 4.0
ENVELOPE_GUARD = 10.0
ENBW_GRID_POINTS = 1 << 16


@dataclass(frozen=True)
class ZeroSpanConfig:
    center_frequency: float
    rbw: float
    vbw: float
    sweep_time: float = 1.0

    def __post_init__(self):
        if not (self.rbw > 0 and self.vbw > 0):
            physics_error("RBW and VBW must be positive.")
        if self.vbw > self.rbw:
            physics_error(f"VBW {self.vbw:g} Hz must not exceed RBW {self.rbw:g} Hz.")
        if self.center_frequency <= self.rbw / 2.0:
            physics_error("Zero-span centre frequency must exceed RBW/2.")

    def scaled(self, scale):
        """Same instrument with every frequency divided by ``scale``."""
        return replace(
            self,
            center_frequency=self.center_frequency / scale,
            rbw=self.rbw / scale,
            vbw=self.vbw / scale,
        )


@dataclass(frozen=True)
class LockInConfig:
    """Dither/demodulation settings. ``demod_phase=None`` means pick it automatically."""

    mod_frequency: float
    mod_amplitude: float
    output_lpf_cutoff: float
    demod_phase: float = None

    def __post_init__(self):
        if not self.mod_frequency > 0:
            physics_error("Modulation frequency must be positive.")
        if self.mod_amplitude < 0:
            physics_error("Modulation amplitude must be >= 0.")
        if not 0 < self.output_lpf_cutoff < self.mod_frequency / 5.0:
            physics_error(
                f"Lock-in LPF cutoff {self.output_lpf_cutoff:g} Hz must lie below "
                f"mod_frequency/5 = {self.mod_frequency / 5.0:g} Hz."
            )

    def scaled(self, scale):
        return replace(
            self,
            mod_frequency=self.mod_frequency / scale,
            output_lpf_cutoff=self.output_lpf_cutoff / scale,
        )


@dataclass(frozen=True)
class PidConfig:
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0
    output_limits: tuple = (-np.inf, np.inf)
    sign: int = 1

    def __post_init__(self):
        low, high = self.output_limits
        if not low < high:
            physics_error(f"PID output limits must be ordered, got {self.output_limits!r}.")
        if self.sign not in (1, -1):
            physics_error("PID sign must be +1 or -1.")

    def with_sign(self, sign):
        return replace(self, sign=sign)


@dataclass(frozen=True)
class SpectrumAnalyzerConfig:
    """FFT-analyzer emulation: bin width ``rbw`` and ``averages`` non-overlapping traces."""

    rbw: float = 100.0
    averages: int = 16
    fmin: float = 1.0e3
    fmax: float = 1.0e5

    def __post_init__(self):
        if not self.rbw > 0 or self.averages < 1:
            physics_error("Analyzer RBW must be positive and averages >= 1.")
        if not 0 <= self.fmin < self.fmax:
            physics_error("Analyzer window needs 0 <= fmin < fmax.")

    def segment_length(self, sample_rate, scale=1.0):
        return int(round(sample_rate * scale / self.rbw))


def _bandpass_edges(f0, bandwidth, fs):
    """Digital -3 dB edges whose prewarped geometric centre is f0."""
    target = np.tan(np.pi * f0 / fs) ** 2

    def mismatch(low):
        return np.tan(np.pi * low / fs) * np.tan(np.pi * (low + bandwidth) / fs) - target

    low = optimize.brentq(mismatch, 0.0, f0, xtol=1e-12 * f0)
    return low, low + bandwidth


def design_bandpass(f0, bandwidth, fs):
    if not (f0 > 0 and bandwidth > 0):
        physics_error("Band-pass centre and bandwidth must be positive.")
    if fs <= BANDPASS_GUARD * (f0 + bandwidth):
        physics_error(
            f"Sample rate {fs:.6g} Hz must exceed {BANDPASS_GUARD:g} x (f0 + bandwidth) = "
            f"{BANDPASS_GUARD * (f0 + bandwidth):.6g} Hz."
        )
    low, high = _bandpass_edges(f0, bandwidth, fs)
    return signal.butter(2, [low, high], btype="bandpass", output="sos", fs=fs)


def equivalent_noise_bandwidth(sos, fs):
    """∫|H(f)|² df over [0, fs/2], normalised to unit peak gain."""
    frequencies, response = signal.sosfreqz(sos, worN=ENBW_GRID_POINTS, fs=fs)
    power = np.abs(response) ** 2
    return integrate.trapezoid(power, frequencies) / power.max()


class _SosStream:
    def __init__(self, sos):
        self.sos = sos
        self.reset()

    def reset(self):
        self._zi = np.zeros((self.sos.shape[0], 2))

    def process(self, block):
        output, self._zi = signal.sosfilt(self.sos, np.asarray(block, dtype=float), zi=self._zi)
        return output


class BandpassFilter(_SosStream):
    """4th-order Butterworth band-pass, unity gain at f0."""

    def __init__(self, f0, bandwidth, fs):
        super().__init__(design_bandpass(f0, bandwidth, fs))
        self.f0 = f0
        self.bandwidth = bandwidth
        self.fs = fs
        self.enbw = equivalent_noise_bandwidth(self.sos, fs)

    def group_delay(self):
        """Group delay at f0 in seconds."""
        b, a = signal.sos2tf(self.sos)
        _, delay = signal.group_delay((b, a), w=[self.f0], fs=self.fs)
        return float(delay[0]) / self.fs


class EnvelopeDetector:
    """Square-law detector followed by a first-order low-pass at the VBW."""

    def __init__(self, vbw, fs):
        if vbw >= fs / ENVELOPE_GUARD:
            physics_error(f"VBW {vbw:g} Hz must stay below sample_rate/{ENVELOPE_GUARD:g}.")
        self.vbw = vbw
        self.fs = fs
        self._smoother = _SosStream(signal.butter(1, vbw, btype="low", output="sos", fs=fs))

    def reset(self):
        self._smoother.reset()

    def process(self, block):
        block = np.asarray(block, dtype=float)
        return self._smoother.process(block * block)

    def response(self, frequency):
        _, response = signal.sosfreqz(self._smoother.sos, worN=[frequency], fs=self.fs)
        return response[0]


class LockInAmplifier:
    """Mixes with 2·sin(2πf·t + φ) and low-passes with a 2nd-order Butterworth."""

    def __init__(self, config, fs):
        self.config = config
        self.fs = fs
        self._lowpass = _SosStream(
            signal.butter(2, config.output_lpf_cutoff, btype="low", output="sos", fs=fs)
        )
        self._index = 0

    def reset(self):
        self._lowpass.reset()
        self._index = 0

    def reference(self, n_samples):
        phase = self.config.demod_phase or 0.0
        t = (self._index + np.arange(n_samples)) / self.fs
        return 2.0 * np.sin(2.0 * np.pi * self.config.mod_frequency * t + phase)

    def process(self, block):
        block = np.asarray(block, dtype=float)
        mixed = block * self.reference(block.size)
        self._index += block.size
        return self._lowpass.process(mixed)


@dataclass
class PidState:
    integral: float = 0.0
    previous_error: float = None
    output: float = 0.0
    saturated: bool = False


def pid_step(state, error, dt, cfg):
    """
    One parallel-form PID update with conditional-integration anti-windup.

    The integrator holds while the output is saturated and the error would
    drive it further into the limit.

    Parameters:
    - state (PidState): previous controller state (not modified).
    - error (float): raw error; multiplied by ``cfg.sign``.
    - dt (float): step in seconds.
    - cfg (PidConfig): gains, limits and sign.

    Returns:
    - (PidState, float): new state and actuation.
    """
    if not dt > 0:
        physics_error("PID step needs dt > 0.")
    low, high = cfg.output_limits
    signed = cfg.sign * error
    proportional = cfg.kp * signed
    derivative = 0.0
    if cfg.kd and state.previous_error is not None:
        derivative = cfg.kd * (signed - state.previous_error) / dt
    integral = state.integral + signed * dt
    candidate = proportional + cfg.ki * integral + derivative
    pushing = cfg.ki * signed
    if (candidate > high and pushing > 0) or (candidate < low and pushing < 0):
        integral = state.integral
    unclamped = proportional + cfg.ki * integral + derivative
    output = float(np.clip(unclamped, low, high))
    new_state = PidState(
        integral=integral,
        previous_error=signed,
        output=output,
        saturated=output != unclamped,
    )
    return new_state, output


def bandpass(series, f0, bandwidth):
    stream = BandpassFilter(f0, bandwidth, series.sample_rate)
    return series.with_samples(stream.process(series.samples))


def envelope(series, vbw):
    detector = EnvelopeDetector(vbw, series.sample_rate)
    return series.with_samples(detector.process(series.samples))


class ZeroSpanAnalyzer:
    """Streaming zero-span power meter calibrated to read 1.0 on shot noise."""

    def __init__(self, config, fs, reference_psd=VACUUM_PSD_LEVEL):
        self.config = config
        self.bandpass = BandpassFilter(config.center_frequency, config.rbw, fs)
        self.envelope = EnvelopeDetector(config.vbw, fs)
        self.calibration = reference_psd * self.bandpass.enbw

    def process(self, block):
        return self.envelope.process(self.bandpass.process(block)) / self.calibration

    def modulation_response(self, frequency):
        """Complex response of the power reading to an envelope modulation at ``frequency``."""
        delay = self.bandpass.group_delay()
        return self.envelope.response(frequency) * np.exp(-2j * np.pi * frequency * delay)


def zero_span_power(series, cfg, reference_psd=VACUUM_PSD_LEVEL):
    """Band power vs time; white noise at the reference PSD reads 1.0."""
    analyzer = ZeroSpanAnalyzer(cfg, series.sample_rate, reference_psd)
    logger.debug(
        "Zero span at %.6g Hz: RBW %.6g Hz, VBW %.6g Hz, ENBW %.6g Hz",
        cfg.center_frequency,
        cfg.rbw,
        cfg.vbw,
        analyzer.bandpass.enbw,
    )
    return series.with_samples(analyzer.process(series.samples))


def welch_psd(series, segment_length, overlap_fraction=0.5, window="hann", reference_level=1.0):
    """
    One-sided, window-power-corrected PSD estimate.

    Raises:
    - PhysicsError: series shorter than one segment or overlap outside [0, 1).
    """
    if window != "hann":
        physics_error(f"Unsupported window {window!r}; only 'hann' is available.")
    if not 0 <= overlap_fraction < 1:
        physics_error("Overlap fraction must lie in [0, 1).")
    segment_length = int(segment_length)
    if segment_length < 2 or segment_length > len(series):
        physics_error(
            f"Series of {len(series)} samples is too short for segments of {segment_length}."
        )
    frequencies, density = signal.welch(
        series.samples,
        fs=series.sample_rate,
        window=window,
        nperseg=segment_length,
        noverlap=int(overlap_fraction * segment_length),
        detrend=False,
        return_onesided=True,
        scaling="density",
    )
    return Spectrum(frequencies, density, reference_level=reference_level, unit="psd")


def analyzer_psd(series, cfg, scale=1.0, reference_level=VACUUM_PSD_LEVEL):
    """Averaged FFT-analyzer trace on the lab frequency axis, clipped to [fmin, fmax]."""
    segment = cfg.segment_length(series.sample_rate, scale)
    available = len(series) // segment
    if available < 1:
        physics_error(
            f"Need at least {segment} samples for a {cfg.rbw:g} Hz analyzer bin, got {len(series)}."
        )
    if available < cfg.averages:
        logger.warning(
            "Only %d of %d analyzer averages fit in the record.", available, cfg.averages
        )
    count = min(available, cfg.averages)
    record = series.with_samples(series.samples[-count * segment:])
    spectrum = welch_psd(record, segment, overlap_fraction=0.0, reference_level=reference_level)
    return spectrum.rescaled(scale).band(cfg.fmin, cfg.fmax)


def lock_in_demodulate(series, cfg):
    """In-phase lock-in output for a whole series."""
    amplifier = LockInAmplifier(cfg, series.sample_rate)
    return series.with_samples(amplifier.process(series.samples))

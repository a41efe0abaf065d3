"""Time-domain Langevin simulation of the OPO output and the LO phase plant.

Noise normalisation: every Wiener channel has unit two-sided spectral
density, so a vacuum output stream sampled at ``fs`` has sample variance
``fs`` and a one-sided Welch PSD of 2. ``VACUUM_PSD_LEVEL`` carries that
reference for the PSD estimators.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import signal

from .opo_core import Branch
from .utils import get_logger, physics_error


logger = get_logger(__name__)

VACUUM_PSD_LEVEL = 2.0
RESOLUTION_GUARD = 20.0
PZT_GUARD = 10.0
BURN_IN_RELAXATION_TIMES = 10.0
INTEGRATORS = ("exact_ou", "euler_maruyama")

# one independent substream per noise port
PORT_OUT_PLUS = 0
PORT_IN_PLUS = 1
PORT_LOSS_PLUS = 2
PORT_OUT_MINUS = 3
PORT_IN_MINUS = 4
PORT_LOSS_MINUS = 5
PORT_DISTURBANCE = 10
PORT_PZT_DRIVE = 11
PORT_SYNTH_PLUS = 20
PORT_SYNTH_MINUS = 21
PORT_TECHNICAL = 22
PORT_DARK = 23
PORT_VACUUM = 24

_BRANCH_PORTS = {
    Branch.PLUS: (PORT_OUT_PLUS, PORT_IN_PLUS, PORT_LOSS_PLUS),
    Branch.MINUS: (PORT_OUT_MINUS, PORT_IN_MINUS, PORT_LOSS_MINUS),
}


def port_generator(seed, port):
    """PCG64 generator for one noise port of a seeded run."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(port),))
    return np.random.Generator(np.random.PCG64(sequence))


@dataclass(frozen=True)
class TimeSeries:
    sample_rate: float
    samples: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        samples = np.atleast_1d(np.asarray(self.samples, dtype=float))
        if not self.sample_rate > 0:
            physics_error(f"Sample rate must be positive, got {self.sample_rate!r}.")
        if samples.ndim != 1:
            physics_error("Time series samples must be one-dimensional.")
        if not np.all(np.isfinite(samples)):
            physics_error("Time series contains non-finite samples.")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def dt(self):
        return 1.0 / self.sample_rate

    @property
    def duration(self):
        return self.samples.size / self.sample_rate

    def times(self):
        return self.start_time + np.arange(self.samples.size) / self.sample_rate

    def with_samples(self, samples):
        return TimeSeries(self.sample_rate, samples, self.start_time)

    def tail(self, start_time):
        """Samples at or after ``start_time``."""
        index = int(np.ceil((start_time - self.start_time) * self.sample_rate - 1e-9))
        index = min(max(index, 0), self.samples.size)
        return TimeSeries(
            self.sample_rate,
            self.samples[index:],
            self.start_time + index / self.sample_rate,
        )


@dataclass(frozen=True)
class SimConfig:
    params: object
    duration: float
    sample_rate: float
    rng_seed: int = 0
    integrator: str = "exact_ou"

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            physics_error(f"Unknown integrator {self.integrator!r}; expected one of {INTEGRATORS}.")
        if not self.sample_rate > 0 or not self.duration > 0:
            physics_error("Duration and sample rate must be positive.")
        fastest = max(self.params.kappa_a, self.params.pump_gain) / (2.0 * np.pi)
        if self.sample_rate <= RESOLUTION_GUARD * fastest:
            physics_error(
                f"Sample rate {self.sample_rate:.6g} Hz must exceed {RESOLUTION_GUARD:g} x "
                f"{fastest:.6g} Hz to resolve the cavity dynamics."
            )
        if self.n_samples < 2:
            physics_error("Simulation must produce at least 2 samples.")

    @property
    def n_samples(self):
        return int(round(self.duration * self.sample_rate))


@dataclass(frozen=True)
class PztResonance:
    """Second-order PZT plant: resonance f0 (Hz), quality factor, DC gain (rad/V)."""

    frequency: float
    quality_factor: float
    gain: float
    quadratic: float = 0.0

    def __post_init__(self):
        if not self.frequency > 0:
            physics_error("PZT resonance frequency must be positive.")
        if not self.quality_factor > 0:
            physics_error("PZT quality factor must be positive.")


@dataclass(frozen=True)
class DisturbanceModel:
    linear_drift: float = 0.0
    random_walk_diffusion: float = 0.0
    sinusoids: tuple = ()
    pzt_resonance: PztResonance = field(default_factory=lambda: PztResonance(19.0e3, 30.0, 0.1))

    def __post_init__(self):
        if self.random_walk_diffusion < 0:
            physics_error("Random-walk diffusion must be >= 0.")
        for entry in self.sinusoids:
            if len(entry) != 3:
                physics_error("Disturbance sinusoids are (frequency, amplitude, phase) triples.")


class QuadraturePair(NamedTuple):
    plus: TimeSeries
    minus: TimeSeries


def _interval_covariance(gamma, dt):
    """Covariance of (end-state kernel, integral kernel, increment) over one step."""
    z = gamma * dt
    c11 = -np.expm1(-2.0 * z) / (2.0 * gamma)
    c13 = -np.expm1(-z) / gamma
    c33 = dt
    c12 = (c13 - c11) / gamma
    c23 = (z + np.expm1(-z)) / gamma**2
    if z < 1e-3:
        c22 = dt**3 * (1.0 / 3.0 - z / 4.0 + 7.0 * z**2 / 60.0 - z**3 / 24.0)
    else:
        c22 = (dt - 2.0 * c13 + c11) / gamma**2
    return np.array([[c11, c12, c13], [c12, c22, c23], [c13, c23, c33]])


def _covariance_root(cov):
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    return eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


def _channels(params, branch):
    ports = _BRANCH_PORTS[branch]
    rates = (params.kappa_out_a, params.kappa_in_a, params.kappa_l_a)
    return [(port, rate) for port, rate in zip(ports, rates) if rate > 0 or port == ports[0]]


def _relaxation_rate(params, branch):
    if branch is Branch.PLUS:
        return params.kappa_a - params.pump_gain
    return params.kappa_a + params.pump_gain


def _simulate_exact(params, branch, n_total, dt, seed):
    gamma = _relaxation_rate(params, branch)
    decay = np.exp(-gamma * dt)
    root = _covariance_root(_interval_covariance(gamma, dt))
    drive_end = np.zeros(n_total)
    drive_mean = np.zeros(n_total)
    out_increment = None
    for port, rate in _channels(params, branch):
        draws = port_generator(seed, port).standard_normal((n_total, 3)) @ root.T
        weight = np.sqrt(2.0 * rate)
        drive_end += weight * draws[:, 0]
        drive_mean += weight * draws[:, 1]
        if out_increment is None:
            out_increment = draws[:, 2]
    state_end = signal.lfilter([1.0], [1.0, -decay], drive_end)
    state_start = np.concatenate(([0.0], state_end[:-1]))
    mean_state = (state_start * (-np.expm1(-gamma * dt)) / gamma + drive_mean) / dt
    return np.sqrt(2.0 * params.kappa_out_a) * mean_state - out_increment / dt


def _simulate_euler(params, branch, n_total, dt, seed):
    gamma = _relaxation_rate(params, branch)
    drive = np.zeros(n_total)
    out_increment = None
    for port, rate in _channels(params, branch):
        increments = np.sqrt(dt) * port_generator(seed, port).standard_normal(n_total)
        drive += np.sqrt(2.0 * rate) * increments
        if out_increment is None:
            out_increment = increments
    state_end = signal.lfilter([1.0], [1.0, -(1.0 - gamma * dt)], drive)
    state_start = np.concatenate(([0.0], state_end[:-1]))
    midpoint = 0.5 * (state_start + state_end)
    return np.sqrt(2.0 * params.kappa_out_a) * midpoint - out_increment / dt


def burn_in_time(params):
    return BURN_IN_RELAXATION_TIMES / (params.kappa_a - params.pump_gain)


def simulate_output_quadratures(config):
    """
    Simulates both output quadratures of a vacuum-seeded OPO.

    Each sample is the output field averaged over one sampling interval, so
    the exact integrator carries no step-size bias. A burn-in of ten slow
    relaxation times is simulated and discarded.

    Parameters:
    - config (SimConfig): cavity parameters, duration, sample rate, seed and integrator.

    Raises:
    - PhysicsError: nonzero α, threshold or sample-rate guard violations.
    """
    params = config.params
    if params.alpha != 0.0:
        physics_error("Time-domain simulation supports a vacuum seed only (alpha = 0).")
    if params.pump_gain >= params.kappa_a:
        physics_error("Time-domain simulation requires a below-threshold cavity.")
    dt = 1.0 / config.sample_rate
    n_burn = int(np.ceil(burn_in_time(params) * config.sample_rate))
    n_total = n_burn + config.n_samples
    engine = _simulate_exact if config.integrator == "exact_ou" else _simulate_euler
    logger.debug(
        "Simulating %d samples (%d burn-in) at %.6g Hz with %s",
        n_total,
        n_burn,
        config.sample_rate,
        config.integrator,
    )
    outputs = {}
    for branch in (Branch.PLUS, Branch.MINUS):
        samples = engine(params, branch, n_total, dt, config.rng_seed)[n_burn:]
        outputs[branch] = TimeSeries(config.sample_rate, samples)
    return QuadraturePair(plus=outputs[Branch.PLUS], minus=outputs[Branch.MINUS])


def simulate_phase_disturbance(model, duration, sample_rate, seed):
    """LO phase drift θ_d(t) = drift·t + Wiener(diffusion) + Σ sinusoids."""
    n_samples = int(round(duration * sample_rate))
    if n_samples < 1 or not sample_rate > 0:
        physics_error("Disturbance needs a positive duration and sample rate.")
    t = np.arange(n_samples) / sample_rate
    theta = model.linear_drift * t
    if model.random_walk_diffusion > 0:
        steps = port_generator(seed, PORT_DISTURBANCE).standard_normal(n_samples - 1)
        steps *= np.sqrt(model.random_walk_diffusion / sample_rate)
        theta = theta + np.concatenate(([0.0], np.cumsum(steps)))
    for frequency, amplitude, phase in model.sinusoids:
        theta = theta + amplitude * np.sin(2.0 * np.pi * frequency * t + phase)
    return TimeSeries(sample_rate, theta)


class PztPlant:
    """Streaming PZT resonator, bilinear-discretised with the resonance prewarped.

    Prewarping places the digital resonance exactly at f0, so the gain there
    is Q·k and the DC gain is k.
    """

    def __init__(self, resonance, sample_rate):
        if sample_rate <= PZT_GUARD * resonance.frequency:
            physics_error(
                f"Sample rate {sample_rate:.6g} Hz must exceed {PZT_GUARD:g} x the PZT "
                f"resonance {resonance.frequency:.6g} Hz."
            )
        self.resonance = resonance
        self.sample_rate = sample_rate
        omega = 2.0 * sample_rate * np.tan(np.pi * resonance.frequency / sample_rate)
        numerator = [resonance.gain * omega**2]
        denominator = [1.0, omega / resonance.quality_factor, omega**2]
        self.b, self.a = signal.bilinear(numerator, denominator, fs=sample_rate)
        self.reset()

    def reset(self):
        self._zi = np.zeros(max(len(self.a), len(self.b)) - 1)

    def step(self, drive):
        drive = np.atleast_1d(np.asarray(drive, dtype=float))
        phase, self._zi = signal.lfilter(self.b, self.a, drive, zi=self._zi)
        if self.resonance.quadratic:
            phase = phase + self.resonance.quadratic * phase**2
        return phase

    def frequency_response(self, frequency):
        _, response = signal.freqz(self.b, self.a, worN=np.atleast_1d(frequency), fs=self.sample_rate)
        return response


def pzt_response(drive, resonance):
    """Filters a drive voltage series through the PZT plant; returns phase in rad."""
    plant = PztPlant(resonance, drive.sample_rate)
    return drive.with_samples(plant.step(drive.samples))


def synthesize_colored_noise(psd_fn, n_samples, sample_rate, seed, port=PORT_TECHNICAL):
    """
    Gaussian noise with a prescribed two-sided PSD relative to vacuum.

    White noise of variance ``sample_rate`` is shaped in the frequency domain
    by ``sqrt(psd_fn(f))``; ``psd_fn`` takes simulation frequencies in Hz.
    """
    if n_samples < 2:
        physics_error("Synthesised noise needs at least 2 samples.")
    white = np.sqrt(sample_rate) * port_generator(seed, port).standard_normal(n_samples)
    frequencies = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate)
    shape = np.asarray(psd_fn(frequencies), dtype=float)
    if np.any(shape < 0) or not np.all(np.isfinite(shape)):
        physics_error("Synthesised PSD must be finite and non-negative.")
    shaped = np.fft.irfft(np.fft.rfft(white) * np.sqrt(shape), n=n_samples)
    return TimeSeries(sample_rate, shaped)


def synthesize_quadratures(plus_fn, minus_fn, n_samples, sample_rate, seed, scale_factor=1.0):
    """Detected quadrature streams whose PSDs follow ``plus_fn``/``minus_fn`` at lab frequencies."""
    plus = synthesize_colored_noise(
        lambda f: plus_fn(f * scale_factor), n_samples, sample_rate, seed, PORT_SYNTH_PLUS
    )
    minus = synthesize_colored_noise(
        lambda f: minus_fn(f * scale_factor), n_samples, sample_rate, seed, PORT_SYNTH_MINUS
    )
    return QuadraturePair(plus=plus, minus=minus)


def vacuum_noise(duration, sample_rate, seed, port=PORT_VACUUM):
    """Shot-noise reference stream (sample variance equal to the sample rate)."""
    n_samples = int(round(duration * sample_rate))
    if n_samples < 2:
        physics_error("Vacuum reference needs at least 2 samples.")
    samples = np.sqrt(sample_rate) * port_generator(seed, port).standard_normal(n_samples)
    return TimeSeries(sample_rate, samples)

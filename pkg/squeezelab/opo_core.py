"""Analytic output-variance model of a sub-threshold optical parametric oscillator.

The two output quadrature variances are a weighted sum of the seed, loss,
vacuum, pump and detuning noise spectra divided by |D±(ω)|². Angular
frequencies are rad/s internally; grids and exports are in Hz. The vacuum
variance is normalised to 1.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, NamedTuple, Union

import numpy as np
from scipy import constants, optimize

from .utils import get_logger, physics_error


logger = get_logger(__name__)

SPEED_OF_LIGHT = constants.c
GAIN_BRACKET_MARGIN = 1e-9


class Branch(str, Enum):
    """Quadrature branch: PLUS is anti-squeezed, MINUS is squeezed."""

    PLUS = "plus"
    MINUS = "minus"


def _as_branch(branch):
    try:
        return Branch(branch)
    except ValueError:
        physics_error(f"Unknown branch {branch!r}; expected 'plus' or 'minus'.")


@dataclass(frozen=True)
class Spectrum:
    """A one-sided spectrum on a strictly increasing frequency grid.

    ``reference_level`` is the value that reads 0 dB (the shot-noise limit).
    """

    frequencies: np.ndarray
    values: np.ndarray
    reference_level: float = 1.0
    unit: str = "variance"

    def __post_init__(self):
        frequencies = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if frequencies.shape != values.shape or frequencies.ndim != 1:
            physics_error("Spectrum frequencies and values must be 1-D arrays of equal length.")
        if frequencies.size == 0:
            physics_error("Spectrum must contain at least one point.")
        if frequencies.size > 1 and not np.all(np.diff(frequencies) > 0):
            physics_error("Spectrum frequencies must be strictly increasing.")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            physics_error("Spectrum values must be finite and non-negative.")
        if not self.reference_level > 0:
            physics_error("Spectrum reference level must be positive.")
        object.__setattr__(self, "frequencies", frequencies)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.frequencies.size

    def relative(self):
        """Values divided by the reference level (1.0 = shot noise)."""
        return self.values / self.reference_level

    def to_db(self):
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.relative())

    def interpolate(self, frequencies):
        """Linear interpolation, clamped to the end values outside the grid."""
        return np.interp(np.asarray(frequencies, dtype=float), self.frequencies, self.values)

    def rescaled(self, scale):
        """Same values on a frequency axis multiplied by ``scale``."""
        return replace(self, frequencies=self.frequencies * scale)

    def band(self, fmin, fmax):
        mask = (self.frequencies >= fmin) & (self.frequencies <= fmax)
        if not np.any(mask):
            physics_error(f"No spectrum bins between {fmin:g} Hz and {fmax:g} Hz.")
        return replace(self, frequencies=self.frequencies[mask], values=self.values[mask])


NoiseSource = Union[float, Callable[[np.ndarray], np.ndarray], Spectrum]


def evaluate_noise_source(source, frequency_hz):
    """Evaluate a constant, callable or tabulated noise spectrum at ``frequency_hz``."""
    frequency_hz = np.asarray(frequency_hz, dtype=float)
    if isinstance(source, Spectrum):
        values = source.interpolate(frequency_hz)
    elif callable(source):
        values = np.asarray(source(frequency_hz), dtype=float)
    else:
        values = np.full(frequency_hz.shape, float(source))
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        physics_error("Input noise spectra must be finite and non-negative at every frequency.")
    return np.broadcast_to(values, frequency_hz.shape)


def _check_static_source(name, source):
    if isinstance(source, (int, float)) and not (np.isfinite(source) and source >= 0):
        physics_error(f"Noise input {name} must be finite and >= 0, got {source!r}.")


@dataclass(frozen=True)
class NoiseInputs:
    """Input noise spectra. Pairs are ordered (plus, minus); vacuum is 1."""

    v_seed: tuple = (1.0, 1.0)
    v_loss: tuple = (1.0, 1.0)
    v_vac: tuple = (1.0, 1.0)
    v_pump: tuple = (1.0, 1.0)
    v_detuning: NoiseSource = 0.0

    def __post_init__(self):
        for name in ("v_seed", "v_loss", "v_vac", "v_pump"):
            pair = getattr(self, name)
            if len(pair) != 2:
                physics_error(f"Noise input {name} must be a (plus, minus) pair.")
            for source in pair:
                _check_static_source(name, source)
        _check_static_source("v_detuning", self.v_detuning)

    def branch_value(self, name, branch, frequency_hz):
        pair = getattr(self, name)
        source = pair[0] if branch is Branch.PLUS else pair[1]
        return evaluate_noise_source(source, frequency_hz)


@dataclass(frozen=True)
class CavityGeometry:
    """Mirror transmissions and round-trip loss of the bow-tie cavity."""

    round_trip_length: float
    output_coupler_transmission: float
    input_coupler_transmission: float = 0.0
    intracavity_loss: float = 0.0
    pump_input_transmission: float = 0.0

    def __post_init__(self):
        if not self.round_trip_length > 0:
            physics_error(f"Round-trip length must be positive, got {self.round_trip_length!r}.")
        for name in (
            "output_coupler_transmission",
            "input_coupler_transmission",
            "intracavity_loss",
            "pump_input_transmission",
        ):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                physics_error(f"{name} must lie in [0, 1), got {value!r}.")
        total = (
            self.output_coupler_transmission
            + self.input_coupler_transmission
            + self.intracavity_loss
        )
        if total >= 1.0:
            physics_error(f"T_out + T_in + L_rt must be < 1, got {total:.6g}.")
        if self.output_coupler_transmission == 0.0:
            physics_error("Output coupler transmission must be positive.")


@dataclass(frozen=True)
class CavityParams:
    """Decay rates (rad/s), nonlinear coupling and intracavity fields.

    ``kappa_a`` is derived as the sum of the three fundamental decay channels,
    so it always equals κ_out + κ_in + κ_l exactly.
    """

    kappa_out_a: float
    kappa_in_a: float = 0.0
    kappa_l_a: float = 0.0
    kappa_b: float = 1.0
    kappa_in_b: float = 0.0
    epsilon: float = 1.0
    beta: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        for name in ("kappa_out_a", "kappa_in_a", "kappa_l_a", "kappa_b", "kappa_in_b",
                     "epsilon", "beta", "alpha"):
            if not np.isfinite(getattr(self, name)):
                physics_error(f"{name} must be finite.")
        for name in ("kappa_in_a", "kappa_l_a", "kappa_in_b", "epsilon", "beta"):
            if getattr(self, name) < 0:
                physics_error(f"{name} must be >= 0, got {getattr(self, name)!r}.")
        if not self.kappa_out_a > 0:
            physics_error("kappa_out_a must be positive.")
        if not self.kappa_b > 0:
            physics_error("kappa_b must be positive.")
        if self.pump_gain >= self.kappa_a:
            physics_error(
                f"Configuration at or above threshold: epsilon*beta = {self.pump_gain:.6g} rad/s "
                f">= kappa_a = {self.kappa_a:.6g} rad/s."
            )

    @property
    def kappa_a(self):
        return self.kappa_out_a + self.kappa_in_a + self.kappa_l_a

    @property
    def pump_gain(self):
        """Parametric gain rate g = εβ."""
        return self.epsilon * self.beta

    @property
    def threshold_fraction(self):
        return self.pump_gain / self.kappa_a

    @property
    def escape_efficiency(self):
        return self.kappa_out_a / self.kappa_a

    def with_pump_gain(self, gain):
        epsilon = self.epsilon if self.epsilon > 0 else 1.0
        return replace(self, epsilon=epsilon, beta=gain / epsilon)


class CouplingCoefficients(NamedTuple):
    c_s: float
    c_l: float
    c_v: np.ndarray
    c_p: float
    c_delta: float


class BranchSpectra(NamedTuple):
    plus: Spectrum
    minus: Spectrum


def decay_rates_from_geometry(geometry, epsilon=1.0, beta=0.0, alpha=0.0, kappa_b=None):
    """
    Converts mirror transmissions into amplitude decay rates.

    Each channel decays at κ_i = c·T_i / (2·L_roundtrip), so the escape
    efficiency κ_out/κ_a equals T_out/(T_out + T_in + L_rt).

    Parameters:
    - geometry (CavityGeometry): cavity mirrors and loss.
    - epsilon, beta, alpha (float): coupling and field amplitudes carried into
      the returned parameters.
    - kappa_b (float): total pump decay rate; defaults to the pump coupler plus
      round-trip loss rate, or κ_a when both vanish.

    Raises:
    - PhysicsError: non-physical geometry or a threshold-or-above pump.
    """
    rate = SPEED_OF_LIGHT / (2.0 * geometry.round_trip_length)
    kappa_out_a = rate * geometry.output_coupler_transmission
    kappa_in_a = rate * geometry.input_coupler_transmission
    kappa_l_a = rate * geometry.intracavity_loss
    kappa_in_b = rate * geometry.pump_input_transmission
    if kappa_b is None:
        kappa_b = rate * (geometry.pump_input_transmission + geometry.intracavity_loss)
        if kappa_b <= 0:
            kappa_b = kappa_out_a + kappa_in_a + kappa_l_a
    params = CavityParams(
        kappa_out_a=kappa_out_a,
        kappa_in_a=kappa_in_a,
        kappa_l_a=kappa_l_a,
        kappa_b=kappa_b,
        kappa_in_b=kappa_in_b,
        epsilon=epsilon,
        beta=beta,
        alpha=alpha,
    )
    logger.debug(
        "Decay rates: kappa_out=%.6g kappa_in=%.6g kappa_l=%.6g rad/s (escape %.5f)",
        kappa_out_a,
        kappa_in_a,
        kappa_l_a,
        params.escape_efficiency,
    )
    return params


def denominator(params, omega, branch):
    """D±(ω) = iω + κ_a + b±·ε²α²/(2κ_b) ∓ εβ with b+ = 3, b− = 1."""
    branch = _as_branch(branch)
    omega = np.asarray(omega, dtype=float)
    if branch is Branch.PLUS:
        pump_term = 3.0
        gain = -params.pump_gain
    else:
        pump_term = 1.0
        gain = params.pump_gain
    depletion = pump_term * params.epsilon**2 * params.alpha**2 / (2.0 * params.kappa_b)
    return 1j * omega + params.kappa_a + depletion + gain


def coupling_coefficients(params, omega, branch=Branch.MINUS):
    """Coupling coefficients of every noise input for one branch."""
    branch = _as_branch(branch)
    c_s = 4.0 * params.kappa_in_a * params.kappa_out_a
    c_l = 4.0 * params.kappa_l_a * params.kappa_out_a
    c_v = np.abs(2.0 * params.kappa_out_a - denominator(params, omega, branch)) ** 2
    c_p = 4.0 * params.kappa_out_a * params.kappa_in_b * (params.epsilon / params.kappa_b) ** 2
    # detuning is a phase disturbance: it couples to the minus column only
    c_delta = 0.0 if branch is Branch.PLUS else 8.0 * params.kappa_out_a
    return CouplingCoefficients(c_s, c_l, c_v, c_p, c_delta)


def output_variance(params, noise, omega, branch):
    """
    Output quadrature variance V±(ω) relative to vacuum.

    Parameters:
    - params (CavityParams): below-threshold cavity parameters.
    - noise (NoiseInputs): input spectra.
    - omega (float or array): sideband angular frequency in rad/s.
    - branch (Branch or str): "plus" (anti-squeezed) or "minus" (squeezed).

    Raises:
    - PhysicsError: at or above threshold.
    """
    branch = _as_branch(branch)
    if params.pump_gain >= params.kappa_a:
        physics_error("Output variance is undefined at or above threshold.")
    scalar = np.ndim(omega) == 0
    omega = np.asarray(omega, dtype=float)
    frequency_hz = omega / (2.0 * np.pi)
    coefficients = coupling_coefficients(params, omega, branch)
    numerator = (
        coefficients.c_s * noise.branch_value("v_seed", branch, frequency_hz)
        + coefficients.c_l * noise.branch_value("v_loss", branch, frequency_hz)
        + coefficients.c_v * noise.branch_value("v_vac", branch, frequency_hz)
    )
    if params.alpha != 0.0:
        pump = coefficients.c_p * noise.branch_value("v_pump", branch, frequency_hz)
        detuning = coefficients.c_delta * evaluate_noise_source(noise.v_detuning, frequency_hz)
        numerator = numerator + params.alpha**2 * (pump + detuning)
    magnitude = np.abs(denominator(params, omega, branch)) ** 2
    if np.any(magnitude == 0):
        physics_error("Denominator vanishes: configuration sits on threshold.")
    variance = numerator / magnitude
    return float(variance) if scalar else variance


def _check_grid(frequency_grid):
    grid = np.atleast_1d(np.asarray(frequency_grid, dtype=float))
    if grid.ndim != 1 or grid.size == 0:
        physics_error("Frequency grid must be a non-empty 1-D sequence.")
    if grid.size > 1 and not np.all(np.diff(grid) > 0):
        physics_error("Frequency grid must be strictly increasing.")
    if np.any(grid < 0):
        physics_error("Frequency grid must be non-negative.")
    return grid


def variance_spectrum(params, noise, frequency_grid):
    """Sweep ``output_variance`` over a Hz grid; returns both branches."""
    grid = _check_grid(frequency_grid)
    omega = 2.0 * np.pi * grid
    plus = output_variance(params, noise, omega, Branch.PLUS)
    minus = output_variance(params, noise, omega, Branch.MINUS)
    return BranchSpectra(
        plus=Spectrum(grid, plus, reference_level=1.0),
        minus=Spectrum(grid, minus, reference_level=1.0),
    )


def fit_pump_gain(
    measured_antisqueezing_db,
    efficiency,
    template,
    noise=None,
    analysis_frequency=0.0,
):
    """
    Infers the parametric gain g = εβ from a measured anti-squeezing level.

    Solves η·V+(ω; g) + (1 − η) = 10^(dB/10) by bracketed root finding on
    g ∈ (0, κ_a), stopping a relative GAIN_BRACKET_MARGIN short of threshold.

    Parameters:
    - measured_antisqueezing_db (float): detected anti-squeezing, > 0 dB.
    - efficiency (float): detection efficiency applied after the cavity, in (0, 1].
    - template (CavityParams): decay rates, coupling and α to keep.
    - noise (NoiseInputs): input spectra, vacuum by default.
    - analysis_frequency (float): sideband frequency in Hz at which the level was measured.

    Raises:
    - PhysicsError: invalid inputs or unreachable anti-squeezing.
    """
    if not measured_antisqueezing_db > 0:
        physics_error("Measured anti-squeezing must be above 0 dB.")
    if not 0 < efficiency <= 1:
        physics_error(f"Efficiency must lie in (0, 1], got {efficiency!r}.")
    noise = noise or NoiseInputs()
    target = 10.0 ** (measured_antisqueezing_db / 10.0)
    omega = 2.0 * np.pi * analysis_frequency
    kappa_a = template.kappa_a

    def residual(gain):
        params = template.with_pump_gain(gain)
        detected = efficiency * output_variance(params, noise, omega, Branch.PLUS)
        return detected + (1.0 - efficiency) - target

    upper = (1.0 - GAIN_BRACKET_MARGIN) * kappa_a
    low_value = residual(0.0)
    high_value = residual(upper)
    if low_value >= 0:
        physics_error(
            f"Unreachable anti-squeezing: {measured_antisqueezing_db:g} dB is already "
            "exceeded without pump gain."
        )
    if high_value < 0:
        physics_error(
            f"Unreachable anti-squeezing: {measured_antisqueezing_db:g} dB lies above the "
            f"threshold limit at {analysis_frequency:g} Hz and efficiency {efficiency:g}."
        )
    gain = optimize.brentq(residual, 0.0, upper, xtol=1e-13 * kappa_a, rtol=1e-14)
    logger.debug("Fitted pump gain g/kappa_a = %.9f", gain / kappa_a)
    return gain

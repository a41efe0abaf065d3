"""Everything between the output coupler and the recorded variance.

Efficiency chain, homodyne quadrature selection, detector dark noise and
CMRR leakage, Stokes polarimetry and the Poincaré-ellipsoid export.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import constants

from .opo_core import BranchSpectra, Spectrum, variance_spectrum
from .utils import get_logger, physics_error


logger = get_logger(__name__)

DEFAULT_WAVELENGTH = 795e-9
DEFAULT_SATURATION_POWER = 2.5e-3


def to_db(variance):
    """10·log10(V); V must be positive."""
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0):
        physics_error("Cannot express a non-positive variance in dB.")
    result = 10.0 * np.log10(variance)
    return float(result) if result.ndim == 0 else result


def from_db(level_db):
    result = 10.0 ** (np.asarray(level_db, dtype=float) / 10.0)
    return float(result) if result.ndim == 0 else result


@dataclass(frozen=True)
class EfficiencyBudget:
    """Detection efficiency stages, each a fraction in (0, 1].

    Set ``escape_included_upstream`` when the variances already come from the
    full cavity model with intracavity loss; the escape factor is then left out
    of the total.
    """

    quantum_efficiency: float = 1.0
    escape_efficiency: float = 1.0
    propagation_efficiency: float = 1.0
    visibility: float = 1.0
    escape_included_upstream: bool = False

    def __post_init__(self):
        for name in ("quantum_efficiency", "escape_efficiency", "propagation_efficiency", "visibility"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                physics_error(f"{name} must lie in (0, 1], got {value!r}.")

    def stages(self):
        """(label, factor) rows as they enter the total."""
        rows = [("quantum efficiency", self.quantum_efficiency)]
        if not self.escape_included_upstream:
            rows.append(("escape efficiency", self.escape_efficiency))
        rows.append(("propagation efficiency", self.propagation_efficiency))
        rows.append(("visibility squared", self.visibility**2))
        return rows


def total_efficiency(budget):
    eta = 1.0
    for _, factor in budget.stages():
        eta *= factor
    return eta


def end_to_end_efficiency(budget):
    """Product of every stage, escape included even when the cavity model already carries it."""
    eta = total_efficiency(budget)
    if budget.escape_included_upstream:
        eta *= budget.escape_efficiency
    return eta


def detection_bound_db(eta):
    """Squeezing floor for infinite intracavity squeezing: 10·log10(1 − η)."""
    if not 0 < eta <= 1:
        physics_error(f"Efficiency must lie in (0, 1], got {eta!r}.")
    if eta == 1.0:
        return float("-inf")
    return 10.0 * np.log10(1.0 - eta)


def apply_loss(variance, eta):
    """Beamsplitter loss: V' = η·V + (1 − η)."""
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        physics_error("Variance must be >= 0.")
    if not 0 <= eta <= 1:
        physics_error(f"Efficiency must lie in [0, 1], got {eta!r}.")
    result = eta * variance + (1.0 - eta)
    return float(result) if result.ndim == 0 else result


def homodyne_variance(v_plus, v_minus, theta):
    """Variance at LO phase θ; θ = 0 reads the squeezed quadrature."""
    v_plus = np.asarray(v_plus, dtype=float)
    v_minus = np.asarray(v_minus, dtype=float)
    if np.any(v_minus < 0) or np.any(v_plus < v_minus):
        physics_error("Homodyne projection needs v_plus >= v_minus >= 0.")
    theta = np.asarray(theta, dtype=float)
    result = v_plus * np.sin(theta) ** 2 + v_minus * np.cos(theta) ** 2
    return float(result) if result.ndim == 0 else result


def quadrature_at_phase(x_plus, x_minus, theta):
    """Rotates two quadrature streams to the LO phase (scalar or per-sample θ)."""
    plus = getattr(x_plus, "samples", x_plus)
    minus = getattr(x_minus, "samples", x_minus)
    rotated = np.asarray(minus) * np.cos(theta) + np.asarray(plus) * np.sin(theta)
    if hasattr(x_minus, "with_samples"):
        return x_minus.with_samples(rotated)
    return rotated


def dark_noise_variance(dark_rel_db):
    return 10.0 ** (-dark_rel_db / 10.0)


def add_dark_noise(variance, dark_rel_db):
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        physics_error("Variance must be >= 0.")
    result = variance + dark_noise_variance(dark_rel_db)
    return float(result) if result.ndim == 0 else result


def subtract_dark_noise(variance, dark_rel_db):
    variance = np.asarray(variance, dtype=float)
    result = variance - dark_noise_variance(dark_rel_db)
    if np.any(result < 0):
        physics_error(
            f"Dark-noise over-subtraction: {dark_rel_db:g} dB below SNL exceeds the recorded variance."
        )
    return float(result) if result.ndim == 0 else result


def cmrr_leakage(lo_noise_db_above_snl, cmrr_db):
    """LO classical noise leaking through the balanced detector, as added variance."""
    if cmrr_db < 0:
        physics_error("CMRR must be >= 0 dB.")
    if isinstance(lo_noise_db_above_snl, Spectrum):
        leakage = cmrr_leakage(lo_noise_db_above_snl.values, cmrr_db)
        return Spectrum(lo_noise_db_above_snl.frequencies, np.atleast_1d(leakage))
    levels = np.asarray(lo_noise_db_above_snl, dtype=float)
    result = 10.0 ** ((levels - cmrr_db) / 10.0)
    return float(result) if result.ndim == 0 else result


@dataclass(frozen=True)
class DetectorModel:
    """Balanced detector: dark noise (dB below SNL), CMRR and LO technical noise.

    ``lo_classical_noise`` is a table of (frequency Hz, dB above SNL) pairs,
    interpolated in log frequency and clamped at its ends. ``pzt_pickup_db``
    is the electrical crosstalk gain (dB) of the PZT motion into the
    difference channel, ``pickup_tones`` fixed (frequency Hz, dB·Hz) lines.
    """

    dark_noise_rel_db: float = 16.0
    cmrr_db: float = 45.0
    saturation_power: float = DEFAULT_SATURATION_POWER
    lo_classical_noise: tuple = ()
    extinction_ratio: float = 3000.0
    pzt_pickup_db: Optional[float] = None
    pickup_tones: tuple = ()

    def __post_init__(self):
        if self.cmrr_db < 0:
            physics_error("CMRR must be >= 0 dB.")
        if not self.saturation_power > 0:
            physics_error("Detector saturation power must be positive.")
        if self.lo_classical_noise:
            frequencies = np.array([row[0] for row in self.lo_classical_noise], dtype=float)
            if np.any(frequencies <= 0) or np.any(np.diff(frequencies) <= 0):
                physics_error("LO classical-noise table needs positive, increasing frequencies.")

    def lo_noise_db(self, frequencies):
        frequencies = np.asarray(frequencies, dtype=float)
        if not self.lo_classical_noise:
            return np.full(frequencies.shape, -np.inf)
        table_f = np.array([row[0] for row in self.lo_classical_noise], dtype=float)
        table_db = np.array([row[1] for row in self.lo_classical_noise], dtype=float)
        log_f = np.log10(np.maximum(frequencies, table_f[0]))
        return np.interp(log_f, np.log10(table_f), table_db)

    def leakage(self, frequencies):
        return cmrr_leakage(self.lo_noise_db(frequencies), self.cmrr_db)

    @property
    def dark_variance(self):
        return dark_noise_variance(self.dark_noise_rel_db)


def detected_variances(params, noise, budget, detector, frequencies):
    """
    Detected (plus, minus) spectra: cavity output, loss chain and CMRR leakage.

    Dark noise is left out; the raw recording path adds it separately.
    """
    cavity = variance_spectrum(params, noise, frequencies)
    eta = total_efficiency(budget)
    leakage = np.atleast_1d(detector.leakage(cavity.plus.frequencies))
    plus = apply_loss(cavity.plus.values, eta) + leakage
    minus = apply_loss(cavity.minus.values, eta) + leakage
    return BranchSpectra(
        plus=Spectrum(cavity.plus.frequencies, np.atleast_1d(plus)),
        minus=Spectrum(cavity.minus.frequencies, np.atleast_1d(minus)),
    )


class StokesState(NamedTuple):
    mean_s: tuple
    var_s: tuple
    var_s_normalized: tuple
    lo_photon_flux: float


def photon_flux(power, wavelength=DEFAULT_WAVELENGTH):
    return power * wavelength / (constants.h * constants.c)


def stokes_state(lo_power, wavelength, v_plus, v_minus, theta_lock, detector=None):
    """
    Stokes means and variances for an x-polarised LO carrying a squeezed y mode.

    S1 is coherent; S2 reads the quadrature at ``theta_lock`` and S3 the
    conjugate one. Variances in photons/s are the normalised values times the
    photon flux.

    Raises:
    - PhysicsError: LO power at or above saturation, or v_plus·v_minus < 1.
    """
    detector = detector or DetectorModel()
    if lo_power < 0:
        physics_error("LO power must be >= 0.")
    if lo_power >= detector.saturation_power:
        physics_error(
            f"LO power {lo_power * 1e3:.3g} mW exceeds the homodyne detector saturation "
            f"limit of {detector.saturation_power * 1e3:.3g} mW."
        )
    if v_plus < 0 or v_minus < 0 or v_plus * v_minus < 1.0 - 1e-12:
        physics_error(
            f"Quadrature variances {v_minus:.6g}/{v_plus:.6g} violate the uncertainty relation."
        )
    flux = photon_flux(lo_power, wavelength)
    v_s2 = v_plus * np.sin(theta_lock) ** 2 + v_minus * np.cos(theta_lock) ** 2
    v_s3 = v_plus * np.cos(theta_lock) ** 2 + v_minus * np.sin(theta_lock) ** 2
    normalized = (1.0, float(v_s2), float(v_s3))
    return StokesState(
        mean_s=(flux, 0.0, 0.0),
        var_s=tuple(flux * value for value in normalized),
        var_s_normalized=normalized,
        lo_photon_flux=flux,
    )


def polarimeter_signal(x_pol, y_pol, lo_amplitude):
    """Linearised S2 difference photocurrent: 2·A·y."""
    if x_pol.sample_rate != y_pol.sample_rate:
        physics_error("Polarimeter inputs must share one sample rate.")
    if len(x_pol) != len(y_pol):
        physics_error("Polarimeter inputs must have equal length.")
    return y_pol.with_samples(2.0 * lo_amplitude * y_pol.samples)


def poincare_ellipsoid(state, normalized=True):
    """
    Centre and semi-axes of the noise ellipsoid in the S1/S2/S3 frame.

    Normalised output is in shot-noise units: the centre is divided by √N so
    the semi-axes are √V of the normalised variances.
    """
    if normalized:
        scale = np.sqrt(state.lo_photon_flux)
        center = [value / scale if scale > 0 else 0.0 for value in state.mean_s]
        semi_axes = [float(np.sqrt(value)) for value in state.var_s_normalized]
    else:
        center = list(state.mean_s)
        semi_axes = [float(np.sqrt(value)) for value in state.var_s]
    return {
        "center": [float(value) for value in center],
        "semi_axes": semi_axes,
        "normalized": bool(normalized),
    }

"""Scenario files: JSON schema, loading, defaults and conversion to run objects.

A scenario file may be partial; it is validated on its own, merged over the
shipped ``scenarios/default.json`` and validated again before anything is
built. Frequencies in the file are laboratory frequencies.
"""

import copy
import hashlib
import json
import os
from dataclasses import dataclass, replace
from importlib import resources

import jsonschema

from .detection_chain import DetectorModel, EfficiencyBudget, from_db, total_efficiency
from .dsp import LockInConfig, PidConfig, SpectrumAnalyzerConfig, ZeroSpanConfig
from .noise_lock import ANALYZER_PRESETS, MODES, SCAN_PRESETS, LockScenario, ScanSettings
from .opo_core import CavityGeometry, NoiseInputs, Spectrum, decay_rates_from_geometry, fit_pump_gain
from .stochastic_sim import DisturbanceModel, PztResonance
from .utils import ScenarioError, get_logger, handle_errors, validate_path


logger = get_logger(__name__)

DEFAULT_SCENARIO_RESOURCE = "default.json"
ENV_SEED = "SQUEEZELAB_SEED"
ENV_OUTPUT_DIR = "SQUEEZELAB_OUTPUT_DIR"

_NUMBER = {"type": "number"}
_NON_NEGATIVE = {"type": "number", "minimum": 0}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_FRACTION = {"type": "number", "minimum": 0, "exclusiveMaximum": 1}
_UNIT_FRACTION = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_OPTIONAL_NUMBER = {"type": ["number", "null"]}
_PAIR = {"type": "array", "items": _NUMBER, "minItems": 2, "maxItems": 2}
_TABLE_SPECTRUM = {
    "type": "object",
    "additionalProperties": False,
    "required": ["frequencies", "values"],
    "properties": {
        "frequencies": {"type": "array", "items": _NON_NEGATIVE, "minItems": 1},
        "values": {"type": "array", "items": _NON_NEGATIVE, "minItems": 1},
    },
}
_NOISE_SOURCE = {"oneOf": [_NON_NEGATIVE, _TABLE_SPECTRUM]}
_NOISE_PAIR = {"type": "array", "items": _NOISE_SOURCE, "minItems": 2, "maxItems": 2}


def _section(properties):
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": properties,
    }


SCENARIO_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "squeezelab scenario",
    **_section(
        {
            "cavity": _section(
                {
                    "round_trip_length": _POSITIVE,
                    "output_coupler_transmission": _FRACTION,
                    "input_coupler_transmission": _FRACTION,
                    "intracavity_loss": _FRACTION,
                    "pump_input_transmission": _FRACTION,
                    "kappa_b": {"type": ["number", "null"], "exclusiveMinimum": 0},
                    "epsilon": _NON_NEGATIVE,
                    "alpha": _NUMBER,
                    "pump_gain_fraction": {"type": ["number", "null"], "minimum": 0},
                    "measured_antisqueezing_db": _OPTIONAL_NUMBER,
                    "fit_frequency": _NON_NEGATIVE,
                }
            ),
            "noise_inputs": _section(
                {
                    "v_seed": _NOISE_PAIR,
                    "v_loss": _NOISE_PAIR,
                    "v_vac": _NOISE_PAIR,
                    "v_pump": _NOISE_PAIR,
                    "v_detuning": _NOISE_SOURCE,
                }
            ),
            "budget": _section(
                {
                    "quantum_efficiency": _UNIT_FRACTION,
                    "escape_efficiency": _UNIT_FRACTION,
                    "propagation_efficiency": _UNIT_FRACTION,
                    "visibility": _UNIT_FRACTION,
                    "escape_included_upstream": {"type": "boolean"},
                }
            ),
            "detector": _section(
                {
                    "dark_noise_rel_db": _NUMBER,
                    "cmrr_db": _NON_NEGATIVE,
                    "saturation_power": _POSITIVE,
                    "lo_power": _NON_NEGATIVE,
                    "wavelength": _POSITIVE,
                    "lo_classical_noise": {"type": "array", "items": _PAIR},
                    "extinction_ratio": _POSITIVE,
                    "pzt_pickup_db": _OPTIONAL_NUMBER,
                    "pickup_tones": {"type": "array", "items": _PAIR},
                }
            ),
            "disturbance": _section(
                {
                    "linear_drift": _NUMBER,
                    "random_walk_diffusion": _NON_NEGATIVE,
                    "sinusoids": {
                        "type": "array",
                        "items": {"type": "array", "items": _NUMBER, "minItems": 3, "maxItems": 3},
                    },
                    "pzt_resonance": _section(
                        {
                            "frequency": _POSITIVE,
                            "quality_factor": _POSITIVE,
                            "gain": _NUMBER,
                            "quadratic": _NUMBER,
                        }
                    ),
                    "drive_noise": _NON_NEGATIVE,
                }
            ),
            "instrument": _section(
                {
                    "zero_span": _section(
                        {
                            "center_frequency": _POSITIVE,
                            "rbw": _POSITIVE,
                            "vbw": _POSITIVE,
                            "sweep_time": _POSITIVE,
                        }
                    ),
                    "lock_in": _section(
                        {
                            "mod_frequency": _POSITIVE,
                            "mod_amplitude": _NON_NEGATIVE,
                            "demod_phase": _OPTIONAL_NUMBER,
                            "output_lpf_cutoff": _POSITIVE,
                        }
                    ),
                    "pid": _section(
                        {
                            "kp": _NUMBER,
                            "ki": _NUMBER,
                            "kd": _NUMBER,
                            "output_limits": _PAIR,
                            "sign": {"enum": [1, -1]},
                        }
                    ),
                    "analyzer": _section(
                        {
                            "preset": {"enum": sorted(ANALYZER_PRESETS) + [None]},
                            "rbw": _POSITIVE,
                            "averages": {"type": "integer", "minimum": 1},
                            "fmin": _NON_NEGATIVE,
                            "fmax": _POSITIVE,
                        }
                    ),
                    "scan": _section(
                        {
                            "preset": {"enum": sorted(SCAN_PRESETS) + [None]},
                            "center_frequency": _POSITIVE,
                            "rbw": _POSITIVE,
                            "vbw": _POSITIVE,
                            "ramp_rate": _NUMBER,
                            "duration": _POSITIVE,
                            "settle_time": {"type": ["number", "null"], "minimum": 0},
                        }
                    ),
                }
            ),
            "run": _section(
                {
                    "mode": {"enum": list(MODES)},
                    "duration": _POSITIVE,
                    "seed": {"type": "integer", "minimum": 0},
                    "scale_factor": _POSITIVE,
                    "sample_rate": _POSITIVE,
                    "decimation": {"type": "integer", "minimum": 1},
                    "control_block": {"type": "integer", "minimum": 1},
                    "initial_phase": _NUMBER,
                    "capture_window": _POSITIVE,
                    "output_dir": {"type": "string"},
                    "quadrature_override_db": {"oneOf": [{"type": "null"}, _PAIR]},
                }
            ),
        }
    ),
}


def _field_path(error):
    path = "/".join(str(part) for part in error.absolute_path)
    return path or "<root>"


def validate_document(data, source="scenario"):
    """Schema check; raises ScenarioError naming the offending field."""
    validator = jsonschema.Draft7Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda error: list(error.absolute_path))
    if errors:
        first = errors[0]
        handle_errors(
            f"{source}: field '{_field_path(first)}': {first.message}",
            error_cls=ScenarioError,
        )


def _merge(base, override):
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def default_document():
    text = resources.files("squeezelab.scenarios").joinpath(DEFAULT_SCENARIO_RESOURCE).read_text(
        encoding="utf-8"
    )
    return json.loads(text)


def canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def scenario_hash(data):
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def _noise_source(value):
    if isinstance(value, dict):
        return Spectrum(value["frequencies"], value["values"])
    return float(value)


def _noise_inputs(section):
    return NoiseInputs(
        v_seed=tuple(_noise_source(item) for item in section["v_seed"]),
        v_loss=tuple(_noise_source(item) for item in section["v_loss"]),
        v_vac=tuple(_noise_source(item) for item in section["v_vac"]),
        v_pump=tuple(_noise_source(item) for item in section["v_pump"]),
        v_detuning=_noise_source(section["v_detuning"]),
    )


@dataclass(frozen=True)
class Scenario:
    """A validated scenario document and the objects built from it."""

    data: dict
    geometry: CavityGeometry
    params: object
    noise: NoiseInputs
    budget: EfficiencyBudget
    detector: DetectorModel
    lock: LockScenario
    lo_power: float
    wavelength: float
    measured_antisqueezing_db: object
    fit_frequency: float
    source: str = "<default>"

    @property
    def seed(self):
        return self.lock.seed

    @property
    def scale_factor(self):
        return self.lock.scale_factor

    @property
    def output_dir(self):
        return self.data["run"]["output_dir"]

    @property
    def hash(self):
        return scenario_hash(self.data)

    def with_overrides(self, **run_overrides):
        """Rebuild with ``run`` section fields replaced (seed, scale_factor, mode, ...)."""
        updates = {key: value for key, value in run_overrides.items() if value is not None}
        if not updates:
            return self
        return scenario_from_dict(_merge(self.data, {"run": updates}), source=self.source)

    def with_document(self, override):
        return scenario_from_dict(_merge(self.data, override), source=self.source)


def _pump_gain(template, cavity, budget, noise):
    fraction = cavity["pump_gain_fraction"]
    measured = cavity["measured_antisqueezing_db"]
    # an explicit gain wins over fitting to a measured level
    if fraction is not None:
        return fraction * template.kappa_a
    if measured is not None:
        return fit_pump_gain(
            measured,
            total_efficiency(budget),
            template,
            noise=noise,
            analysis_frequency=cavity["fit_frequency"],
        )
    return 0.0


def _scan_settings(section, scale):
    preset = SCAN_PRESETS[section["preset"]] if section.get("preset") else None
    center = section.get("center_frequency", preset.center_frequency if preset else None)
    rbw = section.get("rbw", preset.rbw if preset else None)
    vbw = section.get("vbw", preset.vbw if preset else None)
    if None in (center, rbw, vbw):
        handle_errors(
            "instrument/scan: give a 'preset' or all of center_frequency, rbw and vbw.",
            error_cls=ScenarioError,
        )
    return ScanSettings(
        zero_span=ZeroSpanConfig(center, rbw, vbw).scaled(scale),
        ramp_rate=section["ramp_rate"],
        duration=section["duration"],
        settle_time=section.get("settle_time"),
    )


def _analyzer_settings(section):
    fields = {key: value for key, value in section.items() if key != "preset"}
    if section.get("preset"):
        return replace(ANALYZER_PRESETS[section["preset"]], **fields)
    return SpectrumAnalyzerConfig(**fields)


def scenario_from_dict(data, source="<dict>"):
    """
    Validates a scenario document and builds every run object.

    Parameters:
    - data (dict): full or partial scenario document.
    - source (str): label used in diagnostics.

    Raises:
    - ScenarioError: schema violations.
    - PhysicsError: physical invariants violated by the values.
    """
    validate_document(data, source)
    document = _merge(default_document(), data)
    validate_document(document, source)

    cavity = document["cavity"]
    geometry = CavityGeometry(
        round_trip_length=cavity["round_trip_length"],
        output_coupler_transmission=cavity["output_coupler_transmission"],
        input_coupler_transmission=cavity["input_coupler_transmission"],
        intracavity_loss=cavity["intracavity_loss"],
        pump_input_transmission=cavity["pump_input_transmission"],
    )
    budget = EfficiencyBudget(**document["budget"])
    noise = _noise_inputs(document["noise_inputs"])
    template = decay_rates_from_geometry(
        geometry,
        epsilon=cavity["epsilon"],
        alpha=cavity["alpha"],
        kappa_b=cavity["kappa_b"],
    )
    params = template.with_pump_gain(_pump_gain(template, cavity, budget, noise))

    detector_section = document["detector"]
    detector = DetectorModel(
        dark_noise_rel_db=detector_section["dark_noise_rel_db"],
        cmrr_db=detector_section["cmrr_db"],
        saturation_power=detector_section["saturation_power"],
        lo_classical_noise=tuple(tuple(row) for row in detector_section["lo_classical_noise"]),
        extinction_ratio=detector_section["extinction_ratio"],
        pzt_pickup_db=detector_section["pzt_pickup_db"],
        pickup_tones=tuple(tuple(row) for row in detector_section["pickup_tones"]),
    )

    run = document["run"]
    scale = run["scale_factor"]
    instrument = document["instrument"]
    disturbance_section = document["disturbance"]
    resonance = disturbance_section["pzt_resonance"]
    disturbance = DisturbanceModel(
        linear_drift=disturbance_section["linear_drift"],
        random_walk_diffusion=disturbance_section["random_walk_diffusion"],
        sinusoids=tuple(
            (frequency / scale, amplitude, phase)
            for frequency, amplitude, phase in disturbance_section["sinusoids"]
        ),
        pzt_resonance=PztResonance(
            frequency=resonance["frequency"] / scale,
            quality_factor=resonance["quality_factor"],
            gain=resonance["gain"],
            quadratic=resonance["quadratic"],
        ),
    )
    pid_section = instrument["pid"]
    override = run["quadrature_override_db"]
    lock = LockScenario(
        params=params,
        noise=noise,
        budget=budget,
        detector=detector,
        disturbance=disturbance,
        zero_span=ZeroSpanConfig(**instrument["zero_span"]).scaled(scale),
        lock_in=LockInConfig(**instrument["lock_in"]).scaled(scale),
        pid=PidConfig(
            kp=pid_section["kp"],
            ki=pid_section["ki"],
            kd=pid_section["kd"],
            output_limits=tuple(pid_section["output_limits"]),
            sign=pid_section["sign"],
        ),
        duration=run["duration"],
        seed=run["seed"],
        mode=run["mode"],
        sample_rate=run["sample_rate"],
        decimation=run["decimation"],
        control_block=run["control_block"],
        scale_factor=scale,
        initial_phase=run["initial_phase"],
        capture_window=run["capture_window"],
        pzt_drive_noise=disturbance_section["drive_noise"],
        analyzer=_analyzer_settings(instrument["analyzer"]),
        scan=_scan_settings(instrument["scan"], scale),
        quadrature_override=None if override is None else (from_db(override[0]), from_db(override[1])),
    )
    logger.debug(
        "Scenario %s: g/kappa_a = %.6f, scale %g, mode %s",
        source,
        params.threshold_fraction,
        scale,
        lock.mode,
    )
    return Scenario(
        data=document,
        geometry=geometry,
        params=params,
        noise=noise,
        budget=budget,
        detector=detector,
        lock=lock,
        lo_power=detector_section["lo_power"],
        wavelength=detector_section["wavelength"],
        measured_antisqueezing_db=cavity["measured_antisqueezing_db"],
        fit_frequency=cavity["fit_frequency"],
        source=source,
    )


def load_scenario(path=None):
    """Loads a scenario file, or the shipped default when ``path`` is None."""
    if path is None:
        return scenario_from_dict({}, source="<default>")
    path = validate_path(path, "Scenario file", is_dir=False)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as error:
        handle_errors(
            f"{path}: invalid JSON at line {error.lineno}, column {error.colno}: {error.msg}",
            error_cls=ScenarioError,
        )
    except OSError as error:
        handle_errors(f"Cannot read scenario file {path}: {error}", error_cls=ScenarioError)
    if not isinstance(data, dict):
        handle_errors(f"{path}: scenario must be a JSON object.", error_cls=ScenarioError)
    return scenario_from_dict(data, source=os.path.basename(path))


def write_default_scenario(path):
    """Writes the shipped default scenario for editing."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(default_document(), handle, indent=2, sort_keys=False)
        handle.write("\n")
    logger.info("Default scenario written to %s", path)
    return path


def env_seed():
    """Seed from SQUEEZELAB_SEED, or None."""
    value = os.environ.get(ENV_SEED)
    if value in (None, ""):
        return None
    try:
        seed = int(value)
    except ValueError:
        handle_errors(f"{ENV_SEED} must be an integer, got {value!r}.", error_cls=ScenarioError)
    if seed < 0:
        handle_errors(f"{ENV_SEED} must be >= 0.", error_cls=ScenarioError)
    return seed

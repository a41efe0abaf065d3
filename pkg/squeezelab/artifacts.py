"""CSV, JSON and manifest writers for run artifacts.

Numbers are written with 12 significant digits and nothing time-dependent
is recorded, so a rerun with the same scenario and seed reproduces every
file byte for byte.
"""

import json
import math
import os
import platform

import numpy as np
import scipy

from . import __version__
from .utils import get_logger


logger = get_logger(__name__)

NUMBER_FORMAT = "%.12g"
MANIFEST_NAME = "manifest.json"


def format_number(value):
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return NUMBER_FORMAT % value


def _ensure_parent(path):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)


def write_table_csv(path, header, columns):
    """Writes equal-length columns under a header row."""
    columns = [np.asarray(column, dtype=float) for column in columns]
    lengths = {column.size for column in columns}
    if len(lengths) > 1:
        raise ValueError(f"CSV columns differ in length: {sorted(lengths)}")
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(",".join(header) + "\n")
        for row in zip(*columns):
            handle.write(",".join(format_number(value) for value in row) + "\n")
    logger.debug("Wrote %s (%d rows)", path, next(iter(lengths), 0))
    return path


def _db(values, reference=1.0):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(values, dtype=float) / reference)


def write_spectrum_csv(spectrum, path):
    return write_table_csv(
        path,
        ("frequency_hz", "value", "value_db_rel_snl"),
        (spectrum.frequencies, spectrum.values, _db(spectrum.values, spectrum.reference_level)),
    )


def write_timeseries_csv(series, path, stride=1):
    times = series.times()[::stride]
    return write_table_csv(path, ("time_s", "value"), (times, series.samples[::stride]))


def write_variance_csv(path, frequencies, v_minus, v_plus):
    """Detected spectrum table: frequency_hz,v_minus,v_plus,v_minus_db,v_plus_db."""
    return write_table_csv(
        path,
        ("frequency_hz", "v_minus", "v_plus", "v_minus_db", "v_plus_db"),
        (frequencies, v_minus, v_plus, _db(v_minus), _db(v_plus)),
    )


def write_traces_csv(path, frequencies, traces):
    """One dB column per named trace on a shared frequency axis; a missing trace is nan."""
    frequencies = np.asarray(frequencies, dtype=float)
    header = ["frequency_hz"] + [f"{name}_db" for name in traces]
    columns = [frequencies]
    for spectrum in traces.values():
        if spectrum is None:
            columns.append(np.full(frequencies.shape, np.nan))
        else:
            columns.append(_db(spectrum.values, spectrum.reference_level))
    return write_table_csv(path, header, columns)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(item) for item in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isfinite(value):
            return float(format_number(value))
        return format_number(value)
    return value


def write_json(path, data):
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(_jsonable(data), handle, indent=2, sort_keys=True)
        handle.write("\n")
    logger.debug("Wrote %s", path)
    return path


def versions():
    return {
        "squeezelab": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def write_manifest(directory, scenario, command, files):
    """Records scenario hash, seed, scale factor, versions and the files produced."""
    manifest = {
        "command": command,
        "scenario_source": scenario.source,
        "scenario_sha256": scenario.hash,
        "seed": scenario.seed,
        "scale_factor": scenario.scale_factor,
        "versions": versions(),
        "files": sorted(os.path.basename(path) for path in files),
    }
    return write_json(os.path.join(directory, MANIFEST_NAME), manifest)

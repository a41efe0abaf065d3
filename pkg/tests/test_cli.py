import json

import pytest

from squeezelab.cli import build_parser, main
from squeezelab.scenario import ENV_OUTPUT_DIR, ENV_SEED
from squeezelab.utils import EXIT_LOCK_FAILURE, EXIT_OK, EXIT_PHYSICS, EXIT_SCHEMA


def write_scenario(tmp_path, document, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(document), encoding="utf-8")
    return str(path)


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_parser_requires_exactly_one_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--budget", "--scan"])


def test_budget_prints_stages_and_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["--budget", "--no-animation", "-o", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "total detection efficiency" in printed
    assert "lab measured -5.6 dB" in printed
    report = read_json(out / "budget.json")
    assert report["detection_bound_db"] < 0
    assert 0 < report["fitted_gain_fraction"] < 0.9
    assert read_json(out / "manifest.json")["command"] == "budget"


def test_budget_with_measured_antisqueezing_flag(tmp_path):
    out = tmp_path / "out"
    assert main(["--budget", "-o", str(out), "--measured-antisqueezing", "5.0"]) == EXIT_OK
    assert read_json(out / "budget.json")["measured_antisqueezing_db"] == 5.0


def test_budget_restores_escape_stage_in_detection_bound(tmp_path):
    out = tmp_path / "out"
    assert main(["--budget", "-o", str(out)]) == EXIT_OK
    report = read_json(out / "budget.json")
    assert report["escape_included_upstream"] is True
    assert report["post_cavity_efficiency"] == pytest.approx(0.9349, abs=1e-3)
    assert report["total_efficiency"] == pytest.approx(0.903, abs=1e-3)
    assert report["detection_bound_db"] == pytest.approx(-10.14, abs=0.02)
    assert report["predicted_squeezing_db"] == pytest.approx(-5.8, abs=0.1)


def test_traces_flag_is_parsed():
    args = build_parser().parse_args(["--lock", "--traces"])
    assert args.traces
    assert not build_parser().parse_args(["--lock"]).traces


def test_spectrum_csv_and_byte_identical_reruns(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for directory in (first, second):
        assert main(["--spectrum", "-o", str(directory), "--points", "5"]) == EXIT_OK
    lines = (first / "spectrum.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "frequency_hz,v_minus,v_plus,v_minus_db,v_plus_db"
    assert len(lines) == 6
    for name in ("spectrum.csv", "manifest.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_unpumped_spectrum_is_shot_noise(tmp_path):
    scenario = write_scenario(
        tmp_path,
        {
            "cavity": {"pump_gain_fraction": 0.0, "measured_antisqueezing_db": None},
            "detector": {"lo_classical_noise": []},
        },
    )
    out = tmp_path / "out"
    assert main(["--spectrum", scenario, "-o", str(out), "--points", "3"]) == EXIT_OK
    for line in (out / "spectrum.csv").read_text(encoding="utf-8").splitlines()[1:]:
        _, v_minus, v_plus, v_minus_db, v_plus_db = (float(value) for value in line.split(","))
        assert v_minus == pytest.approx(1.0)
        assert v_plus == pytest.approx(1.0)
        assert abs(v_minus_db) < 1e-9


def test_bad_spectrum_grid_exits_with_schema_code(tmp_path):
    assert main(["--spectrum", "-o", str(tmp_path), "--fmin", "10", "--fmax", "1"]) == EXIT_SCHEMA


def test_schema_violation_exit_code(tmp_path):
    scenario = write_scenario(tmp_path, {"run": {"seed": "one"}})
    assert main(["--budget", scenario, "-o", str(tmp_path / "out")]) == EXIT_SCHEMA


def test_physics_violation_exit_code(tmp_path):
    scenario = write_scenario(tmp_path, {"cavity": {"pump_gain_fraction": 1.5}})
    assert main(["--budget", scenario, "-o", str(tmp_path / "out")]) == EXIT_PHYSICS


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_SEED, "7")
    assert main(["--spectrum", "-o", str(tmp_path / "env"), "--points", "2"]) == EXIT_OK
    assert read_json(tmp_path / "env" / "manifest.json")["seed"] == 7
    assert main(["--spectrum", "-o", str(tmp_path / "cli"), "--points", "2", "--seed", "9"]) == EXIT_OK
    assert read_json(tmp_path / "cli" / "manifest.json")["seed"] == 9


def test_output_directory_from_environment(tmp_path, monkeypatch):
    target = tmp_path / "from-env"
    monkeypatch.setenv(ENV_OUTPUT_DIR, str(target))
    assert main(["--spectrum", "--points", "2"]) == EXIT_OK
    assert (target / "spectrum.csv").exists()


def test_poincare_for_coherent_override(tmp_path):
    scenario = write_scenario(tmp_path, {"run": {"quadrature_override_db": [0.0, 0.0]}})
    out = tmp_path / "out"
    assert main(["--poincare", scenario, "-o", str(out)]) == EXIT_OK
    record = read_json(out / "poincare.json")
    assert record["semi_axes"] == pytest.approx([1.0, 1.0, 1.0])
    assert record["normalized"] is True


def test_poincare_rejects_saturating_lo(tmp_path):
    scenario = write_scenario(tmp_path, {"detector": {"lo_power": 0.003}})
    assert main(["--poincare", scenario, "-o", str(tmp_path / "out")]) == EXIT_PHYSICS


def test_lock_without_asymmetry_exits_with_lock_failure(tmp_path):
    scenario = write_scenario(
        tmp_path, {"run": {"quadrature_override_db": [0.0, 0.0], "duration": 0.1}}
    )
    out = tmp_path / "out"
    assert main(["--lock", scenario, "-o", str(out), "--no-animation"]) == EXIT_LOCK_FAILURE
    summary = read_json(out / "lock_summary.json")
    assert summary["verdict"] == "never"
    assert (out / "phase_trajectory.csv").exists()
    assert read_json(out / "manifest.json")["command"] == "lock"


def test_init_writes_default_scenario(tmp_path):
    path = tmp_path / "my_scenario.json"
    assert main(["--init", str(path)]) == EXIT_OK
    assert read_json(path)["run"]["seed"] == 1


def test_save_and_load_config(tmp_path):
    config = tmp_path / "config.json"
    out = tmp_path / "out"
    assert main(["--spectrum", "--points", "4", "-o", str(out), "--save-config", str(config)]) == EXIT_OK
    assert read_json(config)["points"] == 4
    assert not out.exists()
    assert main(["--spectrum", "--load-config", str(config)]) == EXIT_OK
    assert len((out / "spectrum.csv").read_text(encoding="utf-8").splitlines()) == 5


@pytest.mark.slow
def test_validate_command_passes(capsys):
    assert main(["--validate", "--no-animation"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out


@pytest.mark.slow
def test_lock_traces_csv_has_three_columns(tmp_path):
    scenario = write_scenario(tmp_path, {"run": {"duration": 1.0}})
    out = tmp_path / "out"
    assert main(["--lock", scenario, "--traces", "--no-animation", "-o", str(out)]) == EXIT_OK
    lines = (out / "locked_traces.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "frequency_hz,antisqueeze_db,shot_noise_db,squeeze_db"
    assert "locked_traces.csv" in json.dumps(read_json(out / "manifest.json"))

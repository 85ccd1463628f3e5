import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from stagdid.cli import EXIT_CONFIG, EXIT_DATA, EXIT_IO, OUTPUT_ENV, RunConfig, main
from stagdid.estimators import CallawaySantAnna
from stagdid.io import EVENT_HEADER, GTATT_HEADER, sha256_file
from stagdid.simlab import REFERENCE_TAU, ScenarioSpec, gen_panel

SCENARIO = {"n_per_cohort": {"2": 30, "3": 40}, "n_never": 80, "T": 4, "seed": 7, "noise_sd": 0.0,
            "assignment": "fixed", "tau": {f"{g},{t}": v for (g, t), v in REFERENCE_TAU.items()}}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def simulated(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", _write(tmp_path / "scen.json", SCENARIO), "-o", str(out)]) == 0
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_noiseless_run_recovers_injected_effects(simulated, tmp_path):
    out = tmp_path / "run"
    code = main(["run", str(simulated / "panel.csv"), "--covariates", "x1", "--bootstrap", "0", "-o", str(out)])
    assert code == 0
    rows = _rows(out / "gtatt.csv")
    assert list(rows[0]) == list(GTATT_HEADER)
    post = {(int(r["g"]), int(r["t"])): float(r["estimate"]) for r in rows if int(r["e"]) >= 0}
    assert set(post) == set(REFERENCE_TAU)
    for k, v in REFERENCE_TAU.items():
        assert post[k] == pytest.approx(v, abs=1e-8)
    placebo = [float(r["estimate"]) for r in rows if int(r["e"]) < 0]
    assert placebo and np.allclose(placebo, 0.0, atol=1e-8)
    for name in ("eventstudy.csv", "aggregates.json", "sensitivity.json", "run_manifest.json"):
        assert (out / name).exists()


def test_csv_round_trip_matches_in_process_fit(simulated, tmp_path):
    spec = ScenarioSpec.from_dict(dict(SCENARIO, noise_sd=1.0, seed=3))
    _write(tmp_path / "noisy.json", spec.to_dict())
    sim = tmp_path / "noisy"
    main(["simulate", str(tmp_path / "noisy.json"), "-o", str(sim)])
    out = tmp_path / "run"
    main(["run", str(sim / "panel.csv"), "--covariates", "x1", "--bootstrap", "0", "-o", str(out)])
    panel, _ = gen_panel(spec)
    model = CallawaySantAnna(covariates=["x1"]).fit(panel)
    rows = {(int(r["g"]), int(r["t"])): r for r in _rows(out / "gtatt.csv")}
    assert len(rows) == len(model.cells_)
    for c in model.cells_:
        r = rows[(c.g, c.t)]
        assert float(r["estimate"]) == pytest.approx(c.estimate, abs=1e-12)
        assert float(r["se"]) == pytest.approx(c.se, abs=1e-12)
    aggs = json.loads((out / "aggregates.json").read_text())
    assert aggs["overall"]["estimate"] == pytest.approx(model.att_, abs=1e-12)


def _run_twice(src, tmp_path, extra):
    outs = []
    for i, more in enumerate(extra):
        out = tmp_path / f"rep{i}"
        args = ["run", str(src), "--covariates", "x1", "--bootstrap", "100", "--seed", "11", "-o", str(out)]
        assert main(args + more) == 0
        outs.append(out)
    return outs


def test_repeated_runs_are_byte_identical(simulated, tmp_path):
    a, b = _run_twice(simulated / "panel.csv", tmp_path, [[], []])
    for name in ("gtatt.csv", "eventstudy.csv", "aggregates.json", "sensitivity.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma = json.loads((a / "run_manifest.json").read_text())
    mb = json.loads((b / "run_manifest.json").read_text())
    ma.pop("created_at"), mb.pop("created_at")
    ma["config"].pop("output_dir"), mb["config"].pop("output_dir")
    assert ma == mb
    assert ma["input_sha256"] == sha256_file(simulated / "panel.csv")
    assert ma["seed"] == 11


def test_event_study_file_layout(simulated, tmp_path):
    out = tmp_path / "run"
    main(["run", str(simulated / "panel.csv"), "--bootstrap", "0", "-o", str(out)])
    rows = _rows(out / "eventstudy.csv")
    assert list(rows[0]) == list(EVENT_HEADER)
    assert [int(r["e"]) for r in rows] == [-1, 0, 1, 2]


def test_missing_covariate_column(simulated, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", str(simulated / "panel.csv"), "--covariates", "income", "--bootstrap", "0",
                 "-o", str(out)])
    assert code == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["code"] == "CONFIG_UNKNOWN_COLUMN"
    assert json.loads((out / "error.json").read_text())["code"] == "CONFIG_UNKNOWN_COLUMN"


def test_bootstrap_without_seed(simulated, tmp_path, capsys):
    assert main(["run", str(simulated / "panel.csv"), "-o", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "CONFIG_MISSING_SEED" in capsys.readouterr().err


def test_data_and_io_errors(simulated, tmp_path, capsys):
    lines = (simulated / "panel.csv").read_text().splitlines()
    broken = tmp_path / "unbalanced.csv"
    broken.write_text("\n".join(lines[:-1]) + "\n")
    assert main(["run", str(broken), "--bootstrap", "0", "-o", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["run", str(tmp_path / "nope.csv"), "--bootstrap", "0", "-o", str(tmp_path / "o")]) == EXIT_IO
    codes = [json.loads(ln)["code"] for ln in capsys.readouterr().err.strip().splitlines()]
    assert codes[1] == "IO_READ_FAILED"


def test_config_file_and_flag_precedence(simulated, tmp_path):
    cfg = _write(tmp_path / "cfg.json", {"input": str(simulated / "panel.csv"), "n_bootstrap": 0,
                                         "flavor": "ipw", "covariates": ["x1"], "formats": ["csv"]})
    out = tmp_path / "o"
    assert main(["run", "--config", cfg, "--flavor", "or", "-o", str(out)]) == 0
    assert {r["flavor"] for r in _rows(out / "gtatt.csv")} == {"or"}
    assert not (out / "aggregates.json").exists()
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["flavor"] == "or" and manifest["config"]["covariates"] == ["x1"]


@pytest.mark.parametrize("cfg, code", [({"input": "x.csv", "bootstrap_reps": 3}, "CONFIG_UNKNOWN_KEY"),
                                       ({"n_bootstrap": 0}, "CONFIG_MISSING_INPUT"),
                                       ({"input": "x.csv", "n_bootstrap": 50, "seed": 1}, "CONFIG_BAD_VALUE"),
                                       ({"input": "x.csv", "control_group": "not_yet"}, "CONFIG_BAD_VALUE")])
def test_config_errors(tmp_path, capsys, cfg, code):
    assert main(["run", "--config", _write(tmp_path / "c.json", cfg), "-o", str(tmp_path)]) == EXIT_CONFIG
    assert json.loads(capsys.readouterr().err.strip())["code"] == code


def test_bad_json_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["run", "--config", str(tmp_path / "c.json"), "-o", str(tmp_path)]) == EXIT_CONFIG
    assert "CONFIG_PARSE_ERROR" in capsys.readouterr().err


def test_squared_term_request(simulated, tmp_path):
    out = tmp_path / "o"
    assert main(["run", str(simulated / "panel.csv"), "--covariates", "x1", "--square", "x1", "--bootstrap", "0",
                 "-o", str(out)]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["square"] == ["x1"]
    cfg = RunConfig(input="p.csv", covariates=["x1"], square=["x1"], n_bootstrap=0)
    assert cfg.all_covariates == ["x1", "x1_sq"]


def test_validate_prints_summary(simulated, capsys):
    assert main(["validate", str(simulated / "panel.csv")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_units"] == 150 and summary["T"] == 4
    assert summary["cohort_sizes"] == {"2": 30, "3": 40, "never": 80}


def test_output_dir_from_environment(simulated, tmp_path, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv(OUTPUT_ENV, str(target))
    assert main(["sensitivity", str(simulated / "panel.csv"), "--bootstrap", "0"]) == 0
    report = json.loads((target / "sensitivity.json").read_text())
    assert set(report) == {"trend_comparison", "robust_intervals"}
    assert not (target / "gtatt.csv").exists()


def test_twfe_output(simulated, tmp_path):
    out = tmp_path / "o"
    assert main(["run", str(simulated / "panel.csv"), "--bootstrap", "0", "--twfe", "-o", str(out)]) == 0
    rec = json.loads((out / "twfe.json").read_text())
    assert rec["n_units"] == 150 and "warning" in rec["metadata"]


def test_simulate_two_by_two(tmp_path):
    scen = _write(tmp_path / "s.json", {"n_per_cohort": {"2": 5}, "n_never": 5, "T": 2})
    assert main(["simulate", scen, "--seed", "1", "-o", str(tmp_path / "a")]) == 0
    assert main(["simulate", scen, "--seed", "1", "-o", str(tmp_path / "b")]) == 0
    rows = _rows(tmp_path / "a" / "panel.csv")
    assert len(rows) == 20 and {r["period"] for r in rows} == {"1", "2"}
    assert {r["cohort"] for r in rows} == {"2", "never"}
    assert sha256_file(tmp_path / "a" / "panel.csv") == sha256_file(tmp_path / "b" / "panel.csv")
    truth = json.loads((tmp_path / "a" / "truth.json").read_text())
    assert truth["tau"] == [{"g": 2, "t": 2, "tau": 0.0}]


def test_simulate_needs_seed(tmp_path, capsys):
    scen = _write(tmp_path / "s.json", {"n_per_cohort": {"2": 5}, "n_never": 5, "T": 2})
    assert main(["simulate", scen, "-o", str(tmp_path / "a")]) == EXIT_CONFIG
    assert "CONFIG_MISSING_SEED" in capsys.readouterr().err


def test_simulate_reference_shape(tmp_path):
    scen = _write(tmp_path / "s.json", {"n_per_cohort": {"2": 41, "3": 135}, "n_never": 6221, "T": 4, "seed": 0,
                                        "assignment": "fixed"})
    assert main(["simulate", scen, "-o", str(tmp_path / "a")]) == 0
    with open(tmp_path / "a" / "panel.csv") as fh:
        assert sum(1 for _ in fh) == 1 + 6397 * 4


def test_module_entry_point(simulated):
    proc = subprocess.run([sys.executable, "-m", "stagdid.cli", "validate", str(simulated / "panel.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["T"] == 4


def test_blank_cohort_is_a_data_error(simulated, tmp_path, capsys):
    lines = (simulated / "panel.csv").read_text().splitlines()
    never = [i for i, ln in enumerate(lines) if ln.split(",")[3] == "never"]
    unit = lines[never[0]].split(",")[0]
    blanked = [",".join(p if j != 3 else "" for j, p in enumerate(ln.split(",")))
               if ln.split(",")[0] == unit and i > 0 else ln for i, ln in enumerate(lines)]
    src = tmp_path / "blank.csv"
    src.write_text("\n".join(blanked) + "\n")
    assert main(["run", str(src), "--bootstrap", "0", "-o", str(tmp_path / "o")]) == EXIT_DATA
    assert json.loads(capsys.readouterr().err.strip())["code"] == "MISSING_VALUE"

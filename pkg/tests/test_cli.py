"""End-to-end exercises of the command line interface.

Every test drives ``isdm.cli.main`` in process with a throwaway config
tree and checks exit codes, emitted files, and the one-line JSON error
records printed to stderr.
"""

import copy
import json
import os

import pytest
from conftest import CLI_BOUNDARY, CLI_CONFIG, write_cli_tree

from isdm.cli import main

_CONFIG = CLI_CONFIG

_SIM_FILES = ("sim/po.csv", "sim/counts.csv", "sim/occ.csv", "sim/reg.geojson", "sim/truth.json")


def _write_json(path, payload):
    path.write_text(json.dumps(payload))


def _write_variant(root, name, **changes):
    """Write a sibling config so relative paths resolve to the shared tree."""
    cfg = copy.deepcopy(_CONFIG)
    for key, value in changes.items():
        if value is None:
            cfg.pop(key, None)
        else:
            cfg[key] = value
    path = root / name
    _write_json(path, cfg)
    return str(path)


def _error_record(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert err, "expected a JSON error record on stderr"
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = str(write_cli_tree(root))
    assert main(["mesh", "--config", cfg]) == 0
    assert main(["simulate", "--config", cfg]) == 0
    assert main(["fit", "--config", cfg]) == 0
    return root


@pytest.fixture()
def minimal_dir(tmp_path):
    _write_json(tmp_path / "boundary.geojson", CLI_BOUNDARY)
    return tmp_path


def _minimal_config(root, **extra):
    cfg = {"domain": {"boundary": "boundary.geojson", "max_edge": 0.3, "mesh_path": "mesh.json"}}
    cfg.update(extra)
    path = root / "config.json"
    _write_json(path, cfg)
    return str(path)


# ---------------------------------------------------------------- mesh


def test_mesh_uses_cache_on_second_run(workspace, capsys):
    cfg = str(workspace / "config.json")
    assert (workspace / "mesh.json").is_file()
    assert main(["mesh", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "mesh:" in out and "vertices" in out
    assert "area ok" in out
    assert "cache hit:" in out


def test_mesh_rebuilds_when_resolution_changes(minimal_dir, capsys):
    cfg = _minimal_config(minimal_dir)
    assert main(["mesh", "--config", cfg]) == 0
    assert "written:" in capsys.readouterr().out

    _minimal_config(minimal_dir)  # same settings, cached artifact matches
    assert main(["mesh", "--config", cfg]) == 0
    assert "cache hit:" in capsys.readouterr().out

    payload = json.loads((minimal_dir / "config.json").read_text())
    payload["domain"]["max_edge"] = 0.25
    _write_json(minimal_dir / "config.json", payload)
    assert main(["mesh", "--config", cfg]) == 0
    assert "written:" in capsys.readouterr().out


# ------------------------------------------------------------ simulate


def test_simulate_writes_every_dataset(workspace):
    for rel in _SIM_FILES:
        assert (workspace / rel).is_file(), rel
    truth = json.loads((workspace / "sim/truth.json").read_text())
    assert truth["seed"] == 11
    assert truth["parameters"]["alpha[proc]"] == 4.5
    assert truth["parameters"]["beta[x]"] == 1.2
    assert set(truth["field"]) == {"log_tau", "log_kappa"}
    assert truth["expected_points"] > 0
    assert set(truth["datasets"]) == {"po", "counts", "occ", "reg"}


def test_simulate_is_byte_deterministic(workspace, capsys):
    cfg = str(workspace / "config.json")
    before = {rel: (workspace / rel).read_bytes() for rel in _SIM_FILES}
    assert main(["simulate", "--config", cfg]) == 0
    assert "simulated 4 dataset(s)" in capsys.readouterr().out
    for rel in _SIM_FILES:
        assert (workspace / rel).read_bytes() == before[rel], rel


# ----------------------------------------------------------------- fit


def test_fit_summary_contents(workspace):
    summary = json.loads((workspace / "fit.json").read_text())
    assert summary["command"] == "fit"
    assert summary["converged"] is True
    assert summary["se_status"] == "ok"
    assert summary["gradient_norm"] < 1e-3
    assert len(summary["layout_names"]) == len(summary["parameter_values"])
    for name in ("alpha[proc]", "beta[x]", "bias[po:intercept]", "bias[po:x]"):
        assert name in summary["estimates"]
        assert summary["standard_errors"][name] > 0
    for block in ("data[po]", "data[counts]", "data[occ]", "data[reg]"):
        assert block in summary["decomposition"]
    assert summary["mesh"]["n_vertices"] > 50


def test_fit_reports_per_dataset_loglik(workspace, capsys):
    cfg = str(workspace / "config.json")
    assert main(["fit", "--config", cfg]) == 0
    out = capsys.readouterr().out
    for ds in ("po", "counts", "occ", "reg"):
        assert "loglik data[%s]" % ds in out
    assert "converged:" in out


def test_fit_exit_4_when_iteration_capped(workspace, capsys):
    cfg = _write_variant(
        workspace,
        "config_stop.json",
        optimizer={"max_iterations": 1},
        fit={**copy.deepcopy(_CONFIG["fit"]), "output": "fit_stop.json"},
    )
    assert main(["fit", "--config", cfg]) == 4
    assert "NOT CONVERGED" in capsys.readouterr().out
    summary = json.loads((workspace / "fit_stop.json").read_text())
    assert summary["converged"] is False
    assert summary["message"]


def test_fit_accepts_empty_presence_only_file(workspace):
    (workspace / "empty_po.csv").write_text("x,y\n")
    cfg = _write_variant(
        workspace,
        "config_empty.json",
        fit={
            "output": "fit_empty.json",
            "datasets": [
                {
                    "id": "po",
                    "kind": "presence_only",
                    "path": "empty_po.csv",
                    "intercept_key": "proc",
                    "covariates": ["x"],
                }
            ],
        },
    )
    assert main(["fit", "--config", cfg]) == 0
    summary = json.loads((workspace / "fit_empty.json").read_text())
    assert summary["converged"] is True
    # zero observed points drives the intensity far below one event per unit area
    assert summary["estimates"]["alpha[proc]"] < -2.0


# ------------------------------------------------------------- predict


def test_predict_writes_grid(workspace, capsys):
    cfg = str(workspace / "config.json")
    assert main(["predict", "--config", cfg]) == 0
    assert "predictions: 400 point(s)" in capsys.readouterr().out
    lines = (workspace / "pred.csv").read_text().splitlines()
    assert lines[0] == "x,y,mean,se"
    assert len(lines) == 401
    for line in lines[1:]:
        x, y, mean, se = line.split(",")
        assert 0.0 <= float(x) <= 1.0 and 0.0 <= float(y) <= 1.0
        assert float(se) > 0.0


def test_predict_echoes_points_and_drops_outside(workspace, capsys):
    (workspace / "pts.csv").write_text("x,y\n0.50,0.250\n1.5,0.5\n")
    cfg = _write_variant(
        workspace,
        "config_pts.json",
        predict={"fit_summary": "fit.json", "output": "pred_pts.csv", "points": "pts.csv"},
    )
    assert main(["predict", "--config", cfg]) == 0
    captured = capsys.readouterr()
    assert "dropped 1" in captured.err
    lines = (workspace / "pred_pts.csv").read_text().splitlines()
    assert len(lines) == 2
    # input coordinate strings are echoed verbatim, not reformatted
    assert lines[1].startswith("0.50,0.250,")


def test_predict_requires_block(minimal_dir, capsys):
    cfg = _minimal_config(minimal_dir)
    assert main(["predict", "--config", cfg]) == 2
    record = _error_record(capsys)
    assert record["error"] == "config"
    assert "predict" in record["message"]


def test_predict_rejects_stale_fit_summary(workspace, capsys):
    summary = json.loads((workspace / "fit.json").read_text())
    summary["layout_names"] = summary["layout_names"][:-1]
    summary["parameter_values"] = summary["parameter_values"][:-1]
    _write_json(workspace / "fit_stale.json", summary)
    cfg = _write_variant(
        workspace,
        "config_stale.json",
        predict={"fit_summary": "fit_stale.json", "output": "pred_stale.csv", "resolution": 5},
    )
    assert main(["predict", "--config", cfg]) == 3
    record = _error_record(capsys)
    assert record["error"] == "data"
    assert "layout" in record["message"]


# --------------------------------------------------------------- score


def test_score_reports_bias_and_coverage(workspace, capsys):
    cfg = str(workspace / "config.json")
    assert main(["score", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "alpha[proc]: estimate" in out
    report = json.loads((workspace / "score.json").read_text())
    assert report["n_parameters"] == 2
    assert set(report["parameters"]) == {"alpha[proc]", "beta[x]"}
    assert report["parameters"]["alpha[proc]"]["truth"] == 4.5
    assert report["mean_abs_bias"] >= 0.0
    assert 0.0 <= report["coverage_fraction"] <= 1.0
    assert report["z_threshold"] == pytest.approx(1.96)


def test_score_without_output_prints_json(workspace, capsys):
    cfg = _write_variant(
        workspace,
        "config_score_stdout.json",
        score={"truth": "sim/truth.json", "fit_summary": "fit.json"},
    )
    assert main(["score", "--config", cfg]) == 0
    out = capsys.readouterr().out
    payload = json.loads(out[out.index("{"):])
    assert "mean_abs_bias" in payload


def test_score_rejects_unknown_truth_parameter(workspace, capsys):
    _write_json(workspace / "truth_bogus.json", {"parameters": {"beta[zz]": 1.0}})
    cfg = _write_variant(
        workspace,
        "config_score_bogus.json",
        score={"truth": "truth_bogus.json", "fit_summary": "fit.json"},
    )
    assert main(["score", "--config", cfg]) == 3
    record = _error_record(capsys)
    assert record["error"] == "data"
    assert "beta[zz]" in record["message"]


# ------------------------------------------------------------ validate


def test_validate_reports_each_block(workspace, capsys):
    cfg = str(workspace / "config.json")
    assert main(["validate", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "mesh ok:" in out
    assert "fit block ok: 4 dataset(s)" in out
    assert "simulate block ok" in out
    assert out.rstrip().endswith("config ok")


# -------------------------------------------------- config-level errors


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert main(["mesh", "--config", str(tmp_path / "nope.json")]) == 2
    record = _error_record(capsys)
    assert record["error"] == "config"
    assert record["type"] == "ConfigError"


def test_unparseable_config_exits_2(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{")
    assert main(["mesh", "--config", str(path)]) == 2
    assert _error_record(capsys)["error"] == "config"


def test_schema_violation_names_the_path(minimal_dir, capsys):
    payload = {"domain": {"boundary": "boundary.geojson", "max_edge": "big"}}
    _write_json(minimal_dir / "config.json", payload)
    assert main(["mesh", "--config", str(minimal_dir / "config.json")]) == 2
    record = _error_record(capsys)
    assert "config invalid at domain/max_edge" in record["message"]


def test_unknown_top_level_key_exits_2(minimal_dir, capsys):
    cfg = _minimal_config(minimal_dir, surprise=1)
    assert main(["mesh", "--config", cfg]) == 2
    record = _error_record(capsys)
    assert "config invalid at <root>" in record["message"]
    assert "surprise" in record["message"]


def test_threads_must_be_positive(minimal_dir, capsys):
    cfg = _minimal_config(minimal_dir)
    assert main(["--threads", "0", "mesh", "--config", cfg]) == 2
    assert "--threads" in _error_record(capsys)["message"]


def test_threads_exported_to_blas_env(minimal_dir, monkeypatch):
    monkeypatch.setenv("OMP_NUM_THREADS", "1")
    monkeypatch.setenv("OPENBLAS_NUM_THREADS", "1")
    cfg = _minimal_config(minimal_dir)
    assert main(["--threads", "2", "validate", "--config", cfg]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "2"
    assert os.environ["OPENBLAS_NUM_THREADS"] == "2"


# ---------------------------------------------------- data-level errors


def test_malformed_csv_cell_reports_row(minimal_dir, capsys):
    (minimal_dir / "bad_counts.csv").write_text(
        "x,y,count,duration\n0.2,0.2,3,1\n0.4,0.6,1,2\n0.5,0.5,notanumber,1\n"
    )
    cfg = _minimal_config(
        minimal_dir,
        covariates=[{"name": "x", "source": "coordinate", "axis": "x"}],
        fit={
            "output": "fit.json",
            "datasets": [
                {"id": "cnt", "kind": "counts", "path": "bad_counts.csv", "covariates": ["x"]}
            ],
        },
    )
    assert main(["fit", "--config", cfg]) == 3
    record = _error_record(capsys)
    assert record["error"] == "data"
    assert record["row"] == 4
    assert record["path"].endswith("bad_counts.csv")
    assert "not an integer" in record["message"]


def test_missing_data_file_exits_3(minimal_dir, capsys):
    cfg = _minimal_config(
        minimal_dir,
        fit={
            "output": "fit.json",
            "datasets": [{"id": "cnt", "kind": "counts", "path": "ghost.csv"}],
        },
    )
    assert main(["fit", "--config", cfg]) == 3
    assert _error_record(capsys)["error"] == "data"


def test_out_of_domain_site_exits_3(minimal_dir, capsys):
    (minimal_dir / "far.csv").write_text("x,y,count\n2.0,0.5,3\n")
    cfg = _minimal_config(
        minimal_dir,
        fit={
            "output": "fit.json",
            "datasets": [{"id": "cnt", "kind": "counts", "path": "far.csv"}],
        },
    )
    assert main(["fit", "--config", cfg]) == 3
    assert _error_record(capsys)["type"] == "OutsideDomainError"


# ------------------------------------------------------------- plumbing


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert capsys.readouterr().out.startswith("isdm ")


def test_unknown_command_rejected():
    with pytest.raises(SystemExit) as excinfo:
        main(["frobnicate", "--config", "x.json"])
    assert excinfo.value.code == 2

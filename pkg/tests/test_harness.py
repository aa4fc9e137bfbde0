import hashlib
import json

import numpy as np
import pytest

from sdgt import __version__
from sdgt.checks import check
from sdgt.diagnostics import CSV_COLUMNS, records_from_csv
from sdgt.harness import (
    ExperimentSpec,
    PlotError,
    SpecError,
    emit_plot,
    plot_from_spec,
    run_experiment,
)
from sdgt.presets import PRESETS, fig5_specs


def tiny(**over):
    doc = {
        "name": "tiny",
        "problem": {"kind": "least_squares", "rng_seed": 1, "d": 8, "samples_per_client": 10, "omega": 0.5},
        "topology": {"n": 6, "S": 2, "seed": 2},
        "algorithms": {"SD-GT": {"gamma": 0.05, "T": 6}, "SD-FedAvg": {"gamma": 0.05, "T": 6}},
        "sweep": {"K": [1, 3], "sample_rate": [0.5, 1.0], "seed": [0]},
    }
    doc.update(over)
    return doc


def hashes(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def test_spec_validation_errors():
    with pytest.raises(SpecError, match="empty"):
        ExperimentSpec.from_dict(tiny(sweep={}))
    with pytest.raises(SpecError, match="empty"):
        ExperimentSpec.from_dict(tiny(sweep={"K": []}))
    with pytest.raises(SpecError, match="divisible"):
        ExperimentSpec.from_dict(tiny(topology={"n": 7, "S": 2, "seed": 0}))
    with pytest.raises(SpecError, match="seed"):
        ExperimentSpec.from_dict(tiny(topology={"n": 6, "S": 2}))
    with pytest.raises(SpecError, match="rng_seed"):
        ExperimentSpec.from_dict(tiny(problem={"kind": "ls"}))
    with pytest.raises(SpecError, match="unknown algorithm"):
        ExperimentSpec.from_dict(tiny(algorithms={"FedProx": {}}))
    with pytest.raises(SpecError, match="unknown run settings"):
        ExperimentSpec.from_dict(tiny(algorithms={"SD-GT": {"lr": 0.1}}))
    with pytest.raises(SpecError, match="unknown sweep axis"):
        ExperimentSpec.from_dict(tiny(sweep={"gamma": [0.1]}))
    with pytest.raises(SpecError, match="clients"):
        ExperimentSpec.from_dict(tiny(problem={"kind": "ls", "rng_seed": 0, "n": 30}))
    with pytest.raises(SpecError, match="missing"):
        ExperimentSpec.from_dict({"name": "x"})
    with pytest.raises(SpecError):
        ExperimentSpec.from_dict(tiny(sweep={"sample_rate": [1.5]}))


def test_spec_hash_ignores_output_dir():
    a = ExperimentSpec.from_dict(tiny(output_dir="a"))
    b = ExperimentSpec.from_dict(tiny(output_dir="b"))
    c = ExperimentSpec.from_dict(tiny(sweep={"K": [2]}))
    assert a.sha256() == b.sha256() != c.sha256()


def test_yaml_and_json_specs(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps(tiny()))
    assert ExperimentSpec.load(tmp_path / "s.json").jobs() == ExperimentSpec.from_dict(tiny()).jobs()
    (tmp_path / "s.yaml").write_text("name: y\nproblem: {kind: ls, rng_seed: 0, n: 6, d: 4}\n"
                                     "topology: {n: 6, S: 3, seed: 0}\nalgorithms: [SD-GT]\nsweep: {seed: [0, 1]}\n")
    spec = ExperimentSpec.load(tmp_path / "s.yaml")
    assert [j.filename for j in spec.jobs()] == ["SD-GT_K10_sr1_seed0.csv", "SD-GT_K10_sr1_seed1.csv"]


def test_run_experiment_outputs(tmp_path):
    spec = ExperimentSpec.from_dict(tiny())
    manifest_path = run_experiment(spec, output_dir=tmp_path)
    out = tmp_path / "tiny"
    assert manifest_path == out / "manifest.json"
    names = sorted(p.name for p in out.glob("*.csv"))
    assert names == sorted(f"{a}_K{K}_sr{r}_seed0.csv" for a in ("SD-GT", "SD-FedAvg")
                           for K in (1, 3) for r in ("0.5", "1"))
    manifest = json.loads(manifest_path.read_text())
    assert manifest["spec_sha256"] == spec.sha256()
    assert manifest["code_version"] == __version__
    assert len(manifest["runs"]) == 8
    for entry in manifest["runs"]:
        recs = records_from_csv((out / entry["file"]).read_text())
        assert len(recs) == 6 and not entry["diverged"]
        assert entry["final"]["loss"] == recs[-1].loss
        assert set(entry["final"]) == set(CSV_COLUMNS)
    assert not list(out.glob(".*"))  # no temp files left behind


def test_rerun_and_parallel_are_bit_identical(tmp_path):
    spec = ExperimentSpec.from_dict(tiny())
    run_experiment(spec, output_dir=tmp_path / "a")
    run_experiment(spec, output_dir=tmp_path / "b")
    run_experiment(spec, output_dir=tmp_path / "c", workers=2)
    assert hashes(tmp_path / "a" / "tiny") == hashes(tmp_path / "b" / "tiny") == hashes(tmp_path / "c" / "tiny")


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SDGT_OUTPUT_DIR", str(tmp_path / "env"))
    run_experiment(ExperimentSpec.from_dict(tiny(sweep={"K": [1]}, output_dir=str(tmp_path / "spec"))))
    assert (tmp_path / "env" / "tiny" / "manifest.json").exists()
    assert not (tmp_path / "spec").exists()


def test_diverged_run_is_flagged_and_others_proceed(tmp_path):
    spec = ExperimentSpec.from_dict(tiny(
        algorithms={"SD-GT": {"gamma": 50.0, "T": 40}, "SD-FedAvg": {"gamma": 0.05, "T": 5}},
        sweep={"K": [2]}))
    manifest = json.loads(run_experiment(spec, output_dir=tmp_path).read_text())
    runs = {r["algorithm"]: r for r in manifest["runs"]}
    assert runs["SD-GT"]["diverged"] and 0 <= runs["SD-GT"]["rounds"] < 40
    assert not runs["SD-FedAvg"]["diverged"] and runs["SD-FedAvg"]["rounds"] == 5
    partial = (tmp_path / "tiny" / runs["SD-GT"]["file"]).read_text()
    assert partial.splitlines()[0] == ",".join(CSV_COLUMNS)


def test_presets_validate():
    fig4 = ExperimentSpec.from_dict(PRESETS["fig4-like"])
    assert {j.algorithm for j in fig4.jobs()} == {"SD-GT", "SD-FedAvg", "SCAFFOLD"}
    assert len(fig4.jobs()) == 9 and {j.K for j in fig4.jobs()} == {40}
    fig3 = ExperimentSpec.from_dict(PRESETS["fig3-like"])
    assert {j.K for j in fig3.jobs()} == {3, 10} and {j.sample_rate for j in fig3.jobs()} == {0.4}
    fig5 = fig5_specs()
    assert set(fig5) == {"fig5-like-delta1", "fig5-like-delta0.001"}
    for entry in fig5.values():
        assert entry["naive"]["K"] == 1 and entry["naive"]["h"] == [5] * 6
        assert all(1 <= e <= 100 for e in entry["coopt"]["E"])


def _write_csv(path, rows):
    path.write_text(",".join(CSV_COLUMNS) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


def test_emit_plot(tmp_path):
    a = _write_csv(tmp_path / "a.csv", [[t, 1.0, 1.0, 10.0 ** -t, 0, 0, 0, 0, 2.0 * t, 0] for t in range(1, 6)])
    b = _write_csv(tmp_path / "b.csv", [[t, 1.0, 1.0, 0.5 ** t, 0, 0, 0, 0, 3.0 * t, 0] for t in range(1, 6)])
    svg = emit_plot([a, b], tmp_path / "plot.svg", labels=["fast", "slow"])
    text = svg.read_text()
    assert text.lstrip().startswith("<?xml") and "<svg" in text
    assert "fast" in text and "slow" in text and "dist_to_opt_sq" in text
    first = svg.read_bytes()
    emit_plot([a, b], tmp_path / "plot.svg", labels=["fast", "slow"])
    assert svg.read_bytes() == first
    emit_plot([a], tmp_path / "cost.svg", x="comm_cost_cum", log_y=False)
    assert "communication cost" in (tmp_path / "cost.svg").read_text()


def test_emit_plot_errors(tmp_path):
    a = _write_csv(tmp_path / "a.csv", [[1, 1.0, 1.0, 1.0, 0, 0, 0, 0, 1.0, 0]])
    with pytest.raises(PlotError, match="accuracy"):
        emit_plot([a], tmp_path / "x.svg", metric="accuracy")
    empty = _write_csv(tmp_path / "e.csv", [])
    with pytest.raises(PlotError, match="no data"):
        emit_plot([empty], tmp_path / "y.svg")
    (tmp_path / "z.csv").write_text("")
    with pytest.raises(PlotError, match="empty"):
        emit_plot([tmp_path / "z.csv"], tmp_path / "z.svg")
    assert not list(tmp_path.glob("*.svg")) and not list(tmp_path.glob(".*"))
    with pytest.raises(PlotError):
        emit_plot([], tmp_path / "w.svg")


def test_plot_from_spec(tmp_path):
    spec = ExperimentSpec.from_dict(tiny(sweep={"K": [1], "sample_rate": [0.5, 1.0]}))
    run_experiment(spec, output_dir=tmp_path)
    out = plot_from_spec({"csv": ["tiny/SD-GT_*.csv"], "output": "p.svg", "metric": "loss"}, base_dir=tmp_path)
    assert out.exists() and out.read_text().count("SD-GT_K1") >= 2
    with pytest.raises(PlotError):
        plot_from_spec({"csv": ["nothing*.csv"], "output": "q.svg"}, base_dir=tmp_path)


def test_check_suites():
    lines = []
    results = check("reductions", out=lines.append)
    assert all(r.passed for r in results) and len(results) == 2
    assert lines[-1] == "reductions: 2/2 passed"
    assert all(line.startswith("PASS") for line in lines[:-1])
    with pytest.raises(ValueError):
        check("speed")


def test_invariant_and_oracle_suites_pass():
    for suite in ("invariants", "oracles"):
        assert all(r.passed for r in check(suite, out=None)), suite

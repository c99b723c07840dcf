import json
import subprocess
import sys

import numpy as np
import pytest

from iofeedback.cli import (
    DEFAULT_CONFIG,
    EXIT_OK,
    EXIT_SYNTHESIS,
    EXIT_VALIDATION,
    Pipeline,
    attempt_seed,
    config_hash,
    load_config,
    main,
)
from iofeedback.experiments import load_matrices
from iofeedback.synthesis import SynthesisResult


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synthesized(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synthesize", "--out", out) == EXIT_OK
    return out


def test_collect_writes_files(tmp_path):
    assert run("collect", "--out", tmp_path) == EXIT_OK
    data = tmp_path / "data"
    csvs = sorted(data.glob("experiment_*.csv"))
    assert len(csvs) == 7
    assert (data / "manifest.json").exists() and (data / "matrices.json").exists()
    first = {p.name: p.read_bytes() for p in data.iterdir()}
    assert run("collect", "--out", tmp_path) == EXIT_OK
    assert first == {p.name: p.read_bytes() for p in data.iterdir()}


def test_collect_rejects_bad_N(tmp_path, capsys):
    assert run("collect", "--out", tmp_path, "--N", 0) == EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_synthesize_default(synthesized):
    res = SynthesisResult.load(synthesized / "result.json")
    assert res.optimal and res.diagnostics["spectral_radius_M"] < 1
    payload = json.loads((synthesized / "result.json").read_text())
    assert payload["config_hash"] == config_hash(DEFAULT_CONFIG)


def test_synthesize_from_collected_data(tmp_path):
    assert run("collect", "--out", tmp_path) == EXIT_OK
    assert run("synthesize", "--out", tmp_path, "--data", tmp_path / "data", "--dump-program") == EXIT_OK
    prog = json.loads((tmp_path / "program.json").read_text())
    assert prog and (tmp_path / "result.json").exists()


def test_synthesize_rank_deficient(tmp_path, capsys):
    with pytest.warns(UserWarning):
        code = run("synthesize", "--out", tmp_path, "--T", 2, "--retries", 2)
    assert code == EXIT_SYNTHESIS
    assert "rank" in capsys.readouterr().err
    failure = json.loads((tmp_path / "synthesis_failure.json").read_text())
    assert len(failure["attempts"]) == 2
    assert failure["attempts"][1]["seed"] == attempt_seed(20231, 1)


def test_attempt_seed():
    assert attempt_seed(5, 0) == 5
    assert attempt_seed(5, 1) == attempt_seed(5, 1) != attempt_seed(5, 2)


@pytest.mark.parametrize("x0, verdict", [((0.0, 0.0), "converged"), ((0.1, 0.0), "converged"),
                                         ((1e6, 1e6), "diverged")])
def test_simulate(synthesized, tmp_path, x0, verdict):
    assert run("simulate", "--out", tmp_path, "--result", synthesized / "result.json", "--x0", *x0) == EXIT_OK
    v = json.loads((tmp_path / "verdict.json").read_text())
    assert v["verdict"] == verdict
    if verdict == "converged":
        assert v["window_consistency_error"] == 0.0
    assert (tmp_path / "trace.csv").read_text().startswith("# config_hash: ")


def test_simulate_wrong_dimension(synthesized, tmp_path):
    assert run("simulate", "--out", tmp_path, "--result", synthesized / "result.json", "--x0", 0.1) == EXIT_VALIDATION


def test_roa_small_grid(synthesized, tmp_path):
    assert run("roa", "--out", tmp_path, "--result", synthesized / "result.json", "--grid", -0.5, 0.5, 5) == EXIT_OK
    s = json.loads((tmp_path / "roa_summary.json").read_text())
    assert s["n_points"] == 25 and sum(s["counts"].values()) == 25
    assert s["counts"]["converged"] > 0
    assert s["gamma"]["value"] > 0 and s["certified_starts_converged"]
    assert len((tmp_path / "roa_grid.csv").read_text().splitlines()) == 2 + 25


def test_roa_single_point(synthesized, tmp_path):
    assert run("roa", "--out", tmp_path, "--result", synthesized / "result.json", "--grid", 0, 0, 1) == EXIT_OK
    assert json.loads((tmp_path / "roa_summary.json").read_text())["n_points"] == 1


def test_roa_zero_count(synthesized, tmp_path):
    assert run("roa", "--out", tmp_path, "--result", synthesized / "result.json", "--grid", -1, 1, 0) == EXIT_VALIDATION


def test_pipeline_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("pipeline", "--out", out, "--grid", -0.5, 0.5, 3) == EXIT_OK
    ma, mb = load_matrices(a / "data" / "matrices.json"), load_matrices(b / "data" / "matrices.json")
    for name in ("Y0", "V0", "Y1", "V1", "Q0", "U0"):
        assert np.allclose(getattr(ma, name), getattr(mb, name), atol=1e-9)
    ra, rb = SynthesisResult.load(a / "result.json"), SynthesisResult.load(b / "result.json")
    assert np.allclose(ra.kappa, rb.kappa, atol=1e-9)
    h = json.loads((a / "result.json").read_text())["config_hash"]
    assert h != config_hash(DEFAULT_CONFIG)  # the grid override is part of the hash
    for path in a.rglob("*"):
        if path.is_file():
            assert h in path.read_text(), path.name


def test_toml_config(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'output_dir = "{tmp_path / "out"}"\n[experiment]\nT = 10\nseed = 3\n')
    loaded = load_config(str(cfg))
    assert loaded["experiment"]["T"] == 10 and loaded["plant"] == DEFAULT_CONFIG["plant"]
    assert run("synthesize", "--config", cfg) == EXIT_OK
    assert SynthesisResult.load(tmp_path / "out" / "result.json").optimal


def test_invalid_configs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"experiment": {"init_box": {"lower": [0.0], "upper": [1.0]}}}))
    assert run("collect", "--config", bad, "--out", tmp_path) == EXIT_VALIDATION
    bad.write_text("{not json")
    assert run("collect", "--config", bad, "--out", tmp_path) == EXIT_VALIDATION
    assert run("collect", "--config", tmp_path / "missing.json") == EXIT_VALIDATION
    with pytest.raises(ValueError):
        Pipeline({**DEFAULT_CONFIG, "sdp": {**DEFAULT_CONFIG["sdp"], "eps": 0.0}})


def test_config_hash_ignores_output_dir():
    other = {**DEFAULT_CONFIG, "output_dir": "elsewhere"}
    assert config_hash(other) == config_hash(DEFAULT_CONFIG)
    changed = {**DEFAULT_CONFIG, "dictionary": "linear"}
    assert config_hash(changed) != config_hash(DEFAULT_CONFIG)


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "iofeedback", "collect", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "7 experiment files" in out.stdout

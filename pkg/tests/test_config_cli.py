import csv
import json

import pytest

from coopt.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, GAMMA_BINS, main
from coopt.config import ConfigError, build_config, default_document, load_config

TINY = {
    "problem": {
        "name": "tiny-beam", "size": [16, 4, 4], "dims": [8, 2, 2], "volume_fraction": 0.4,
        "supports": [{"region": {"lo": [0, 0, 0], "hi": [0, 4, 4]}, "axes": "xyz"}],
        "loads": [{"region": {"lo": [16, 0, 0], "hi": [16, 4, 4]}, "force_kN": [0, 0, -0.05]}],
    },
    "network": {"hidden_layer_count": 2, "hidden_width": 8},
    "optimizer": {"max_iterations": 3, "seed": 2},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def optimize(cfg_path, out, *extra):
    return main(["optimize", "--config", str(cfg_path), "--out", str(out), *extra])


def test_volume_fraction_error_names_the_field():
    with pytest.raises(ConfigError) as exc:
        build_config(default_document(), ["problem.volume_fraction=1.5"])
    assert "problem.volume_fraction" in str(exc.value)


def test_all_errors_reported_together():
    with pytest.raises(ConfigError) as exc:
        build_config({"optimizer": {"p_bar": -1, "min_lr": 5.0}, "limits": {"t_min": 2, "t_max": 1}})
    text = str(exc.value)
    for key in ("p_bar", "min_lr", "t_min"):
        assert key in text


def test_overrides_parse_json_values():
    cfg = build_config(default_document(), ["optimizer.max_iterations=7", "optimizer.mode=3axis",
                                            "limits.K_lc=0.2"])
    assert cfg.optimizer.max_iterations == 7
    assert cfg.optimizer.mode.value == "3axis"
    assert cfg.problem.limits.K_lc == 0.2
    with pytest.raises(ConfigError):
        build_config({}, ["nosection.key=1"])


def test_bad_config_exit_code(tmp_path, capsys):
    code = main(["optimize", "--problem", "mbb-desk", "--set", "problem.volume_fraction=1.5",
                 "--out", str(tmp_path / "r")])
    assert code == EXIT_CONFIG
    assert "problem.volume_fraction" in capsys.readouterr().err


def test_missing_checkpoint_is_an_input_error(tmp_path, capsys):
    assert main(["slice", str(tmp_path / "nowhere")]) == EXIT_CONFIG
    run = tmp_path / "run"
    run.mkdir()
    (run / "config.json").write_text(json.dumps(TINY))
    assert main(["verify", str(run)]) == EXIT_CONFIG
    assert "final.fields" in capsys.readouterr().err


def test_rigid_body_supports_rejected_as_config_error(tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    doc["problem"]["supports"][0]["axes"] = "x"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert optimize(path, tmp_path / "r") == EXIT_CONFIG
    assert "rigid-body" in capsys.readouterr().err


def test_solver_failure_exits_numeric_and_keeps_checkpoint(tiny_config, tmp_path, monkeypatch):
    import coopt.optimizer as optimizer
    from coopt.fea import FEAError

    real = optimizer.structural_response
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] > 2:
            raise FEAError("factorization failed", residual=1.0)
        return real(*a, **kw)

    monkeypatch.setattr(optimizer, "structural_response", flaky)
    run = tmp_path / "r"
    assert optimize(tiny_config, run) == EXIT_NUMERIC
    manifest = json.loads((run / "manifest.json").read_text())
    assert "failure" in manifest and "checkpoint.fields" in manifest["files"]
    assert (run / "checkpoint.fields").exists()


def test_optimize_slice_verify_report_roundtrip(tiny_config, tmp_path):
    run = tmp_path / "run"
    assert optimize(tiny_config, run) == EXIT_OK
    for name in ("config.json", "config.resolved.json", "convergence.csv", "final.fields", "summary.json"):
        assert (run / name).exists()
    summary = json.loads((run / "summary.json").read_text())
    assert summary["iterations"] == 3
    # the stored config reproduces the run's settings
    assert load_config(run / "config.json").optimizer.seed == 2

    assert main(["slice", str(run), "--resolution", "32", "--spacing", "0.5"]) == EXIT_OK
    layers = json.loads((run / "layers" / "layers.json").read_text())
    assert layers["layer_count"] == len(layers["layers"])
    assert main(["verify", str(run), "--load-scale", "gamma"]) == EXIT_OK
    verify = json.loads((run / "verify" / "verify.json").read_text())
    assert verify["max_gamma_solid"] == pytest.approx(1.0, rel=1e-6)

    manifest = json.loads((run / "manifest.json").read_text())
    for f in manifest["files"]:
        assert (run / f).exists(), f
    assert {"optimize", "layers", "verify"} <= set(manifest)

    rep = tmp_path / "report"
    assert main(["report", str(run), "--out", str(rep)]) == EXIT_OK
    rows = list(csv.DictReader(open(rep / "histograms.csv")))
    # every layer vertex lands in exactly one bin of each histogram
    vertices = sum(l["vertices"] for l in layers["layers"])
    for q in ("thickness", "K_max", "K_f"):
        assert sum(int(r["count"]) for r in rows if r["quantity"] == q) == vertices
    g = list(csv.DictReader(open(rep / "gamma_histogram.csv")))
    assert len(g) == len(GAMMA_BINS) - 1
    table = list(csv.DictReader(open(rep / "summary.csv")))
    assert sum(int(r["count"]) for r in g) == int(table[0]["solid_elements"])
    conv = list(csv.DictReader(open(rep / "convergence.csv")))
    assert len(conv) == 3 and "run:max_load_kN" in conv[0]


def test_planar_manifest_records_forced_zero_weights(tiny_config, tmp_path):
    run = tmp_path / "planar"
    assert optimize(tiny_config, run, "--mode", "2.5axis") == EXIT_OK
    info = json.loads((run / "manifest.json").read_text())["optimize"]
    assert info["forced_zero"] == ["lc", "lt", "mo", "ort", "yd"]
    for t in info["forced_zero"]:
        assert info["weights"][t] == 0.0
    conv = list(csv.DictReader(open(run / "convergence.csv")))
    assert all(float(r["l_lc"]) == 0.0 and float(r["l_mo"]) == 0.0 for r in conv)


def test_sequential_run_writes_both_phases(tiny_config, tmp_path):
    run = tmp_path / "seq"
    assert optimize(tiny_config, run, "--sequential") == EXIT_OK
    summary = json.loads((run / "summary.json").read_text())
    assert summary["phase_ends"] == [3, 6]
    assert (run / "phase1.fields").exists()
    assert "phase1" in summary["final"]
    phases = [int(r["phase"]) for r in csv.DictReader(open(run / "convergence.csv"))]
    assert phases == [1, 1, 1, 2, 2, 2]

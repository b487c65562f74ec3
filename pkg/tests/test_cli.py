import csv
import hashlib
import json

import numpy as np
import pytest

from mfnode.cli import main
from mfnode.config import ConfigError, ExperimentConfig, apply_override, load_config
from mfnode.model import Dataset, ParameterMeasure


def write_config(path, out_dir, **sections):
    cfg = {
        "dataset": {"synthetic": {"N": 6, "d": 2, "d_prime": 1, "ball_radius": 3.0,
                                  "min_separation": 0.3, "seed": 0}},
        "model": {"S": 4, "m": 32, "activation": "cos",
                  "init": {"kind": "fixup", "features": {"kind": "gaussian", "rho": 1.0}}},
        "trainer": {"eta0": 0.01, "t_max": 0.2},
        "lift": {"enabled": True, "alpha": 2.0},
        "certify": {"n_directions": 4},
        "outputs": {"dir": str(out_dir)},
    }
    cfg.update(sections)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def cfg_path(tmp_path):
    return write_config(tmp_path / "cfg.json", tmp_path / "run")


def test_overrides_and_validation(tmp_path):
    raw = {"a": {"b": 1}}
    apply_override(raw, "a.c.d=[1, 2]")
    apply_override(raw, "a.b=auto")
    assert raw == {"a": {"b": "auto", "c": {"d": [1, 2]}}}
    with pytest.raises(ConfigError):
        apply_override(raw, "novalue")
    path = write_config(tmp_path / "c.json", tmp_path / "o")
    cfg = load_config(path, ["model.m=8", "lift.alpha=\"auto\""])
    assert cfg.model.m == 8 and cfg.lift.alpha == "auto"
    with pytest.raises(ConfigError):
        load_config(path, ["model.unknown=1"])
    with pytest.raises(ConfigError):
        load_config(path, ["dataset.csv=\"x.csv\""])  # two sources
    assert cfg.sha256() == ExperimentConfig.model_validate_json(cfg.canonical_json()).sha256()


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"dataset": {"synthetic": {}}, "model": {"activation": "relu"}}')
    assert main(["init", "--config", str(bad)]) == 1
    assert main(["init"]) == 1
    assert main(["init", "--config", str(tmp_path / "missing.json")]) == 1
    assert "config error" in capsys.readouterr().err


def test_init_writes_checkpoint_and_manifest(cfg_path, tmp_path):
    assert main(["init", "--config", str(cfg_path), "--seed", "7"]) == 0
    mu = ParameterMeasure.load(tmp_path / "run" / "init.ckpt")
    assert mu.seed == 7 and mu.dim == 3 and np.all(mu.u == 0)
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["seeds"]["model"] == 7
    cfg = ExperimentConfig.model_validate(manifest["config"])
    assert manifest["config_sha256"] == hashlib.sha256(cfg.canonical_json().encode()).hexdigest()
    assert set(manifest["versions"]) >= {"numpy", "scipy", "mfnode", "python"}


def test_train_then_report_row_count(cfg_path, tmp_path, capsys):
    assert main(["train", "--config", str(cfg_path)]) == 0
    run = tmp_path / "run"
    manifest = json.loads((run / "manifest.json").read_text())
    assert main(["report", str(run)]) == 0
    with open(run / "loss_curve.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    assert len(rows) == manifest["steps"] > 0
    summary = json.loads((run / "summary.json").read_text())
    assert summary["final_loss"] < summary["initial_loss"]


def test_train_is_reproducible(cfg_path, tmp_path):
    assert main(["train", "--config", str(cfg_path), "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg_path), "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "trajectory.jsonl").read_bytes() == \
        (tmp_path / "b" / "trajectory.jsonl").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_train_format_flag(cfg_path, tmp_path):
    assert main(["train", "--config", str(cfg_path), "--format", "csv"]) == 0
    assert (tmp_path / "run" / "trajectory.csv").exists()
    assert not (tmp_path / "run" / "trajectory.jsonl").exists()


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_train_numerical_failure_exit_2(tmp_path, capsys):
    path = write_config(tmp_path / "c.json", tmp_path / "run",
                        model={"S": 2, "m": 4, "activation": "identity",
                               "init": {"kind": "random", "scale": 3.0}},
                        trainer={"eta0": 1e3, "t_max": 1e6, "adaptive": False},
                        lift={"enabled": True, "alpha": 50.0})
    assert main(["train", "--config", str(path)]) == 2
    diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "error" in diag
    assert json.loads((tmp_path / "run" / "diagnostic.json").read_text()) == diag


def test_certify_passes_with_auto_alpha(cfg_path, capsys):
    assert main(["certify", "--config", str(cfg_path), "--set", 'lift.alpha="auto"']) == 0
    out = capsys.readouterr().out
    cert = json.loads(out[out.index("{"):])
    assert cert["passed"] and cert["label"] == "empirical"


def test_certify_duplicated_points_exit_3(tmp_path, capsys):
    data = tmp_path / "dup.csv"
    Dataset([[0.5, 0.5], [0.5, 0.5], [1.0, -1.0]], [[1.0], [0.0], [0.5]]).to_csv(data)
    path = write_config(tmp_path / "c.json", tmp_path / "run", dataset={"csv": str(data)},
                        lift={"enabled": True, "alpha": "auto"})
    assert main(["certify", "--config", str(path)]) == 3
    captured = capsys.readouterr()
    assert "lambda0 = 0" in captured.err
    cert = json.loads((tmp_path / "run" / "certificate.json").read_text())
    assert cert["reason"] == "lambda0 = 0" and cert["lambda0"] == 0.0


def test_synth_output_is_separated(tmp_path, capsys):
    path = write_config(tmp_path / "c.json", tmp_path / "run",
                        dataset={"synthetic": {"N": 8, "d": 2, "d_prime": 1,
                                               "min_separation": 0.3, "seed": 3}})
    assert main(["synth", "--config", str(path)]) == 0
    ds = Dataset.from_csv(tmp_path / "run" / "dataset.csv")
    assert ds.N == 8 and ds.separation >= 0.3
    # the emitted file feeds certify, whose provenance records the separation
    cert_cfg = write_config(tmp_path / "c2.json", tmp_path / "run2",
                            dataset={"csv": str(tmp_path / "run" / "dataset.csv")})
    main(["certify", "--config", str(cert_cfg)])
    cert = json.loads((tmp_path / "run2" / "certificate.json").read_text())
    assert cert["provenance"]["separation"] >= 0.3


def test_synth_attempt_cap_is_a_config_error(tmp_path):
    path = write_config(tmp_path / "c.json", tmp_path / "run",
                        dataset={"synthetic": {"N": 60, "d": 1, "d_prime": 1,
                                               "min_separation": 0.5}})
    assert main(["synth", "--config", str(path)]) == 1


def test_distance_and_kernel(cfg_path, tmp_path, capsys):
    assert main(["init", "--config", str(cfg_path)]) == 0
    ck = str(tmp_path / "run" / "init.ckpt")
    capsys.readouterr()
    assert main(["distance", ck, ck]) == 0
    assert json.loads(capsys.readouterr().out)["distance"] == 0.0
    assert main(["train", "--config", str(cfg_path), "--init", ck]) == 0
    capsys.readouterr()
    assert main(["distance", ck, str(tmp_path / "run" / "final.ckpt"), "--solver", "sinkhorn"]) == 0
    assert json.loads(capsys.readouterr().out)["distance"] > 0
    assert main(["kernel", "--config", str(cfg_path)]) == 0
    with open(tmp_path / "run" / "kernel_k1.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 4 * 6 * 6
    assert main(["distance", ck, str(tmp_path / "missing.ckpt")]) == 1

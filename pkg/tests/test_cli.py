import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ghostspec import cli
from ghostspec.errors import SVDConvergenceError
from ghostspec.transforms import SyntheticFamilySpec, base_model


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_matrix(path):
    rows = list(csv.reader(open(path)))
    return rows[0][1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Checkpoints for a family, an attacked copy and two deep independent models."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["family", "--out", str(root / "fam"), "--seed", "0"]) == 0
    assert cli.main(["transform", str(root / "fam" / "base"), "--out", str(root / "attacked"), "--seed", "3"]) == 0
    for seed in (21, 22):
        spec = SyntheticFamilySpec(d_model=32, num_layers=32, num_heads=4, head_dim=8, seed=seed)
        base_model(spec, name=f"deep{seed}").write(root / f"deep{seed}")
    fps = root / "fps"
    for name, path in [("base", "fam/base"), ("derivative", "fam/derivative"), ("attacked", "attacked")]:
        assert cli.main(["extract", str(root / path), "--model-id", name, "--out", str(fps / f"{name}.json")]) == 0
    for seed in (21, 22):
        assert cli.main(["extract", str(root / f"deep{seed}"), "--out", str(root / "deep" / f"d{seed}.json")]) == 0
    return root


class TestExtract:
    def test_writes_fingerprint(self, workspace):
        doc = json.loads((workspace / "fps" / "base.json").read_text())
        assert doc["num_layers"] == 8 and doc["format_version"] == 1

    def test_default_model_id_from_directory(self, workspace):
        assert json.loads((workspace / "deep" / "d21.json").read_text())["model_id"] == "deep21"

    def test_reextract_identical_bytes(self, workspace, tmp_path, capsys):
        code, _, _ = run(["extract", workspace / "fam" / "base", "--model-id", "base", "--out", tmp_path / "b.json"], capsys)
        assert code == 0
        assert (tmp_path / "b.json").read_bytes() == (workspace / "fps" / "base.json").read_bytes()

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(["extract", tmp_path / "absent"], capsys)
        assert code == 2 and "no such checkpoint" in err

    def test_numerical_failure_exit_3(self, workspace, tmp_path, capsys, monkeypatch):
        def fail(m):
            raise SVDConvergenceError(60, 1e-3)

        monkeypatch.setattr("ghostspec.fingerprint.singular_values", fail)
        code, _, err = run(["extract", workspace / "fam" / "base", "--out", tmp_path / "x.json"], capsys)
        assert code == 3 and "did not converge" in err

    def test_variant_and_head_dim(self, workspace, tmp_path, capsys):
        out = tmp_path / "naive.json"
        code, _, _ = run(["extract", workspace / "fam" / "base", "--variant", "attention_naive", "--head-dim", "16",
                          "--out", out], capsys)
        assert code == 0 and json.loads(out.read_text())["variant"] == "attention_naive"

    def test_bad_head_dim(self, workspace, capsys):
        code, _, _ = run(["extract", workspace / "fam" / "base", "--head-dim", "7"], capsys)
        assert code == 2


class TestCompare:
    def test_self(self, workspace, capsys):
        fp = workspace / "fps" / "base.json"
        code, out, _ = run(["compare", fp, fp, "--json"], capsys)
        doc = json.loads(out)
        assert code == 0 and doc["schema_version"] == 1
        assert f"{doc['mse']['score']:.6f}" == "0.976107"
        assert f"{doc['corr']['score']:.6f}" == "1.000000"
        assert doc["mse"]["verdict"] == doc["corr"]["verdict"] == "related"

    def test_text_report(self, workspace, capsys):
        fp = workspace / "fps" / "base.json"
        code, out, _ = run(["compare", fp, fp], capsys)
        assert code == 0 and "ghostspec-mse  0.976107" in out and "related" in out

    def test_attacked_copy_at_ceiling(self, workspace, capsys):
        fps = workspace / "fps"
        _, out, _ = run(["compare", fps / "base.json", fps / "attacked.json", "--json"], capsys)
        doc = json.loads(out)
        assert doc["mse"]["score"] >= 0.9761073 - 1e-6 and doc["mse"]["verdict"] == "related"

    def test_independent_seeds(self, workspace, capsys):
        deep = workspace / "deep"
        _, out, _ = run(["compare", deep / "d21.json", deep / "d22.json", "--json"], capsys)
        doc = json.loads(out)
        assert doc["mse"]["verdict"] == doc["corr"]["verdict"] == "unrelated"

    def test_mse_only(self, workspace, capsys):
        fp = workspace / "fps" / "base.json"
        _, out, _ = run(["compare", fp, fp, "--json", "--metric", "mse"], capsys)
        assert "corr" not in json.loads(out)

    def test_param_overrides(self, workspace, capsys):
        fp = workspace / "fps" / "base.json"
        _, out, _ = run(["compare", fp, fp, "--json", "--tau", "0.01", "--k", "500", "--rho", "0",
                         "--components", "qk_only"], capsys)
        doc = json.loads(out)
        assert doc["params"]["tau"] == 0.01 and doc["params"]["steepness_k"] == 500.0
        assert doc["mse"]["score"] == pytest.approx(1 / (1 + np.exp(-5.0)))

    def test_invalid_param(self, workspace, capsys):
        fp = workspace / "fps" / "base.json"
        code, _, err = run(["compare", fp, fp, "--rho", "-1"], capsys)
        assert code == 2 and "rho" in err

    def test_corrupt_fingerprint(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"format_version": 1, "model_id"')
        code, _, err = run(["compare", bad, workspace / "fps" / "base.json"], capsys)
        assert code == 2 and "byte offset" in err

    def test_deterministic_stdout(self, workspace, capsys):
        fps = workspace / "fps"
        argv = ["compare", fps / "base.json", fps / "derivative.json", "--json"]
        assert run(argv, capsys)[1] == run(argv, capsys)[1]


class TestMatrix:
    def test_three_fingerprints(self, workspace, tmp_path, capsys):
        s, d = tmp_path / "s.csv", tmp_path / "d.csv"
        code, _, _ = run(["matrix", workspace / "fps", "--out-scores", s, "--out-distances", d], capsys)
        assert code == 0
        ids, scores = read_matrix(s)
        _, dists = read_matrix(d)
        assert ids == ["attacked", "base", "derivative"] and scores.shape == (3, 3)
        np.testing.assert_array_equal(scores, scores.T)
        np.testing.assert_allclose(dists, 1.0 - scores, atol=1e-6)

    def test_empty_directory(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        code, _, err = run(["matrix", tmp_path / "empty"], capsys)
        assert code == 2 and "no fingerprint files" in err


class TestClassify:
    def test_strict_threshold(self, capsys):
        code, out, _ = run(["classify", "0.85", "0.9761"], capsys)
        assert code == 0 and out.splitlines() == ["0.850000 unrelated", "0.976100 related"]

    def test_corr_default_threshold(self, capsys):
        _, out, _ = run(["classify", "--metric", "corr", "0.62"], capsys)
        assert out.strip().endswith("related")

    def test_out_of_range(self, capsys):
        assert run(["classify", "1.5"], capsys)[0] == 2


class TestTransform:
    def test_unknown_attack(self, workspace, tmp_path, capsys):
        code, _, err = run(["transform", workspace / "fam" / "base", "--attack", "rotate_all", "--out", tmp_path], capsys)
        assert code == 2 and "unknown attack" in err

    def test_same_seed_same_bytes(self, workspace, tmp_path, capsys):
        for sub in ("a", "b"):
            run(["transform", workspace / "fam" / "base", "--attack", "qk_perhead,mlp_permute", "--seed", "9",
                 "--out", tmp_path / sub], capsys)
        a = (tmp_path / "a" / "model.safetensors").read_bytes()
        assert a == (tmp_path / "b" / "model.safetensors").read_bytes()
        assert a != (workspace / "fam" / "base" / "model.safetensors").read_bytes()


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert cli.main(["family", "--depth-corpus", "--out", str(root / "ckpt"), "--seed", "2"]) == 0
    for model in sorted(p for p in (root / "ckpt").iterdir() if p.is_dir()):
        assert cli.main(["extract", str(model), "--out", str(root / "fps" / f"{model.name}.json")]) == 0
    return root


class TestFamilyAndEval:
    def test_labels_written(self, corpus_dir):
        lines = (corpus_dir / "ckpt" / "labels.csv").read_text().splitlines()
        assert len(lines) == 7 and lines[0].startswith("base,")

    def test_eval_report(self, corpus_dir, tmp_path, capsys):
        code, out, _ = run(["eval", corpus_dir / "ckpt" / "labels.csv", corpus_dir / "fps",
                            "--sweep-rho", "0,0.002,0.01", "--report", tmp_path / "rep"], capsys)
        assert code == 0
        summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
        assert summary["metrics"]["mse"]["best_f1"] == 1.0
        rows = list(csv.reader((tmp_path / "rep" / "rho_sensitivity.csv").open()))
        assert len(rows) == 4 and rows[0] == ["rho", "delta_mse", "delta_corr"]

    def test_bad_label_line(self, corpus_dir, tmp_path, capsys):
        labels = tmp_path / "labels.csv"
        labels.write_text("base,pruned-2,related\nbase,pruned-8\n")
        code, _, err = run(["eval", labels, corpus_dir / "fps"], capsys)
        assert code == 2 and "labels.csv:2" in err

    def test_bad_rho_list(self, corpus_dir, capsys):
        code, _, _ = run(["eval", corpus_dir / "ckpt" / "labels.csv", corpus_dir / "fps", "--sweep-rho", "a,b"], capsys)
        assert code == 2

    def test_family_perturbation(self, tmp_path, capsys):
        code, _, _ = run(["family", "--out", tmp_path, "--perturbation", "layer_prune", "--num-changed", "3"], capsys)
        assert code == 0
        config = json.loads((tmp_path / "derivative" / "config.json").read_text())
        assert config["num_hidden_layers"] == 5


class TestConfig:
    def test_file_sets_defaults(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"rho": 0.01, "metric": "mse", "k": 800}))
        fp = workspace / "fps" / "base.json"
        _, out, _ = run(["--config", cfg, "compare", fp, fp, "--json"], capsys)
        doc = json.loads(out)
        assert doc["params"]["rho"] == 0.01 and doc["params"]["steepness_k"] == 800
        assert "corr" not in doc

    def test_flags_win(self, workspace, tmp_path, capsys, monkeypatch):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"rho": 0.01}))
        monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
        fp = workspace / "fps" / "base.json"
        _, out, _ = run(["compare", fp, fp, "--json", "--rho", "0.004"], capsys)
        assert json.loads(out)["params"]["rho"] == 0.004

    def test_env_variable(self, workspace, tmp_path, capsys, monkeypatch):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"tau": 0.005}))
        monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
        fp = workspace / "fps" / "base.json"
        _, out, _ = run(["compare", fp, fp, "--json"], capsys)
        assert json.loads(out)["params"]["tau"] == 0.005

    def test_broken_config(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{rho")
        fp = workspace / "fps" / "base.json"
        assert run(["--config", cfg, "compare", fp, fp], capsys)[0] == 2


def test_usage_error_exit_2(capsys):
    assert run(["compare"], capsys)[0] == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ghostspec", "classify", "0.9"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "0.900000 related"

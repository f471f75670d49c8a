"""End-to-end command-line tests on fast toy configurations."""

import json
import os

import pytest

from atgan.cli import main
from atgan.tensorio import load_tensors

FAST_CONFIG = {
    "mode": "atgan", "profile": "toy", "scale": "mini", "seed": 0,
    "batch_size": 16, "total_steps": 6,
    "threat": {"epsilon": 0.1, "steps": 3, "step_size": 0.03},
    "weights": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0},
    "generator_opt": {"kind": "adam", "lr": 0.002},
    "discriminator_opt": {"kind": "adam", "lr": 0.002},
    "pretrain_epochs": 2,
}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "toy.json"
    path.write_text(json.dumps(FAST_CONFIG))
    return str(path)


@pytest.fixture(scope="module")
def trained_run(config_file, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    assert main(["train", "--config", config_file, "--out", out]) == 0
    return out


class TestTrain:
    def test_artifacts_exist(self, trained_run):
        for name in ("checkpoint-final.ckpt", "metrics.jsonl", "config.json", "manifest.json"):
            assert os.path.exists(os.path.join(trained_run, name)), name
        manifest = json.load(open(os.path.join(trained_run, "manifest.json")))
        assert manifest["mode"] == "atgan"
        for path in manifest["checkpoints"] + manifest["artifacts"]:
            assert os.path.exists(path)

    def test_rerun_identical_metrics(self, config_file, tmp_path):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["train", "--config", config_file, "--out", out1]) == 0
        assert main(["train", "--config", config_file, "--out", out2]) == 0
        m1 = open(os.path.join(out1, "metrics.jsonl"), "rb").read()
        m2 = open(os.path.join(out2, "metrics.jsonl"), "rb").read()
        assert m1 == m2

    def test_missing_data_root_actionable(self, tmp_path, capsys):
        cfg = tmp_path / "mnist.json"
        cfg.write_text(json.dumps({"mode": "standard", "profile": "mnist", "epochs": 1}))
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == 2
        err = capsys.readouterr().err
        assert "train-images-idx3-ubyte" in err

    def test_invalid_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"mode": "standard", "profile": "toy",
                                   "epochs": 1, "turbo": True}))
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "turbo" in capsys.readouterr().err

    def test_usage_error_exit_code(self):
        assert main(["train"]) == 1          # missing required flags
        assert main(["no-such-command"]) == 1


def test_toy_fast_preset_end_to_end(tmp_path):
    """The shipped fast preset trains well inside its five-minute budget."""
    import time

    out = str(tmp_path / "toyfast")
    start = time.time()
    assert main(["train", "--config", "toy-fast", "--out", out]) == 0
    assert time.time() - start < 300
    assert os.path.exists(os.path.join(out, "checkpoint-final.ckpt"))
    assert os.path.exists(os.path.join(out, "lossnet-pretrain", "checkpoint-final.ckpt"))


class TestAttack:
    def test_emits_container_and_sidecar(self, trained_run, tmp_path):
        ckpt = os.path.join(trained_run, "checkpoint-final.ckpt")
        out = str(tmp_path / "adv.bin")
        code = main(["attack", "--model", ckpt, "--eps", "0.1", "--steps", "3",
                     "--step-size", "0.03", "--init", "random", "--out", out,
                     "--limit", "10"])
        assert code == 0
        meta, tensors = load_tensors(out)
        assert tensors["x_adv"].shape == (10, 8, 8, 1)
        assert meta["threat"]["steps"] == 3
        sidecar = json.load(open(out + ".json"))
        assert sidecar["max_delta"] <= 0.1 + 1e-6
        assert sidecar["sample_count"] == 10

    def test_unbounded_epsilon(self, trained_run, tmp_path):
        ckpt = os.path.join(trained_run, "checkpoint-final.ckpt")
        out = str(tmp_path / "adv.bin")
        code = main(["attack", "--model", ckpt, "--eps", "unbounded", "--steps", "2",
                     "--step-size", "0.05", "--out", out, "--limit", "4"])
        assert code == 0
        assert json.load(open(out + ".json"))["threat"]["epsilon"] == "unbounded"


class TestEvalCurve:
    def test_csv_json_png(self, trained_run, tmp_path):
        ckpt = os.path.join(trained_run, "checkpoint-final.ckpt")
        out = str(tmp_path / "curve")
        code = main(["eval-curve", "--model", ckpt, "--out", out,
                     "--grid", "0,0.05,0.1", "--steps", "3"])
        assert code == 0
        lines = open(os.path.join(out, "curve.csv")).read().strip().splitlines()
        assert lines[0] == "epsilon,accuracy,n,attack_config_hash"
        assert len(lines) == 4
        assert os.path.exists(os.path.join(out, "curve.png"))
        curve = json.load(open(os.path.join(out, "curve.json")))
        assert curve["epsilons"] == [0, 0.05, 0.1]
        assert curve["model_kind"] == "composite"


class TestClassifierCheckpoints:
    def test_eval_curve_on_classifier(self, tmp_path):
        cfg = tmp_path / "std.json"
        cfg.write_text(json.dumps({"mode": "standard", "profile": "toy", "scale": "mini",
                                   "total_steps": 6, "batch_size": 16,
                                   "discriminator_opt": {"kind": "adam", "lr": 0.002}}))
        out = str(tmp_path / "run")
        assert main(["train", "--config", str(cfg), "--out", out]) == 0
        curve_dir = str(tmp_path / "curve")
        assert main(["eval-curve", "--model", os.path.join(out, "checkpoint-final.ckpt"),
                     "--out", curve_dir, "--grid", "0,0.1", "--steps", "2"]) == 0
        curve = json.load(open(os.path.join(curve_dir, "curve.json")))
        assert curve["model_kind"] == "classifier"
        assert curve["train_epsilon"] is None


class TestOgTest:
    def test_verdict_json(self, trained_run, tmp_path):
        ckpt = os.path.join(trained_run, "checkpoint-final.ckpt")
        out = str(tmp_path / "og.json")
        code = main(["og-test", "--model", ckpt, "--out", out,
                     "--long-steps", "6", "--unbounded-steps", "5"])
        assert code == 0
        report = json.load(open(out))
        assert {"base", "long_horizon", "unbounded",
                "long_horizon_stable", "unbounded_breaks"} <= set(report)


class TestSaliency:
    def test_grids_emitted(self, trained_run, tmp_path):
        ckpt = os.path.join(trained_run, "checkpoint-final.ckpt")
        out = str(tmp_path / "sal")
        code = main(["saliency", "--model", ckpt, "--out", out, "--grid", "0.05,0.1"])
        assert code == 0
        assert os.path.exists(os.path.join(out, "saliency-examples.png"))
        assert os.path.exists(os.path.join(out, "saliency-maps.png"))


class TestReport:
    def test_bundle_from_manifests(self, trained_run, config_file, tmp_path):
        ckpt = os.path.join(trained_run, "checkpoint-final.ckpt")
        curve_dir = os.path.join(trained_run, "curve")
        assert main(["eval-curve", "--model", ckpt, "--out", curve_dir,
                     "--grid", "0,0.1", "--steps", "2"]) == 0
        # extend the manifest with the curve artifact
        manifest_path = os.path.join(trained_run, "manifest.json")
        manifest = json.load(open(manifest_path))
        manifest["artifacts"].append(os.path.join(curve_dir, "curve.json"))
        json.dump(manifest, open(manifest_path, "w"))

        out = str(tmp_path / "report")
        assert main(["report", "--manifests", manifest_path, "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "curve-overlays.png"))
        assert os.path.exists(os.path.join(out, "pointwise.csv"))
        assert os.path.exists(os.path.join(out, "pointwise.png"))

    def test_mixed_profiles_rejected(self, trained_run, tmp_path, capsys):
        manifest_path = os.path.join(trained_run, "manifest.json")
        other = json.load(open(manifest_path))
        other["profile"] = "mnist"
        other_path = str(tmp_path / "other.json")
        json.dump(other, open(other_path, "w"))
        code = main(["report", "--manifests", manifest_path, other_path,
                     "--out", str(tmp_path / "rep")])
        assert code == 2
        assert "mixed dataset profiles" in capsys.readouterr().err


class TestVerify:
    def test_writes_verdict_and_exit_codes(self, tmp_path, monkeypatch):
        import atgan.acceptance as acceptance

        fake = [{"criterion": "1-x", "status": "PASS", "summary": "ok", "details": {}}]
        monkeypatch.setattr(acceptance, "run_acceptance",
                            lambda fast, data_root, seed: fake)
        out = str(tmp_path / "v")
        assert main(["verify", "--out", out]) == 0
        verdict = json.load(open(os.path.join(out, "verify.json")))
        assert verdict["passed"] is True

        fake.append({"criterion": "2-y", "status": "FAIL", "summary": "bad", "details": {}})
        assert main(["verify", "--out", out]) == 3
        verdict = json.load(open(os.path.join(out, "verify.json")))
        assert verdict["passed"] is False

import json

import numpy as np
import pytest

from iidlab.cli import main
from iidlab.imagecore import load_pfm, save_pfm, ImageRGB
from iidlab.synthgen import SynthConfig, generate_dataset


def run(argv):
    return main(argv)


@pytest.fixture()
def tiny_config(tmp_path):
    cfg = {
        "synth": {"size": 32, "seed": 5, "n_regions": 4},
        "model": {"base_width": 4, "input_size": 32, "seed": 5},
        "train": {"epochs": 2, "lr": 2e-4, "batch": 2},
        "paths": {"data_dir": str(tmp_path / "data"), "out_dir": str(tmp_path / "out")},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestSynth:
    def test_count_and_rerun_identical(self, tmp_path, tiny_config, capsys):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        assert run(["synth", "--config", str(tiny_config), "--count", "6",
                    "--out-dir", str(d1)]) == 0
        assert run(["synth", "--config", str(tiny_config), "--count", "6",
                    "--out-dir", str(d2)]) == 0
        files1 = sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file())
        assert len(files1) == 6 * 5 + 1  # png, 2 pfm, seg png+json each, manifest
        for rel in files1:
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes()

    def test_count_zero_ok(self, tmp_path, tiny_config):
        out = tmp_path / "empty"
        assert run(["synth", "--config", str(tiny_config), "--count", "0",
                    "--out-dir", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["samples"] == []


class TestPriors:
    def test_file_set_complete(self, tmp_path, capsys):
        data = tmp_path / "data"
        generate_dataset(SynthConfig(size=32, seed=6), 2, data)
        assert run(["priors", "--manifest", str(data / "manifest.json")]) == 0
        members = ("ccr_strength", "r_est", "s_est", "nrgb", "edge_256", "edge_128", "edge_64")
        for i in range(2):
            stem = f"sample_{i:05d}"
            pfms = [data / "priors" / f"{stem}.{m}.pfm" for m in members]
            assert all(p.is_file() for p in pfms)
            assert len(pfms) == 7

    def test_idempotent(self, tmp_path):
        data = tmp_path / "data"
        generate_dataset(SynthConfig(size=32, seed=7), 1, data)
        assert run(["priors", "--manifest", str(data / "manifest.json")]) == 0
        first = {p: p.read_bytes() for p in (data / "priors").iterdir()}
        assert run(["priors", "--manifest", str(data / "manifest.json")]) == 0
        for p, blob in first.items():
            assert p.read_bytes() == blob

    def test_missing_manifest_exit_2(self, tmp_path, capsys):
        assert run(["priors", "--manifest", str(tmp_path / "nope.json")]) == 2
        err = capsys.readouterr().err
        assert err.startswith("error:MissingFile:")


class TestTrainEval:
    def test_train_eval_smoke(self, tmp_path, tiny_config, capsys):
        assert run(["synth", "--config", str(tiny_config), "--count", "5"]) == 0
        assert run(["train", "--config", str(tiny_config)]) == 0
        out = json.loads(capsys.readouterr().out.splitlines()[-1])
        ckpt = out["checkpoint"]
        report_path = tmp_path / "report.json"
        assert run(["eval", "--checkpoint", ckpt,
                    "--manifest", str(tmp_path / "data" / "manifest.json"),
                    "--split", "test", "--out", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        assert set(report["aggregate"]) == {
            "mse_r", "si_mse_r", "lmse_r", "dssim_r",
            "mse_s", "si_mse_s", "lmse_s", "dssim_s"}

        # rerunning eval produces byte-identical output
        report2_path = tmp_path / "report2.json"
        assert run(["eval", "--checkpoint", ckpt,
                    "--manifest", str(tmp_path / "data" / "manifest.json"),
                    "--split", "test", "--out", str(report2_path)]) == 0
        assert report_path.read_bytes() == report2_path.read_bytes()

        # infer writes decomposition files
        img = tmp_path / "data" / "images" / "sample_00000.png"
        seg = tmp_path / "data" / "segments" / "sample_00000.png"
        stem = tmp_path / "decomp" / "sample"
        assert run(["infer", "--checkpoint", ckpt, "--image", str(img),
                    "--segments", str(seg), "--out-stem", str(stem)]) == 0
        for suffix in ("r_final", "s_final", "edge"):
            assert (tmp_path / "decomp" / f"sample.{suffix}.pfm").is_file()
            assert (tmp_path / "decomp" / f"sample.{suffix}.png").is_file()

    def test_no_priors_architecture_report(self, tmp_path, tiny_config, capsys):
        assert run(["synth", "--config", str(tiny_config), "--count", "5"]) == 0
        out_dir = tmp_path / "ablate"
        assert run(["train", "--config", str(tiny_config), "--no-priors",
                    "--out-dir", str(out_dir)]) == 0
        report = json.loads((out_dir / "architecture.json").read_text())
        global_encoders = [e for e in report["encoders"] if not e.startswith("final")]
        assert global_encoders == ["image"]
        assert report["config"]["no_priors"] is True

    def test_conflicting_flags_exit_2(self, tmp_path, tiny_config, capsys):
        assert run(["train", "--config", str(tiny_config), "--no-edge-module",
                    "--image-edges"]) == 2
        assert "error:InvalidConfig:" in capsys.readouterr().err

    def test_eval_bypass_zeros(self, tmp_path, tiny_config, capsys):
        assert run(["synth", "--config", str(tiny_config), "--count", "5"]) == 0
        assert run(["eval", "--manifest", str(tmp_path / "data" / "manifest.json"),
                    "--split", "all", "--bypass-gt"]) == 0
        aggregate = json.loads(capsys.readouterr().out.splitlines()[-1])
        assert all(abs(v) <= 1e-12 for v in aggregate.values())

    def test_eval_judgments_single_number(self, tmp_path, capsys):
        # two flat patches, right side brighter: point1 (left) is darker
        arr = np.full((16, 16, 3), 0.2, dtype=np.float32)
        arr[:, 8:] = 0.8
        save_pfm(ImageRGB(arr), tmp_path / "pred.pfm")
        doc = {"judgments": [
            {"x1": 2, "y1": 8, "x2": 13, "y2": 8, "darker": "1", "weight": 1.0}]}
        (tmp_path / "j.json").write_text(json.dumps(doc))
        assert run(["eval", "--judgments", str(tmp_path / "j.json"),
                    "--reflectance", str(tmp_path / "pred.pfm")]) == 0
        out = capsys.readouterr().out.strip().splitlines()[-1]
        assert float(out) == 0.0


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"synth": {"sizzle": 1}}))
        assert run(["synth", "--config", str(bad), "--count", "1",
                    "--out-dir", str(tmp_path / "d")]) == 2
        assert "error:InvalidConfig: unknown config key: synth.sizzle" in capsys.readouterr().err

    def test_set_override(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert run(["synth", "--count", "1", "--out-dir", str(out),
                    "--set", "synth.size=32", "--set", "synth.seed=9"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["size"] == 32
        assert manifest["config"]["seed"] == 9

    def test_bad_set_value_rejected(self, tmp_path, capsys):
        assert run(["synth", "--count", "1", "--out-dir", str(tmp_path / "d"),
                    "--set", "synth.size=not_an_int"]) == 2

    def test_invalid_synth_value_exit_2(self, tmp_path, capsys):
        assert run(["synth", "--count", "1", "--out-dir", str(tmp_path / "d"),
                    "--set", "synth.size=8"]) == 2  # below the 32px minimum

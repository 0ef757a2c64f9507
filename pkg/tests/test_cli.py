"""End-to-end command pipeline through checkpoint files."""

import json
import os

import numpy as np
import pytest

from pathfuse import ckpt, cli


def run(args):
    return cli.main(args)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny gen/train/assemble/adapt/fuse pipeline shared by the tests."""
    root = str(tmp_path_factory.mktemp("cli"))
    assert run(["gen-data", "--domains", "identity", "invert",
                "--samples-per-class", "12", "--classes", "10",
                "--out", root]) == 0
    domains = sorted(f for f in os.listdir(root) if f.endswith(".ds"))
    paths = {"root": root,
             "src_ds": os.path.join(root, domains[0]),
             "tgt_ds": os.path.join(root, domains[1])}
    for tag, seed in (("a", 0), ("b", 1)):
        out = os.path.join(root, f"src_{tag}.ckpt")
        assert run(["--seed", str(seed), "train-source", "--domain",
                    paths["src_ds"], "--epochs", "2", "--out", out]) == 0
        paths[f"src_{tag}"] = out
    paths["assembled"] = os.path.join(root, "assembled.ckpt")
    assert run(["assemble", "--sources", paths["src_a"], paths["src_b"],
                "--out", paths["assembled"]]) == 0
    paths["adapted"] = os.path.join(root, "adapted.ckpt")
    assert run(["adapt", "--model", paths["assembled"], "--target",
                paths["tgt_ds"], "--epochs", "1", "--out", paths["adapted"]]) == 0
    paths["fused"] = os.path.join(root, "fused.ckpt")
    assert run(["fuse", "--model", paths["adapted"], "--out", paths["fused"]]) == 0
    return paths


class TestPipeline:
    def test_artifacts_exist_with_fingerprints(self, pipeline):
        for key in ("assembled", "adapted", "fused"):
            assert os.path.exists(pipeline[key])
            assert os.path.exists(pipeline[key] + ".config.json")

    def test_assembled_form(self, pipeline):
        model = ckpt.load(pipeline["assembled"])
        assert model.form == "multipath" and model.num_pathways == 2

    def test_fused_matches_adapted(self, pipeline):
        from pathfuse.tensor import Tensor
        adapted = ckpt.load(pipeline["adapted"])
        fused = ckpt.load(pipeline["fused"])
        ds = ckpt.load_dataset(pipeline["tgt_ds"])
        x = Tensor(ds.images[:16])
        for a, b in zip(adapted.forward(x), fused.forward(x)):
            np.testing.assert_allclose(a.data, b.data, atol=1e-4)

    def test_eval_reports_json(self, pipeline, capsys):
        out_json = os.path.join(pipeline["root"], "report.json")
        assert run(["eval", "--model", pipeline["fused"],
                    "--sources", pipeline["src_ds"],
                    "--target", pipeline["tgt_ds"],
                    "--out-json", out_json]) == 0
        report = json.load(open(out_json))
        for key in ("S", "T", "H", "flops_total"):
            assert key in report

    def test_flops_output(self, pipeline, capsys):
        assert run(["flops", "--model", pipeline["fused"]]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["total"] == payload["extractor"] + payload["heads"]

    def test_experiment_subcommand(self, pipeline, tmp_path, capsys):
        cfg = {
            "domain_specs": [
                {"transform": "identity", "angle": 0.0, "noise_sigma": 0.0,
                 "hue_shift": 0.0, "blur_radius": 0, "samples_per_class": 14,
                 "seed": 1},
                {"transform": "invert", "angle": 0.0, "noise_sigma": 0.0,
                 "hue_shift": 0.0, "blur_radius": 0, "samples_per_class": 14,
                 "seed": 2},
                {"transform": "noise", "angle": 0.0, "noise_sigma": 0.1,
                 "hue_shift": 0.0, "blur_radius": 0, "samples_per_class": 14,
                 "seed": 3},
            ],
            "target_index": 1,
            "methods": ["source-ens"],
            "source_epochs": 1,
        }
        cfg_path = str(tmp_path / "cfg.json")
        json.dump(cfg, open(cfg_path, "w"))
        out = str(tmp_path / "table")
        assert run(["experiment", "--config", cfg_path, "--out", out]) == 0
        assert os.path.exists(out + ".csv") and os.path.exists(out + ".json")
        assert "source-ens" in capsys.readouterr().out


class TestErrors:
    def test_missing_file_is_exit_1(self, capsys):
        assert run(["fuse", "--model", "/nonexistent.ckpt", "--out", "/tmp/x"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_corrupt_checkpoint_is_exit_1(self, tmp_path, capsys):
        bad = str(tmp_path / "bad.ckpt")
        open(bad, "wb").write(b"garbage")
        assert run(["fuse", "--model", bad, "--out", str(tmp_path / "o")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_determinism_across_invocations(self, tmp_path):
        ds_dir = str(tmp_path)
        run(["gen-data", "--domains", "identity", "--samples-per-class", "6",
             "--out", ds_dir])
        ds = os.path.join(ds_dir, "domain0_identity.ds")
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        for out in (a, b):
            assert run(["--seed", "3", "train-source", "--domain", ds,
                        "--epochs", "1", "--out", out]) == 0
        assert open(a, "rb").read() == open(b, "rb").read()

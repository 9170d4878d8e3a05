"""End-to-end CLI coverage: pipeline smoke, exit codes, determinism."""

import os
import subprocess

import numpy as np
import pytest

from picoseg import cli
from picoseg.fileio import load_pgm, save_model_config, save_tensor
from picoseg.model import ModelConfig
from picoseg.tensor import Tensor

TINY = ModelConfig(input_size=32, stage_channels=(6, 12), head_channels=4)


def read_prompt(sample_dir):
    with open(os.path.join(sample_dir, "prompt.txt")) as f:
        x, y = f.read().split()
    return x, y


def tree_bytes(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in sorted(names):
            p = os.path.join(dirpath, n)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = f.read()
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> quantize once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("pipe")
    ds = str(root / "ds")
    cfg = str(root / "tiny.cfg")
    ckpt = str(root / "model.ckpt")
    qmodel = str(root / "model.pqnt")
    hist = str(root / "history.csv")
    save_model_config(TINY, cfg)
    assert cli.run(["synth", "--out", ds, "--count", "10", "--seed", "9",
                    "--image-size", "48", "--crop-size", "32"]) == 0
    assert cli.run(["train", "--data", ds, "--config", cfg, "--out", ckpt,
                    "--epochs", "2", "--lr", "2e-3", "--batch-size", "4",
                    "--seed", "0", "--val-count", "2", "--history", hist]) == 0
    assert cli.run(["quantize", "--ckpt", ckpt, "--calib", ds,
                    "--calib-count", "4", "--out", qmodel]) == 0
    return {"root": str(root), "ds": ds, "cfg": cfg, "ckpt": ckpt,
            "qmodel": qmodel, "hist": hist}


class TestUsage:
    def test_no_arguments(self, capsys):
        assert cli.run([]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_top_level_help(self, capsys):
        assert cli.run(["--help"]) == 0
        assert "picoseg" in capsys.readouterr().out

    @pytest.mark.parametrize("sub", ["synth", "train", "quantize", "infer",
                                     "eval", "stats", "gradcheck"])
    def test_subcommand_help(self, sub, capsys):
        assert cli.run([sub, "--help"]) == 0
        capsys.readouterr()

    def test_unknown_flag(self, capsys):
        assert cli.run(["synth", "--bogus", "1"]) == 1
        capsys.readouterr()

    def test_unknown_subcommand(self, capsys):
        assert cli.run(["frobnicate"]) == 1
        capsys.readouterr()

    def test_missing_required_flag(self, capsys):
        assert cli.run(["synth", "--count", "3"]) == 1
        capsys.readouterr()


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        assert len([d for d in os.listdir(pipeline["ds"])
                    if d.startswith("sample_")]) == 10
        assert os.path.getsize(pipeline["ckpt"]) > 0
        assert os.path.getsize(pipeline["qmodel"]) > 0
        assert len(open(pipeline["hist"]).read().strip().splitlines()) == 2

    def test_infer_float_model(self, pipeline, capsys, tmp_path):
        sample = os.path.join(pipeline["ds"], "sample_00000")
        x, y = read_prompt(sample)
        out = str(tmp_path / "mask.pgm")
        rc = cli.run(["infer", "--model", pipeline["ckpt"],
                      "--image", os.path.join(sample, "image.ppm"),
                      "--point", f"{x},{y}", "--out", out])
        assert rc == 0
        capsys.readouterr()
        mask = load_pgm(out)
        assert mask.shape == (1, 1, 48, 48)
        assert set(np.unique(mask.data)) <= {0.0, 1.0}

    def test_infer_quantized_model(self, pipeline, capsys, tmp_path):
        sample = os.path.join(pipeline["ds"], "sample_00003")
        x, y = read_prompt(sample)
        out = str(tmp_path / "qmask.pgm")
        rc = cli.run(["infer", "--model", pipeline["qmodel"],
                      "--image", os.path.join(sample, "image.ppm"),
                      "--point", f"{x},{y}", "--out", out])
        assert rc == 0
        capsys.readouterr()
        assert load_pgm(out).shape == (1, 1, 48, 48)

    def test_eval_prints_both_metrics(self, pipeline, capsys):
        rc = cli.run(["eval", "--model", pipeline["ckpt"],
                      "--data", pipeline["ds"], "--metrics", "miou,map"])
        assert rc == 0
        out = capsys.readouterr().out
        scores = {}
        for line in out.strip().splitlines():
            k, v = line.split(" = ")
            scores[k] = float(v)
        assert set(scores) == {"miou", "map"}
        assert all(0.0 <= v <= 1.0 for v in scores.values())

    def test_eval_quantized(self, pipeline, capsys):
        rc = cli.run(["eval", "--model", pipeline["qmodel"],
                      "--data", pipeline["ds"], "--metrics", "miou"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("miou = ")


class TestDeterminism:
    def test_synth_same_seed_byte_identical(self, tmp_path, capsys):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert cli.run(["synth", "--out", out, "--count", "4", "--seed", "3",
                            "--image-size", "48", "--crop-size", "32"]) == 0
        capsys.readouterr()
        assert tree_bytes(a) == tree_bytes(b)

    def test_train_same_seed_byte_identical(self, pipeline, tmp_path, capsys):
        ckpt2 = str(tmp_path / "again.ckpt")
        assert cli.run(["train", "--data", pipeline["ds"], "--config", pipeline["cfg"],
                        "--out", ckpt2, "--epochs", "2", "--lr", "2e-3",
                        "--batch-size", "4", "--seed", "0", "--val-count", "2"]) == 0
        capsys.readouterr()
        assert open(ckpt2, "rb").read() == open(pipeline["ckpt"], "rb").read()

    def test_quantize_byte_identical(self, pipeline, tmp_path, capsys):
        q2 = str(tmp_path / "again.pqnt")
        assert cli.run(["quantize", "--ckpt", pipeline["ckpt"], "--calib", pipeline["ds"],
                        "--calib-count", "4", "--out", q2]) == 0
        capsys.readouterr()
        assert open(q2, "rb").read() == open(pipeline["qmodel"], "rb").read()


class TestStats:
    def test_reference_budget_lines(self, capsys):
        assert cli.run(["stats", "--config", "reference"]) == 0
        out = capsys.readouterr().out
        assert "params = 1241253" in out
        assert "macs = 324036608" in out
        assert "macs_quantized = 324036608" in out
        fields = dict(line.split(" = ") for line in out.strip().splitlines())
        assert int(fields["float_bytes"]) > int(fields["quantized_bytes"])

    def test_throughput_block(self, capsys):
        rc = cli.run(["stats", "--config", "reference",
                      "--latency", "14.3", "--clock", "262500000"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "macs_per_cycle = 86.32" in out
        assert "utilization" in out

    def test_latency_without_clock(self, capsys):
        assert cli.run(["stats", "--config", "desk", "--latency", "14.3"]) == 2
        assert "error" in capsys.readouterr().err


class TestErrorExits:
    def test_missing_dataset_is_data_error(self, capsys):
        rc = cli.run(["train", "--data", "/no/such/dir", "--out", "/tmp/x.ckpt"])
        assert rc == 2
        capsys.readouterr()

    def test_val_count_exhausts_dataset(self, pipeline, capsys, tmp_path):
        rc = cli.run(["train", "--data", pipeline["ds"], "--config", pipeline["cfg"],
                      "--out", str(tmp_path / "x.ckpt"), "--val-count", "10"])
        assert rc == 2
        capsys.readouterr()

    def test_unknown_model_magic(self, pipeline, tmp_path, capsys):
        junk = str(tmp_path / "junk.bin")
        with open(junk, "wb") as f:
            f.write(b"JUNKJUNKJUNK")
        sample = os.path.join(pipeline["ds"], "sample_00000")
        rc = cli.run(["infer", "--model", junk,
                      "--image", os.path.join(sample, "image.ppm"),
                      "--point", "5,5", "--out", str(tmp_path / "m.pgm")])
        assert rc == 2
        assert "magic" in capsys.readouterr().err

    def test_malformed_point(self, pipeline, tmp_path, capsys):
        sample = os.path.join(pipeline["ds"], "sample_00000")
        for bad in ("5", "a,b", "1,2,3"):
            rc = cli.run(["infer", "--model", pipeline["ckpt"],
                          "--image", os.path.join(sample, "image.ppm"),
                          "--point", bad, "--out", str(tmp_path / "m.pgm")])
            assert rc == 2
        capsys.readouterr()

    def test_unknown_metric(self, capsys):
        rc = cli.run(["eval", "--model", "unused", "--data", "unused",
                      "--metrics", "accuracy"])
        assert rc == 2
        capsys.readouterr()

    def test_nonfinite_loss_exits_numeric(self, tmp_path, capsys):
        ds = str(tmp_path / "bad")
        cfg = str(tmp_path / "tiny.cfg")
        save_model_config(TINY, cfg)
        assert cli.run(["synth", "--out", ds, "--count", "2", "--seed", "1",
                        "--image-size", "48", "--crop-size", "32"]) == 0
        # huge finite teacher values overflow the squared error to inf
        poison = np.full((1, 1, 32, 32), 1e30, dtype=np.float32)
        save_tensor(Tensor(poison), os.path.join(ds, "sample_00000", "teacher.ptsr"))
        with np.errstate(over="ignore", invalid="ignore"):
            rc = cli.run(["train", "--data", ds, "--config", cfg,
                          "--out", str(tmp_path / "x.ckpt"), "--epochs", "1",
                          "--batch-size", "1", "--val-count", "1", "--seed", "0"])
        assert rc == 3
        assert "numeric error" in capsys.readouterr().err


class TestGradcheck:
    def test_suite_passes(self, capsys):
        assert cli.run(["gradcheck", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "all gradient checks passed" in out
        assert "FAIL" not in out


def test_console_script_installed():
    proc = subprocess.run(["picoseg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "picoseg" in proc.stdout

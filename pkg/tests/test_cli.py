import json
import subprocess
import sys

import numpy as np
import numpy.testing as npt
import pytest
from PIL import Image

from tancount.cli import main
from tancount.dataio import load_dataset
from tancount.lcn import LcnModel
from tancount.serialize import load_lcn, load_tensor

from oracles import knn_sigmas_brute


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Small synthetic dataset with briefly trained LCN and TAN checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "run"
    assert main(["synth", "--out", str(data), "--frames", "8", "--size", "48x32", "--walkers", "4"]) == 0
    assert main(["train-lcn", "--data", str(data), "--out", str(out), "--iters", "3",
                 "--init", "he", "--sigma", "fixed:4", "--no-timestamp"]) == 0
    assert main(["train-tan", "--data", str(data), "--out", str(out), "--lcn", str(out / "lcn"),
                 "--iters", "2", "--hidden", "4", "--sigma", "fixed:4"]) == 0
    return data, out


class TestParams:
    def test_defaults(self, capsys):
        code, out, _ = run(capsys, "params")
        assert code == 0
        assert json.loads(out) == {"lcn": 32_641, "tan": 14_943, "total": 47_584}

    def test_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "tancount", "params"], capture_output=True, text=True)
        assert res.returncode == 0 and json.loads(res.stdout)["total"] == 47_584


class TestSynth:
    def test_writes_dataset(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--out", tmp_path, "--frames", "4", "--walkers", "7", "--size", "40x24")
        assert code == 0
        seq = load_dataset(tmp_path).sequences[0]
        assert (seq.width, seq.height) == (40, 24)
        npt.assert_array_equal(seq.counts(), 7)


class TestGenDensity:
    def test_fixed_sigma_integrals(self, toy_root, tmp_path, capsys):
        out = tmp_path / "gt"
        code, _, _ = run(capsys, "gen-density", "--data", toy_root, "--out", out, "--sigma", "fixed:15",
                         "--downsample", "--heatmaps")
        assert code == 0
        for stem, n in zip(["000000", "000001", "000002"], [2, 0, 1]):
            assert abs(load_tensor(out / "cam0" / f"{stem}.tan").sum(dtype=np.float64) - n) < 1e-3
            assert (out / "cam0" / f"{stem}.png").is_file()
        assert load_tensor(out / "cam0" / "000000.x8.tan").shape == (6, 8)

    def test_adaptive_sigmas_match_oracle(self, tmp_path, capsys):
        data = tmp_path / "d"
        run(capsys, "synth", "--out", data, "--frames", "2", "--walkers", "9")
        out = tmp_path / "gt"
        code, _, _ = run(capsys, "gen-density", "--data", data, "--out", out,
                         "--sigma", "adaptive", "--beta", "0.3", "--knn", "3")
        assert code == 0
        summary = json.loads((out / "density_summary.json").read_text())["frames"]
        seq = load_dataset(data).sequences[0]
        for rec, ann in zip(summary, seq.annotations):
            npt.assert_allclose(rec["sigmas"], knn_sigmas_brute(ann.points, 3, 0.3), rtol=1e-12)

    def test_missing_annotations(self, toy_root, tmp_path, capsys):
        path = toy_root / "cam0" / "annotations.jsonl"
        path.unlink()
        code, _, err = run(capsys, "gen-density", "--data", toy_root, "--out", tmp_path / "gt")
        assert code != 0
        assert str(path) in err


class TestTrainLcn:
    def test_zero_iters_is_init(self, toy_root, tmp_path, capsys):
        code, _, _ = run(capsys, "train-lcn", "--data", toy_root, "--out", tmp_path, "--iters", "0", "--seed", "4")
        assert code == 0
        m, ref = load_lcn(tmp_path / "lcn"), LcnModel.init(seed=4)
        for k in ref.params:
            npt.assert_array_equal(m.params[k].data, ref.params[k].data)

    def test_reproducible(self, toy_root, tmp_path, capsys):
        args = ["train-lcn", "--data", toy_root, "--out", tmp_path, "--iters", "3", "--seed", "2",
                "--init", "he", "--no-timestamp"]
        run(capsys, *args)
        first = {p.name: p.read_bytes() for p in sorted((tmp_path / "lcn").iterdir())}
        report = (tmp_path / "train_lcn.json").read_bytes()
        run(capsys, *args)
        second = {p.name: p.read_bytes() for p in sorted((tmp_path / "lcn").iterdir())}
        assert first == second
        assert (tmp_path / "train_lcn.json").read_bytes() == report
        assert "timestamp" not in json.loads(report)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverged_exit_code(self, toy_root, tmp_path, capsys):
        code, _, err = run(capsys, "train-lcn", "--data", toy_root, "--out", tmp_path, "--iters", "30",
                           "--init", "he", "--lr", "1e30", "--sigma", "fixed:4")
        assert code == 3
        assert "non-finite" in err

    def test_config_file_and_flag_precedence(self, toy_root, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"iters": 2, "seed": 9}))
        run(capsys, "train-lcn", "--data", toy_root, "--out", tmp_path, "--config", cfg, "--iters", "1")
        lines = (tmp_path / "lcn_loss.jsonl").read_text().splitlines()
        assert len(lines) == 1
        rep = json.loads((tmp_path / "train_lcn.json").read_text())
        assert rep["config"]["seed"] == 9 and rep["config"]["iters"] == 1

    def test_missing_config(self, toy_root, tmp_path, capsys):
        code, _, err = run(capsys, "train-lcn", "--data", toy_root, "--config", tmp_path / "no.json")
        assert code == 2 and "no.json" in err


class TestTrainTan:
    def test_checkpoint_written(self, trained):
        _, out = trained
        assert (out / "tan" / "manifest.json").is_file()
        assert len((out / "tan_loss.jsonl").read_text().splitlines()) == 2

    def test_joint(self, trained, tmp_path, capsys):
        data, out = trained
        code, _, _ = run(capsys, "train-tan", "--data", data, "--out", tmp_path, "--lcn", out / "lcn",
                         "--iters", "1", "--hidden", "3", "--joint", "--batch-size", "1")
        assert code == 0
        assert (tmp_path / "lcn_joint" / "manifest.json").is_file()

    def test_requires_lcn(self, trained, tmp_path, capsys):
        code, _, err = run(capsys, "train-tan", "--data", trained[0], "--out", tmp_path)
        assert code == 2 and "--lcn" in err


def _frames_dir(path, frames):
    path.mkdir(parents=True)
    for i, f in enumerate(frames):
        Image.fromarray(f).save(path / f"{i:04d}.png")
    return path


class TestInfer:
    def test_counts_written(self, trained, tmp_path, capsys):
        data, out = trained
        code, _, _ = run(capsys, "infer", "--data", data, "--lcn", out / "lcn", "--tan", out / "tan",
                         "--out", tmp_path, "--csv", "--heatmaps")
        assert code == 0
        recs = [json.loads(l) for l in (tmp_path / "counts.jsonl").read_text().splitlines()]
        assert len(recs) == 8
        assert set(recs[0]) == {"video", "frame", "count", "weights"} and len(recs[0]["weights"]) == 5
        assert (tmp_path / "counts.csv").read_text().startswith("video,frame,count")
        assert len(list((tmp_path / "heatmaps").rglob("*.png"))) == 8

    def test_single_frame_equals_tan_on_static_video(self, trained, tmp_path, capsys):
        _, out = trained
        frame = np.random.default_rng(0).integers(0, 256, (32, 48, 3), dtype=np.uint8)
        d = _frames_dir(tmp_path / "static", [frame] * 6)
        counts = {}
        for flag in ([], ["--single-frame"]):
            o = tmp_path / ("single" if flag else "tan")
            code, _, _ = run(capsys, "infer", "--frames-dir", d, "--lcn", out / "lcn", "--tan", out / "tan",
                             "--out", o, *flag)
            assert code == 0
            counts[bool(flag)] = [json.loads(l)["count"] for l in (o / "counts.jsonl").read_text().splitlines()]
        npt.assert_allclose(counts[True], counts[False], rtol=1e-5)

    def test_empty_video(self, trained, tmp_path, capsys):
        _, out = trained
        (tmp_path / "empty").mkdir()
        code, _, _ = run(capsys, "infer", "--frames-dir", tmp_path / "empty", "--lcn", out / "lcn",
                         "--single-frame", "--out", tmp_path / "o")
        assert code == 0
        assert (tmp_path / "o" / "counts.jsonl").read_text() == ""

    def test_resolution_mismatch(self, trained, tmp_path, capsys):
        _, out = trained
        d = _frames_dir(tmp_path / "big", [np.zeros((64, 64, 3), np.uint8)])
        code, _, err = run(capsys, "infer", "--frames-dir", d, "--lcn", out / "lcn", "--single-frame",
                           "--out", tmp_path / "o")
        assert code == 2 and "resolution" in err


class TestEval:
    def test_perfect_counts_file(self, trained, tmp_path, capsys):
        data, _ = trained
        counts = tmp_path / "c.json"
        counts.write_text(json.dumps([4.0] * 8))
        code, out, _ = run(capsys, "eval", "--data", data, "--counts-file", counts, "--out", tmp_path, "--csv")
        assert code == 0
        rep = json.loads((tmp_path / "eval.json").read_text())
        assert rep["mae"] == 0.0 and rep["mse"] == 0.0
        assert "all" in out and (tmp_path / "eval_counts.csv").is_file()

    def test_counts_length_mismatch(self, trained, tmp_path, capsys):
        counts = tmp_path / "c.json"
        counts.write_text("[1.0]")
        code, _, err = run(capsys, "eval", "--data", trained[0], "--counts-file", counts, "--out", tmp_path)
        assert code == 2 and "entries" in err

    @pytest.mark.parametrize("mode", ["tan", "single", "average"])
    def test_models(self, trained, tmp_path, capsys, mode):
        data, out = trained
        code, _, _ = run(capsys, "eval", "--data", data, "--lcn", out / "lcn", "--tan", out / "tan",
                         "--mode", mode, "--out", tmp_path, "--no-timestamp")
        assert code == 0
        rep = json.loads((tmp_path / "eval.json").read_text())
        assert len(rep["pairs"]) == 8 and rep["mae"] >= 0

    def test_reproducible_report(self, trained, tmp_path, capsys):
        data, out = trained
        args = ["eval", "--data", data, "--lcn", out / "lcn", "--tan", out / "tan", "--out", tmp_path,
                "--no-timestamp"]
        run(capsys, *args)
        a = (tmp_path / "eval.json").read_bytes()
        run(capsys, *args)
        assert (tmp_path / "eval.json").read_bytes() == a


class TestBench:
    def test_report(self, tmp_path, capsys):
        code, out, _ = run(capsys, "bench", "--resolution", "320x240", "--frames", "200", "--out", tmp_path,
                           "--threads", "1")
        assert code == 0
        rep = json.loads((tmp_path / "bench.json").read_text())
        assert rep["fps"] > 0 and rep["cores"] == 1 and rep["frames"] == 200
        assert rep["resolution"] == [320, 240] and "fps=" in out

    def test_threads_from_env(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("TANCOUNT_THREADS", "1")
        run(capsys, "bench", "--resolution", "64x48", "--frames", "2", "--out", tmp_path, "--single-frame")
        assert json.loads((tmp_path / "bench.json").read_text())["cores"] == 1

    def test_bad_resolution(self, tmp_path, capsys):
        code, _, err = run(capsys, "bench", "--resolution", "big", "--out", tmp_path)
        assert code == 2 and "WIDTHxHEIGHT" in err

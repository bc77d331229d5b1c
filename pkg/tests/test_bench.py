import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tancount.bench import (
    StreamingCounter,
    config_hash,
    count_params,
    evaluate,
    fps_bench,
    mae,
    mse,
    report_from_counts,
)
from tancount.dataio import make_window, synth_video
from tancount.lcn import LcnModel, lcn_forward
from tancount.tan import TanConfig, TanModel, tan_forward_maps

from oracles import mae_loop, rmse_loop

counts = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=50)


class TestMetrics:
    def test_examples(self):
        assert mae([10, 20], [12, 16]) == 3.0
        npt.assert_allclose(mse([10, 20], [12, 16]), np.sqrt(10))
        assert mse([7.0], [2.0]) == 5.0
        assert mae([1, 2, 3], [1, 2, 3]) == 0.0

    def test_loop_oracle(self):
        r = np.random.default_rng(0)
        p, g = r.uniform(0, 60, 1000), r.uniform(0, 60, 1000)
        assert abs(mae(p, g) - mae_loop(p, g)) < 1e-12
        assert abs(mse(p, g) - rmse_loop(p, g)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(data=st.data(), p=counts)
    def test_mae_le_rmse(self, data, p):
        g = data.draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=len(p), max_size=len(p)))
        assert mae(p, g) <= mse(p, g) * (1 + 1e-12) + 1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            mae([], [])
        with pytest.raises(ValueError):
            mse([1.0], [1.0, 2.0])


class TestReport:
    def test_per_scene_and_serialization(self):
        rep = report_from_counts([1, 2, 4], [1, 3, 4], ["a", "a", "b"], model_id="m", config={"x": 1})
        assert rep.per_scene["a"]["mae"] == 0.5 and rep.per_scene["b"]["frames"] == 1
        assert json.loads(rep.to_json())["config_hash"] == config_hash({"x": 1})
        assert rep.to_csv().splitlines()[0] == "index,pred,gt"

    def test_hash_order_independent(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})


@pytest.fixture(scope="module")
def models():
    lcn = LcnModel.init(seed=0, scheme="he")
    tan = TanModel.init(TanConfig(init_std=0.2, seed=3))
    return lcn, tan


class TestStreaming:
    def test_matches_one_shot(self, models):
        lcn, tan = models
        seq = synth_video(walkers=4, frames=9, size=(32, 48), seed=1).sequences[0]
        frames = [seq.image(i) for i in range(len(seq))]
        stream = StreamingCounter(lcn, tan).run(frames)
        maps = [lcn_forward(f, lcn).grid for f in frames]
        assert [r.frame for r in stream] == list(range(9))
        for t, r in enumerate(stream):
            ref = tan_forward_maps(make_window(maps, t, 2), tan)
            assert r.count == ref.count
            npt.assert_array_equal(r.weights, ref.weights)

    def test_results_trail_by_k(self, models):
        lcn, tan = models
        c = StreamingCounter(lcn, tan)
        f = np.zeros((16, 16, 3), np.float32)
        assert [len(c.push(f)) for _ in range(4)] == [0, 0, 1, 1]
        assert len(c.flush()) == 2
        assert len(c._cache) <= 2 * c.k + 1

    def test_single_frame_and_average(self, models):
        lcn, _ = models
        frames = [np.random.default_rng(i).random((16, 24, 3)).astype(np.float32) for i in range(4)]
        single = StreamingCounter(lcn).run(frames)
        avg = StreamingCounter(lcn, k=1, average=True).run(frames)
        c = [lcn_forward(f, lcn).grid.sum(dtype=np.float64) for f in frames]
        npt.assert_allclose([r.count for r in single], c, rtol=1e-6)
        npt.assert_allclose(avg[1].count, np.mean(c[:3]), rtol=1e-5)

    def test_resolution_change(self, models):
        c = StreamingCounter(models[0])
        c.push(np.zeros((16, 16, 3)))
        with pytest.raises(ValueError):
            c.push(np.zeros((16, 24, 3)))

    def test_empty_stream(self, models):
        assert StreamingCounter(*models).run([]) == []


class TestEvaluate:
    def test_zero_predictor(self):
        ds = synth_video(walkers=5, frames=6, size=(32, 32), seed=0)
        rep = evaluate(ds, LcnModel.init(zero=True), mode="single")
        assert rep.mae == 5.0 and rep.mse == 5.0

    def test_modes(self, models):
        lcn, tan = models
        ds = synth_video(walkers=3, frames=5, size=(32, 32), seed=2)
        for mode in ("tan", "single", "average"):
            rep = evaluate(ds, lcn, tan, mode=mode)
            assert len(rep.pairs) == 5
        with pytest.raises(ValueError):
            evaluate(ds, lcn, None, mode="tan")

    def test_roi_gt(self, models):
        ds = synth_video(walkers=6, frames=2, size=(32, 32), seed=4)
        seq = ds.sequences[0]
        seq.roi = np.zeros((32, 32), np.uint8)
        rep = evaluate(ds, LcnModel.init(zero=True), mode="single")
        assert [g for _, g in rep.pairs] == [0.0, 0.0]


class TestTiming:
    def test_report_schema(self, models):
        lcn, tan = models
        rep = fps_bench(lcn, tan, resolution=(64, 48), n_frames=5, warmup=1, threads=1)
        d = json.loads(rep.to_json())
        assert set(d) == {"resolution", "frames", "wall_time", "fps", "cores", "precision", "warmup"}
        assert d["cores"] == 1 and d["precision"] == "float32" and d["fps"] > 0

    def test_smaller_frames_are_faster(self, models):
        lcn, tan = models
        big = fps_bench(lcn, tan, resolution=(320, 240), n_frames=15, warmup=2, threads=1)
        small = fps_bench(lcn, tan, resolution=(160, 120), n_frames=15, warmup=2, threads=1)
        assert small.fps > big.fps

    def test_zero_frames(self, models):
        with pytest.raises(ValueError):
            fps_bench(*models, n_frames=0)


class TestParams:
    def test_default_stack(self):
        assert count_params(LcnModel.init(), TanModel.init(TanConfig())) == {
            "lcn": 32_641, "tan": 14_943, "total": 47_584,
        }

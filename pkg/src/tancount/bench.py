"""Metrics, evaluation reports, streaming inference and throughput timing."""

from __future__ import annotations

import hashlib
import json
import os
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .dataio import Dataset, window_indices
from .density import apply_roi, resample_nearest
from .lcn import LcnModel, lcn_forward
from .tan import TanModel, TanOutput, fuse_density, tan_forward_maps


def _pairs(preds, gts):
    p = np.asarray(preds, dtype=np.float64).ravel()
    g = np.asarray(gts, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"{p.size} predictions vs {g.size} ground-truth counts")
    if p.size == 0:
        raise ValueError("cannot score an empty set of counts")
    return p, g


def mae(preds, gts) -> float:
    """Mean absolute count error."""
    p, g = _pairs(preds, gts)
    return float(np.mean(np.abs(p - g)))


def mse(preds, gts) -> float:
    """Root of the mean squared count error.

    Crowd-counting tables report this under the name "MSE"; the square
    root is deliberate.
    """
    p, g = _pairs(preds, gts)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    pairs: list[tuple[float, float]]
    mae: float
    mse: float
    per_scene: dict[str, dict[str, float]]
    model_id: str = ""
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["index,pred,gt"]
        lines += [f"{i},{p:.6f},{g:.6f}" for i, (p, g) in enumerate(self.pairs)]
        return "\n".join(lines) + "\n"


def report_from_counts(preds, gts, scenes=None, model_id: str = "", config: dict | None = None):
    p, g = _pairs(preds, gts)
    scenes = ["all"] * len(p) if scenes is None else list(scenes)
    per_scene = {}
    for name in dict.fromkeys(scenes):
        idx = [i for i, s in enumerate(scenes) if s == name]
        per_scene[name] = {"mae": mae(p[idx], g[idx]), "mse": mse(p[idx], g[idx]), "frames": len(idx)}
    return EvalReport(
        pairs=[(float(a), float(b)) for a, b in zip(p, g)],
        mae=mae(p, g),
        mse=mse(p, g),
        per_scene=per_scene,
        model_id=model_id,
        config_hash=config_hash(config or {}),
    )


# ---------------------------------------------------------------------------
# streaming inference
# ---------------------------------------------------------------------------


@dataclass
class FrameResult:
    frame: int
    count: float
    weights: list[float]
    density: np.ndarray = field(repr=False, default=None)

    def record(self) -> dict:
        return {"frame": self.frame, "count": self.count, "weights": self.weights}


class StreamingCounter:
    """Sliding-window inference with a cache of the last ``2k+1`` LCN maps.

    Each pushed frame costs one LCN pass.  A frame's fused result needs the
    ``k`` frames after it, so results trail the input by ``k`` frames;
    :meth:`flush` emits the tail with the last frame replicated.  Results
    equal one-shot :func:`tan_forward_maps` on clamped windows.

    With ``tan=None`` the counter reports single-frame LCN counts, or, with
    ``average=True``, the uniform mean over the window.
    """

    def __init__(
        self,
        lcn: LcnModel,
        tan: TanModel | None = None,
        k: int | None = None,
        roi: np.ndarray | None = None,
        average: bool = False,
    ):
        self.lcn, self.tan, self.roi, self.average = lcn, tan, roi, average
        self.k = tan.cfg.k if tan is not None else (k if k is not None else 2)
        if tan is None and not average:
            self.k = 0
        self._cache: dict[int, np.ndarray] = {}
        self._seen = 0
        self._emitted = 0
        self._shape = None

    def _lcn_map(self, frame: np.ndarray) -> np.ndarray:
        if self.roi is not None:
            frame = apply_roi(frame, self.roi)
        grid = lcn_forward(frame, self.lcn).grid
        if self.roi is not None:
            grid = grid * resample_nearest((self.roi != 0).astype(grid.dtype), grid.shape)
        return grid

    def _emit(self, t: int, n: int) -> FrameResult:
        maps = np.stack([self._cache[i] for i in window_indices(t, self.k, n)])
        if self.tan is not None:
            out: TanOutput = tan_forward_maps(maps, self.tan)
            return FrameResult(t, out.count, out.weights.tolist(), out.fused.grid)
        w = np.full(len(maps), 1.0 / len(maps))
        fused = fuse_density(w, maps)
        return FrameResult(t, float(fused.sum(dtype=np.float64)), w.tolist(), fused)

    def _evict(self) -> None:
        keep_from = self._emitted - self.k
        for i in [i for i in self._cache if i < keep_from]:
            del self._cache[i]

    def push(self, frame: np.ndarray) -> list[FrameResult]:
        shape = np.shape(frame)
        if self._shape is None:
            self._shape = shape
        elif shape != self._shape:
            raise ValueError(f"frame resolution {shape} differs from stream resolution {self._shape}")
        self._cache[self._seen] = self._lcn_map(frame)
        self._seen += 1
        out = []
        # frame t is complete once frame t + k has arrived; the right edge
        # is unknown until flush, so use an unbounded length here
        while self._emitted + self.k < self._seen:
            out.append(self._emit(self._emitted, 1 << 62))
            self._emitted += 1
        self._evict()
        return out

    def flush(self) -> list[FrameResult]:
        out = []
        while self._emitted < self._seen:
            out.append(self._emit(self._emitted, self._seen))
            self._emitted += 1
        self._evict()
        return out

    def run(self, frames) -> list[FrameResult]:
        out = []
        for f in frames:
            out.extend(self.push(f))
        out.extend(self.flush())
        return out


def _gt_count(ann, roi) -> float:
    if roi is None or not len(ann):
        return float(len(ann))
    xs = np.clip(np.round(ann.points[:, 0]).astype(int), 0, roi.shape[1] - 1)
    ys = np.clip(np.round(ann.points[:, 1]).astype(int), 0, roi.shape[0] - 1)
    return float(np.count_nonzero(roi[ys, xs]))


def evaluate(
    ds: Dataset,
    lcn: LcnModel,
    tan: TanModel | None = None,
    mode: str = "tan",
    k: int = 2,
    use_roi: bool = True,
    model_id: str = "",
    config: dict | None = None,
) -> EvalReport:
    """Score a model stack on every frame of ``ds``.

    ``mode`` is ``"tan"`` (temporal fusion), ``"single"`` (LCN only) or
    ``"average"`` (uniform mean of the LCN maps in the window).
    """
    if mode == "tan" and tan is None:
        raise ValueError("mode 'tan' needs a TAN model")
    preds, gts, scenes = [], [], []
    for seq in ds.sequences:
        roi = seq.roi if use_roi else None
        counter = StreamingCounter(
            lcn,
            tan if mode == "tan" else None,
            k=k,
            roi=roi,
            average=(mode == "average"),
        )
        results = counter.run(seq.image(i) for i in range(len(seq)))
        preds += [r.count for r in results]
        gts += [_gt_count(a, roi) for a in seq.annotations]
        scenes += [seq.name.split("#")[0]] * len(seq)
    cfg = {"mode": mode, "k": k, **(config or {})}
    return report_from_counts(preds, gts, scenes, model_id=model_id, config=cfg)


# ---------------------------------------------------------------------------
# timing and parameter reports
# ---------------------------------------------------------------------------


@dataclass
class TimingReport:
    resolution: tuple[int, int]  # (width, height)
    frames: int
    wall_time: float
    fps: float
    cores: int
    precision: str
    warmup: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def available_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def fps_bench(
    lcn: LcnModel,
    tan: TanModel | None,
    resolution: tuple[int, int] = (320, 240),
    n_frames: int = 200,
    threads: int | None = None,
    warmup: int = 10,
    seed: int = 0,
) -> TimingReport:
    """Steady-state streaming throughput: one LCN pass plus one TAN pass per frame."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    w, h = resolution
    cores = threads or available_cores()
    rng = np.random.default_rng(seed)
    dtype = lcn.dtype
    pool = [rng.random((h, w, lcn.in_channels), dtype=np.float32).astype(dtype) for _ in range(8)]
    with threadpool_limits(limits=cores):
        counter = StreamingCounter(lcn, tan)
        for i in range(warmup):
            counter.push(pool[i % len(pool)])
        t0 = time.perf_counter()
        for i in range(n_frames):
            counter.push(pool[i % len(pool)])
        wall = time.perf_counter() - t0
    return TimingReport((w, h), n_frames, wall, n_frames / wall, cores, str(np.dtype(dtype)), warmup)


def count_params(lcn: LcnModel | None = None, tan: TanModel | None = None) -> dict[str, int]:
    out = {}
    if lcn is not None:
        out["lcn"] = lcn.param_count()
    if tan is not None:
        out["tan"] = tan.param_count()
    out["total"] = sum(out.values())
    return out

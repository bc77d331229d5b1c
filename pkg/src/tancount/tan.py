"""Temporal aware stack over a window of per-frame density maps.

The ``2k+1`` maps of a window are flattened row-major and concatenated in
temporal order into one ``L x 1`` sequence (``L = (2k+1) * M * N``).  Each
block projects it to ``H`` channels, applies three dilated residual layers
(dilations 1, 2, 4) and projects back to one channel.  The L1 norm of each
frame's segment of a block output, normalized over the window, gives the
fusion weights; the fused map is the weighted sum of the window's maps.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .density import DensityMap
from .lcn import STRIDE, LcnModel, TrainingDiverged, lcn_forward, lcn_forward_tensor
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TanConfig:
    k: int = 2
    blocks: int = 3
    layers_per_block: int = 3
    hidden: int = 20
    lam: float = 0.15
    lr: float = 5e-4
    iters: int = 1000
    batch_size: int = 4
    seed: int = 0
    init_std: float = 0.01
    out_bias: float = 1.0

    def __post_init__(self):
        if self.k < 1 or self.blocks < 1 or self.hidden < 1 or self.layers_per_block < 1:
            raise ValueError("k, blocks, hidden and layers_per_block must all be >= 1")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")

    @property
    def window(self) -> int:
        return 2 * self.k + 1

    def dilations(self) -> list[int]:
        return [2 ** (i - 1) for i in range(1, self.layers_per_block + 1)]


@dataclass
class TanModel:
    params: dict[str, Tensor]
    cfg: TanConfig

    @classmethod
    def init(cls, cfg: TanConfig, dtype=np.float32, zero: bool = False) -> "TanModel":
        """Gaussian weights (``cfg.init_std``), zero biases.

        The output projection bias starts at ``cfg.out_bias`` so an untrained
        stack emits a constant and fuses uniformly.
        """
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden

        def w(*shape):
            if zero:
                return Tensor(np.zeros(shape, dtype), requires_grad=True)
            return Tensor(T.gaussian_init(shape, cfg.init_std, rng, dtype), requires_grad=True)

        def b(n, value=0.0):
            return Tensor(np.full(n, 0.0 if zero else value, dtype), requires_grad=True)

        params = {}
        for s in range(cfg.blocks):
            p = f"block{s}"
            params[f"{p}.in.weight"] = w(1, h)
            params[f"{p}.in.bias"] = b(h)
            for i in range(1, cfg.layers_per_block + 1):
                params[f"{p}.layer{i}.w1"] = w(3, h, h)
                params[f"{p}.layer{i}.b1"] = b(h)
                params[f"{p}.layer{i}.w2"] = w(h, h)
                params[f"{p}.layer{i}.b2"] = b(h)
            params[f"{p}.out.weight"] = w(h, 1)
            params[f"{p}.out.bias"] = b(1, cfg.out_bias)
        return cls(params, cfg)

    @property
    def dtype(self):
        return self.params["block0.in.weight"].dtype

    def astype(self, dtype) -> "TanModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return TanModel(params, self.cfg)

    def copy(self) -> "TanModel":
        return self.astype(self.dtype)

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def tan_param_count(hidden: int = 20, blocks: int = 3) -> int:
    """Closed form ``blocks * (12 H^2 + 9 H + 1)`` for three-layer blocks."""
    return blocks * (12 * hidden * hidden + 9 * hidden + 1)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def reshape_concat(maps) -> Tensor:
    """``(2k+1, M, N)`` window of maps -> ``L x 1`` vector, temporal order."""
    m = T.as_tensor(maps)
    if m.data.ndim != 3:
        raise T.ShapeError(f"window must be (frames, M, N), got {m.shape}")
    return T.reshape(m, (m.data.size, 1))


def split_segments(v, frames: int) -> np.ndarray:
    """Inverse of :func:`reshape_concat` given the frame count."""
    v = np.asarray(getattr(v, "data", v))
    return v.reshape(frames, -1)


def dilated_residual_layer(v, params: dict[str, Tensor], prefix: str, d: int) -> Tensor:
    u = T.dilated_conv1d(v, params[f"{prefix}.w1"], params[f"{prefix}.b1"], d)
    return T.add(v, T.pointwise(T.relu(u), params[f"{prefix}.w2"], params[f"{prefix}.b2"]))


def dilated_residual_block(v, model: TanModel, s: int) -> Tensor:
    p = f"block{s}"
    prm = model.params
    h = T.pointwise(v, prm[f"{p}.in.weight"], prm[f"{p}.in.bias"])
    for i, d in enumerate(model.cfg.dilations(), 1):
        h = dilated_residual_layer(h, prm, f"{p}.layer{i}", d)
    return T.pointwise(h, prm[f"{p}.out.weight"], prm[f"{p}.out.bias"])


def fusion_weights(v_out, frames: int) -> np.ndarray:
    """Per-frame L1 norms of the block output, normalized to sum to one."""
    seg = split_segments(v_out, frames).astype(np.float64)
    a = np.abs(seg).sum(axis=1)
    total = a.sum()
    if not total > 0:
        return np.full(frames, 1.0 / frames)
    return a / total


def fuse_density(weights, maps) -> np.ndarray:
    maps = np.asarray(getattr(maps, "data", maps))
    w = np.asarray(weights)
    if w.shape != (maps.shape[0],):
        raise T.ShapeError(f"{w.shape[0]} weights for {maps.shape[0]} maps")
    return np.tensordot(w.astype(maps.dtype), maps, axes=1)


def fuse(v_out, maps) -> tuple[Tensor, np.ndarray]:
    """Differentiable fusion; returns the fused ``M x N`` map and the weights."""
    y, mp = T.as_tensor(v_out), T.as_tensor(maps)
    frames = mp.shape[0]
    seg = split_segments(y, frames)
    a = np.abs(seg).sum(axis=1, dtype=np.float64)
    total = a.sum()
    uniform = not total > 0
    w = np.full(frames, 1.0 / frames) if uniform else a / total
    out = fuse_density(w, mp.data)

    def grad_fn(g):
        dmaps = w.astype(g.dtype)[:, None, None] * g[None]
        if uniform:
            return np.zeros_like(y.data), dmaps
        dw = np.tensordot(mp.data, g, axes=([1, 2], [0, 1])).astype(np.float64)
        da = (dw - np.dot(w, dw)) / total
        dy = (da[:, None] * np.sign(seg)).reshape(y.shape).astype(y.dtype)
        return dy, dmaps

    return T._record(out, (y, mp), grad_fn), w


def smooth_l1(r: np.ndarray) -> np.ndarray:
    a = np.abs(r)
    return np.where(a < 1, 0.5 * r * r, a - 0.5)


def block_loss(fused, gt, lam: float) -> Tensor:
    """Squared count error plus ``lam`` times the pixel-mean smooth-L1 term."""
    f = T.as_tensor(fused)
    gt = np.asarray(getattr(gt, "grid", gt), dtype=np.float64)
    if f.shape != gt.shape:
        raise T.ShapeError(f"fused map {f.shape} and ground truth {gt.shape} differ")
    r = f.data.astype(np.float64) - gt
    dc = r.sum()
    value = dc * dc + lam * smooth_l1(r).mean()

    def grad_fn(g):
        dr = 2 * dc + lam * np.clip(r, -1, 1) / r.size
        return ((g * dr).astype(f.dtype),)

    return T._record(np.asarray(value, dtype=f.dtype), (f,), grad_fn)


# ---------------------------------------------------------------------------
# forward passes and training
# ---------------------------------------------------------------------------


@dataclass
class TanOutput:
    fused: DensityMap
    count: float
    weights: np.ndarray
    block_weights: list[np.ndarray]


def tan_blocks(maps, model: TanModel) -> list[Tensor]:
    """Outputs ``Y_1 .. Y_S`` of the stacked blocks for one window."""
    v = reshape_concat(maps)
    outs = []
    for s in range(model.cfg.blocks):
        v = dilated_residual_block(v, model, s)
        outs.append(v)
    return outs


def tan_forward_maps(maps: np.ndarray, model: TanModel) -> TanOutput:
    """Fuse an already-computed ``(2k+1, M, N)`` window of LCN maps."""
    maps = np.asarray(maps)
    if maps.shape[0] != model.cfg.window:
        raise T.ShapeError(f"window has {maps.shape[0]} maps, model expects {model.cfg.window}")
    with T.no_grad():
        outs = tan_blocks(maps.astype(model.dtype, copy=False), model)
    bw = [fusion_weights(o, maps.shape[0]) for o in outs]
    fused = fuse_density(bw[-1], maps)
    return TanOutput(DensityMap(fused, STRIDE), float(fused.sum(dtype=np.float64)), bw[-1], bw)


def tan_forward(frames: Sequence[np.ndarray], lcn: LcnModel, model: TanModel) -> TanOutput:
    """Run the LCN on each of the ``2k+1`` frames, then fuse."""
    if len(frames) != model.cfg.window:
        raise ValueError(f"expected {model.cfg.window} frames, got {len(frames)}")
    shapes = {np.shape(f) for f in frames}
    if len(shapes) != 1:
        raise T.ShapeError(f"inconsistent frame shapes in window: {sorted(shapes)}")
    maps = np.stack([lcn_forward(f, lcn).grid for f in frames])
    return tan_forward_maps(maps, model)


def window_loss(maps, gt, model: TanModel) -> tuple[Tensor, float]:
    """Deep-supervised loss for one window: sum of block losses over blocks."""
    mp = T.as_tensor(maps)
    total = None
    fused = None
    for y in tan_blocks(mp, model):
        fused, _ = fuse(y, mp)
        term = block_loss(fused, gt, model.cfg.lam)
        total = term if total is None else T.add(total, term)
    return total, float(fused.data.sum(dtype=np.float64))


def tan_train(
    windows: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TanConfig,
    model: TanModel | None = None,
) -> tuple[TanModel, list[float]]:
    """Train on ``(maps, gt_grid)`` pairs; ``maps`` is a ``(2k+1, M, N)`` window.

    The LCN maps are fixed inputs here, which keeps the LCN frozen.
    """
    if model is None:
        model = TanModel.init(cfg)
    if cfg.iters and not windows:
        raise ValueError("no training windows")
    dtype = model.dtype
    data = [(np.asarray(m, dtype=dtype), np.asarray(g, dtype=np.float64)) for m, g in windows]
    opt = T.Adam(model.params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    losses: list[float] = []
    for it in range(cfg.iters):
        opt.zero_grad()
        total = None
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(data)))
            maps, gt = data[order.pop()]
            loss, _ = window_loss(maps, gt, model)
            loss = T.scale(loss, 1.0 / cfg.batch_size)
            total = loss if total is None else T.add(total, loss)
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingDiverged(it, losses[-1] if losses else None)
        total.backward()
        opt.step()
        losses.append(value)
        if (it + 1) % 500 == 0:
            log.debug("tan iter %d loss %.6g", it + 1, value)
    return model, losses


def tan_train_joint(
    windows: Sequence[tuple[np.ndarray, np.ndarray]],
    lcn: LcnModel,
    cfg: TanConfig,
    model: TanModel | None = None,
    lcn_lr: float = 1e-5,
) -> tuple[TanModel, LcnModel, list[float]]:
    """Fine-tune LCN and TAN together on ``(frames, gt_grid)`` windows.

    ``frames`` is a ``(2k+1, H, W, C)`` stack.  Both models are updated in
    place and returned.
    """
    if model is None:
        model = TanModel.init(cfg)
    if cfg.iters and not windows:
        raise ValueError("no training windows")
    opt_tan = T.Adam(model.params, cfg.lr)
    opt_lcn = T.Adam(lcn.params, lcn_lr)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    losses: list[float] = []
    for it in range(cfg.iters):
        opt_tan.zero_grad()
        opt_lcn.zero_grad()
        total = None
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(windows)))
            frames, gt = windows[order.pop()]
            maps = T.stack([lcn_forward_tensor(np.asarray(f, lcn.dtype), lcn) for f in frames])
            loss, _ = window_loss(maps, gt, model)
            loss = T.scale(loss, 1.0 / cfg.batch_size)
            total = loss if total is None else T.add(total, loss)
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingDiverged(it, losses[-1] if losses else None)
        total.backward()
        opt_tan.step()
        opt_lcn.step()
        losses.append(value)
    return model, lcn, losses


def config_dict(cfg: TanConfig) -> dict:
    d = asdict(cfg)
    d["dilations"] = cfg.dilations()
    return d

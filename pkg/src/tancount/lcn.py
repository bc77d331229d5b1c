"""Lightweight counting network: nine convolutions, three 2x2 max pools.

The network maps an ``H x W x 3`` frame to a density grid at 1/8 resolution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .density import DensityMap, apply_roi, resample_nearest
from .tensor import Tensor

log = logging.getLogger(__name__)

# (name, kernel, out_channels) or "pool"; ReLU follows every conv but the last
LCN_LAYERS = [
    ("conv1", 3, 8),
    "pool",
    ("conv2", 3, 16),
    ("conv3", 3, 16),
    "pool",
    ("conv4", 3, 32),
    ("conv5", 3, 32),
    ("conv6", 3, 32),
    "pool",
    ("conv7", 3, 16),
    ("conv8", 3, 8),
    ("conv9", 1, 1),
]
STRIDE = 8


def layer_shapes(in_channels: int = 3) -> list[tuple[str, tuple[int, int, int, int]]]:
    shapes = []
    cin = in_channels
    for layer in LCN_LAYERS:
        if layer == "pool":
            continue
        name, k, cout = layer
        shapes.append((name, (k, k, cin, cout)))
        cin = cout
    return shapes


@dataclass
class LcnModel:
    params: dict[str, Tensor]
    in_channels: int = 3
    clamp_output: bool = False

    @classmethod
    def init(
        cls,
        seed: int = 0,
        std: float = 0.01,
        in_channels: int = 3,
        dtype=np.float32,
        zero: bool = False,
        scheme: str = "gaussian",
    ) -> "LcnModel":
        """Zero biases; weights drawn from N(0, std^2).

        ``scheme="he"`` replaces ``std`` by ``sqrt(2 / fan_in)`` per layer,
        which keeps activations from vanishing through the eight ReLU layers.
        """
        if scheme not in ("gaussian", "he"):
            raise ValueError(f"unknown init scheme {scheme!r}")
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in layer_shapes(in_channels):
            s = np.sqrt(2.0 / (shape[0] * shape[1] * shape[2])) if scheme == "he" else std
            w = np.zeros(shape, dtype) if zero else T.gaussian_init(shape, s, rng, dtype)
            params[f"{name}.weight"] = Tensor(w, requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(shape[-1], dtype), requires_grad=True)
        return cls(params, in_channels)

    def astype(self, dtype) -> "LcnModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return LcnModel(params, self.in_channels, self.clamp_output)

    def copy(self) -> "LcnModel":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.params["conv1.weight"].dtype

    def param_count(self) -> int:
        return param_count(self)


def param_count(model: LcnModel) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def lcn_forward_tensor(frame, model: LcnModel) -> Tensor:
    """Differentiable forward pass; returns the ``M x N`` density grid."""
    x = T.as_tensor(frame)
    h, w = x.shape[:2]
    if x.data.ndim != 3 or h < STRIDE or w < STRIDE:
        raise T.ShapeError(f"LCN input must be HxWxC with H, W >= {STRIDE}, got {x.shape}")
    if x.shape[2] != model.in_channels:
        raise T.ShapeError(f"LCN expects {model.in_channels} channels, got {x.shape[2]}")
    for layer in LCN_LAYERS:
        if layer == "pool":
            x = T.maxpool2(x)
            continue
        name = layer[0]
        x = T.conv2d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"])
        if name != "conv9" or model.clamp_output:
            x = T.relu(x)
    return T.reshape(x, x.shape[:2])


def lcn_forward(frame: np.ndarray, model: LcnModel) -> DensityMap:
    """Inference: density map at stride 8 for one frame."""
    frame = np.asarray(frame, dtype=model.dtype)
    with T.no_grad():
        out = lcn_forward_tensor(frame, model)
    return DensityMap(out.data, scale=STRIDE)


def count(dmap) -> float:
    """Estimated head count: the plain sum of all cells, negatives included."""
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    return float(np.sum(grid, dtype=np.float64))


def _half_sq(pred: Tensor, gt: np.ndarray, coef: float) -> Tensor:
    if pred.shape != gt.shape:
        raise T.ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    r = pred.data - gt
    out = np.asarray(coef * 0.5 * np.sum(r.astype(np.float64) ** 2), dtype=pred.dtype)
    return T._record(out, (pred,), lambda g: ((g * coef) * r,))


def lcn_loss(preds, gts) -> Tensor:
    """``1/(2N) * sum_i ||pred_i - gt_i||^2`` over a batch of ``N`` maps."""
    if isinstance(preds, (Tensor, np.ndarray, DensityMap)):
        preds, gts = [preds], [gts]
    if len(preds) != len(gts) or not preds:
        raise ValueError("lcn_loss needs equal-length, non-empty prediction and target lists")
    n = len(preds)
    total = None
    for p, g in zip(preds, gts):
        p = T.as_tensor(p.grid if isinstance(p, DensityMap) else p)
        g = g.grid if isinstance(g, DensityMap) else np.asarray(g)
        term = _half_sq(p, g.astype(p.dtype, copy=False), 1.0 / n)
        total = term if total is None else T.add(total, term)
    return total


@dataclass
class LcnTrainConfig:
    lr: float = 1e-5
    init_std: float = 0.01
    init: str = "gaussian"
    batch_size: int = 1
    iters: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    in_channels: int = 3

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class TrainingDiverged(FloatingPointError):
    """Loss became NaN/Inf; carries the iteration and last finite loss."""

    def __init__(self, iteration: int, last_loss: float | None):
        super().__init__(
            f"non-finite loss at iteration {iteration} (last finite loss: {last_loss})"
        )
        self.iteration = iteration
        self.last_loss = last_loss


def lcn_train(
    samples: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: LcnTrainConfig,
    model: LcnModel | None = None,
    roi: np.ndarray | None = None,
    on_checkpoint: Callable[[int, LcnModel], None] | None = None,
) -> tuple[LcnModel, list[float]]:
    """Fit the LCN with Adam on ``(frame, gt_grid)`` pairs.

    ``gt_grid`` must already be at stride 8.  When ``roi`` is given (a mask at
    frame resolution) it zeros both the input frame and the prediction.
    """
    if not samples:
        raise ValueError("training set is empty")
    if model is None:
        model = LcnModel.init(cfg.seed, cfg.init_std, cfg.in_channels, scheme=cfg.init)
    dtype = model.dtype
    frames = [np.asarray(f, dtype=dtype) for f, _ in samples]
    gts = [np.asarray(g, dtype=dtype) for _, g in samples]
    if roi is not None:
        frames = [apply_roi(f, roi) for f in frames]
        gts = [apply_roi(g, roi) for g in gts]
    opt = T.Adam(model.params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    losses: list[float] = []
    for it in range(cfg.iters):
        batch = []
        while len(batch) < cfg.batch_size:
            if not order:
                order = list(rng.permutation(len(frames)))
            batch.append(order.pop())
        opt.zero_grad()
        preds = []
        for i in batch:
            p = lcn_forward_tensor(frames[i], model)
            if roi is not None:
                m = resample_nearest((roi != 0).astype(dtype), p.shape)
                p = _mask(p, m)
            preds.append(p)
        loss = lcn_loss(preds, [gts[i] for i in batch])
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(it, losses[-1] if losses else None)
        loss.backward()
        opt.step()
        losses.append(value)
        if cfg.checkpoint_every and on_checkpoint and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(it + 1, model)
        if (it + 1) % 500 == 0:
            log.debug("lcn iter %d loss %.6g", it + 1, value)
    return model, losses


def _mask(x: Tensor, m: np.ndarray) -> Tensor:
    return T._record(x.data * m, (x,), lambda g: (g * m,))

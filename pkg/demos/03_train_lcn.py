"""Fitting the counting network to a handful of synthetic frames."""

import numpy as np

from tancount.bench import mae
from tancount.dataio import SynthSpec, synth_video
from tancount.density import downsample_gt, gt_density
from tancount.lcn import LcnModel, LcnTrainConfig, count, lcn_forward, lcn_train

# %% eight frames with different crowd sizes
samples = []
for i, n in enumerate([6, 10, 14, 18, 22, 26, 30, 34]):
    seq = synth_video(SynthSpec(walkers=n, frames=1, size=(128, 128), seed=100 + i)).sequences[0]
    samples.append((seq.image(0), downsample_gt(gt_density(seq.annotations[0], sigma=4.0)).grid))
gts = [g.sum() for _, g in samples]

# %% He initialization trains far faster than N(0, 0.01^2) for this depth
model = LcnModel.init(seed=0, scheme="he")
print("params:", model.param_count())
cfg = LcnTrainConfig(lr=1e-4, iters=1000, init="he")
model, losses = lcn_train(samples, cfg, model=model)
for it in (0, 249, 499, 999):
    print(f"iter {it + 1:>5}: loss {np.mean(losses[max(0, it - 20):it + 1]):.4f}")

# %% counts after training
preds = [count(lcn_forward(f, model)) for f, _ in samples]
for g, p in zip(gts, preds):
    print(f"gt {g:6.2f}  pred {p:6.2f}")
print("training MAE: %.3f" % mae(preds, gts))

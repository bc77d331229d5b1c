"""Temporal fusion over a noisy video.

Some frames of the video are hit by strong pixel noise.  A single-frame
counter is thrown off on those frames; the temporal stack learns to weight
the clean neighbours of a window more heavily.  Takes a few minutes.
"""

import numpy as np

from tancount.bench import mae
from tancount.dataio import SynthSpec, synth_video, window_indices
from tancount.density import downsample_gt, gt_density
from tancount.lcn import LcnTrainConfig, lcn_forward, lcn_train
from tancount.tan import TanConfig, fuse_density, tan_forward_maps, tan_train


def video(seed, walkers, frames, noise=0.06, prob=0.4):
    spec = SynthSpec(walkers=walkers, frames=frames, size=(128, 128), seed=seed, noise=noise,
                     noise_prob=prob, speed=1.5)
    seq = synth_video(spec).sequences[0]
    return [seq.image(i) for i in range(frames)], [downsample_gt(gt_density(a, sigma=4.0)).grid for a in seq.annotations]


# %% per-frame counter; it sees some noisy frames in training too
samples = []
for v in range(8):
    imgs, gts = video(1000 + v, 5 + 4 * v, 12, prob=0.3)
    samples += list(zip(imgs, gts))
lcn, _ = lcn_train(samples, LcnTrainConfig(lr=1e-4, iters=3000, init="he"))


def windows_of(maps):
    return [np.stack([maps[i] for i in window_indices(t, 2, len(maps))]) for t in range(len(maps))]


# %% temporal stack on LCN maps of noisy videos
train = []
for v in range(3):
    imgs, gts = video(2000 + v, 10 + 5 * v, 60)
    train += list(zip(windows_of([lcn_forward(im, lcn).grid for im in imgs]), gts))
tan, losses = tan_train(train, TanConfig(iters=600, batch_size=4))
print("TAN loss: %.3f -> %.3f" % (np.mean(losses[:20]), np.mean(losses[-20:])))

# %% held-out video
imgs, gts = video(3000, 14, 100)
wins = windows_of([lcn_forward(im, lcn).grid for im in imgs])
gt = [g.sum() for g in gts]
single = [w[2].sum() for w in wins]
avg = [fuse_density(np.full(5, 0.2), w).sum() for w in wins]
outs = [tan_forward_maps(w, tan) for w in wins]
print(f"MAE single frame   {mae(single, gt):7.3f}")
print(f"MAE 5-frame mean   {mae(avg, gt):7.3f}")
print(f"MAE temporal stack {mae([o.count for o in outs], gt):7.3f}")
print("weights at frame 50:", np.round(outs[50].weights, 3))

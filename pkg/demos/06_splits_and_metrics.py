"""Train/test splits and the two count metrics."""

import numpy as np

from tancount.bench import mae, mse, report_from_counts
from tancount.dataio import MALL_SPLIT, UCSD_SPLIT, SplitSpec, apply_split, synth_video

ds = synth_video(walkers=3, frames=2000, size=(16, 16), seed=0)

# %% built-in splits over 2,000 frames
for spec in (MALL_SPLIT, UCSD_SPLIT):
    train, test = apply_split(ds, spec)
    print(f"{spec.name:>5}: train {len(train)}, test {len(test)} in {len(test.sequences)} run(s)")

# %% custom splits round-trip through JSON
spec = SplitSpec([(0, 100), (500, 600)], name="two-blocks")
print(SplitSpec.from_json(spec.to_json()))

# %% MAE never exceeds the root-mean-square error
rng = np.random.default_rng(0)
gt = rng.integers(10, 40, 50).astype(float)
pred = gt + rng.normal(0, 2, 50)
print(f"MAE {mae(pred, gt):.3f}  MSE {mse(pred, gt):.3f}")
print(report_from_counts(pred, gt, model_id="noisy-oracle").to_json()[:200], "...")

"""Checking hand-written backward passes with central finite differences.

ReLU and max-pool make the loss piecewise smooth.  A finite difference that
straddles a kink measures a blend of two slopes, so such probes are
detected (by comparing activation patterns at theta +- h) and set aside.
"""

import numpy as np

from tancount import tensor as T
from tancount.lcn import LCN_LAYERS, LcnModel, lcn_forward_tensor, lcn_loss

rng = np.random.default_rng(1)
model = LcnModel.init(seed=0, scheme="he", dtype=np.float64)
frame = rng.random((32, 32, 3))
gt = rng.random((4, 4))


def loss_value():
    with T.no_grad():
        return float(lcn_loss(lcn_forward_tensor(frame, model), gt).data)


def pattern():
    x, out = frame, []
    for layer in LCN_LAYERS:
        if layer == "pool":
            h2, w2 = x.shape[0] // 2, x.shape[1] // 2
            win = x[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, -1).transpose(0, 2, 4, 1, 3)
            out.append(win.reshape(h2, w2, -1, 4).argmax(axis=-1))
            x = T.maxpool2_forward(x)
            continue
        name = layer[0]
        x = T.conv2d_forward(x, model.params[f"{name}.weight"].data, model.params[f"{name}.bias"].data)
        if name != "conv9":
            out.append(x > 0)
            x = np.maximum(x, 0)
    return out


# %% analytic gradient
lcn_loss(lcn_forward_tensor(frame, model), gt).backward()

# %% probe a few entries of every layer
h = 1e-3
print(f"{'param':<14}{'analytic':>14}{'numeric':>14}{'rel err':>10}")
for name, p in model.params.items():
    flat, g = p.data.reshape(-1), p.grad.reshape(-1)
    i = int(rng.integers(flat.size))
    base = pattern()
    flat[i] += h
    lp, sp = loss_value(), pattern()
    flat[i] -= 2 * h
    lm, sm = loss_value(), pattern()
    flat[i] += h
    kink = any(not np.array_equal(a, b) for a, b in zip(base + base, sp + sm))
    num = (lp - lm) / (2 * h)
    rel = abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-12)
    flag = "  (kink, skipped)" if kink else ""
    print(f"{name:<14}{g[i]:>14.6e}{num:>14.6e}{rel:>10.1e}{flag}")

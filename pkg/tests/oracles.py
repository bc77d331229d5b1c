"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops (or straight numpy
without the package's kernels) so it shares no code path with the
implementation under test.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_direct(x, w, b):
    """Six nested loops, zero "same" padding, cross-correlation."""
    h, wd, cin = x.shape
    k, _, _, cout = w.shape
    p = k // 2
    out = np.zeros((h, wd, cout))
    for y in range(h):
        for xx in range(wd):
            for co in range(cout):
                s = b[co]
                for dy in range(k):
                    for dx in range(k):
                        yy, xs = y + dy - p, xx + dx - p
                        if 0 <= yy < h and 0 <= xs < wd:
                            for ci in range(cin):
                                s += w[dy, dx, ci, co] * x[yy, xs, ci]
                out[y, xx, co] = s
    return out


def maxpool_direct(x):
    h, w, c = x.shape
    out = np.zeros((h // 2, w // 2, c))
    for i in range(h // 2):
        for j in range(w // 2):
            for ch in range(c):
                out[i, j, ch] = max(
                    x[2 * i, 2 * j, ch], x[2 * i + 1, 2 * j, ch],
                    x[2 * i, 2 * j + 1, ch], x[2 * i + 1, 2 * j + 1, ch],
                )
    return out


def dilated_conv1d_direct(x, w, b, d):
    n, cin = x.shape
    cout = w.shape[2]
    out = np.zeros((n, cout))
    for l in range(n):
        for co in range(cout):
            s = b[co]
            for tap, off in enumerate((-d, 0, d)):
                if 0 <= l + off < n:
                    for ci in range(cin):
                        s += w[tap, ci, co] * x[l + off, ci]
            out[l, co] = s
    return out


def sum_pool_direct(x, f):
    h, w = x.shape
    out = np.zeros((h // f, w // f))
    for i in range(h // f):
        for j in range(w // f):
            s = 0.0
            for a in range(f):
                for c in range(f):
                    s += x[i * f + a, j * f + c]
            out[i, j] = s
    return out


def knn_sigmas_brute(points, k, beta, sigma_min=0.5):
    pts = [tuple(p) for p in points]
    out = []
    for i, (xi, yi) in enumerate(pts):
        d = sorted(math.hypot(xi - xj, yi - yj) for j, (xj, yj) in enumerate(pts) if j != i)
        out.append(max(beta * sum(d[:k]) / k, sigma_min))
    return np.array(out)


def adam_scalar(grads, lr, b1=0.9, b2=0.999, eps=1e-8, p=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def mae_loop(p, g):
    return sum(abs(a - b) for a, b in zip(p, g)) / len(p)


def rmse_loop(p, g):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, g)) / len(p))


def fuse_loop(weights, maps):
    frames, m, n = maps.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for f in range(frames):
                out[i, j] += weights[f] * maps[f, i, j]
    return out


def impulse_span(f, length, pos):
    """Positions where ``f(impulse at pos)`` differs from ``f(zeros)``."""
    base = f(np.zeros(length))
    e = np.zeros(length)
    e[pos] = 1.0
    diff = np.abs(f(e) - base) > 1e-12
    idx = np.flatnonzero(diff)
    return (int(idx.min()), int(idx.max())) if len(idx) else None


def fd_gradcheck(loss_fn, arrays, grads, h=1e-3, probes=30, signature=None, seed=0):
    """Central finite differences on a random subset of entries.

    ``loss_fn()`` evaluates the scalar loss from the current contents of the
    arrays in ``arrays`` (mutated in place).  When ``signature`` is given it
    returns a list of arrays describing the active piece of a piecewise
    smooth function (ReLU masks, pooling argmaxes, signs); probes whose
    ``+h`` or ``-h`` evaluation lands on a different piece are not valid
    finite-difference estimates and are counted separately.

    Returns ``(max_relative_error, n_valid, n_total)``.
    """
    rng = np.random.default_rng(seed)
    base_sig = signature() if signature else None

    def same(s):
        return all(np.array_equal(a, b) for a, b in zip(base_sig, s))

    worst, valid, total = 0.0, 0, 0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        n = min(probes, flat.size)
        for i in rng.choice(flat.size, n, replace=False):
            total += 1
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            sp = signature() if signature else None
            flat[i] = orig - h
            lm = loss_fn()
            sm = signature() if signature else None
            flat[i] = orig
            if signature and not (same(sp) and same(sm)):
                continue
            valid += 1
            num = (lp - lm) / (2 * h)
            err = abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-8)
            worst = max(worst, err)
    return worst, valid, total


# ---------------------------------------------------------------------------
# piece signatures for finite-difference checks of piecewise-smooth losses
# ---------------------------------------------------------------------------


def _pool_argmax(x):
    h2, w2 = x.shape[0] // 2, x.shape[1] // 2
    win = x[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, -1).transpose(0, 2, 4, 1, 3)
    return win.reshape(h2, w2, -1, 4).argmax(axis=-1)


def lcn_signature(frame, model):
    """ReLU masks and pooling argmaxes of every LCN layer, from raw kernels."""
    from tancount.lcn import LCN_LAYERS
    from tancount.tensor import conv2d_forward, maxpool2_forward

    x = np.asarray(frame, dtype=np.float64)
    sig = []
    for layer in LCN_LAYERS:
        if layer == "pool":
            sig.append(_pool_argmax(x))
            x = maxpool2_forward(x)
            continue
        name = layer[0]
        x = conv2d_forward(x, model.params[f"{name}.weight"].data, model.params[f"{name}.bias"].data)
        if name != "conv9":
            sig.append(x > 0)
            x = np.maximum(x, 0)
    return sig


def tan_signature(maps, gt, model):
    """ReLU masks, block-output signs and smooth-L1 branches of a TAN window loss."""
    from tancount.tensor import dilated_conv1d_forward

    prm = {k: v.data for k, v in model.params.items()}
    frames = maps.shape[0]
    v = maps.reshape(-1, 1).astype(np.float64)
    sig = []
    for s in range(model.cfg.blocks):
        p = f"block{s}"
        h = v @ prm[f"{p}.in.weight"] + prm[f"{p}.in.bias"]
        for i, d in enumerate(model.cfg.dilations(), 1):
            u = dilated_conv1d_forward(h, prm[f"{p}.layer{i}.w1"], prm[f"{p}.layer{i}.b1"], d)
            sig.append(u > 0)
            h = h + np.maximum(u, 0) @ prm[f"{p}.layer{i}.w2"] + prm[f"{p}.layer{i}.b2"]
        v = h @ prm[f"{p}.out.weight"] + prm[f"{p}.out.bias"]
        sig.append(np.sign(v))
        a = np.abs(v.reshape(frames, -1)).sum(axis=1)
        w = a / a.sum() if a.sum() > 0 else np.full(frames, 1.0 / frames)
        fused = np.tensordot(w, maps, axes=1)
        sig.append(np.abs(fused - gt) < 1)
    return sig

"""Shared test helpers."""

import numpy as np

from sphdiff import autodiff as ad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30)


def gradcheck(loss_fn, params, rng, n_entries=4, h_scale=1e-5):
    """Worst relative error between backward() gradients and central finite
    differences over randomly probed parameter entries."""
    loss = loss_fn()
    for p in params:
        p.grad = None
    ad.backward(loss)
    worst = 0.0
    for p in params:
        idx = rng.integers(0, p.value.size, size=min(n_entries, p.value.size))
        for fi in idx:
            orig = p.value.flat[fi]
            h = h_scale * max(1.0, abs(orig))
            p.value.flat[fi] = orig + h
            lp = float(loss_fn().value)
            p.value.flat[fi] = orig - h
            lm = float(loss_fn().value)
            p.value.flat[fi] = orig
            fd = (lp - lm) / (2 * h)
            got = p.grad.flat[fi] if p.grad is not None else 0.0
            worst = max(worst, abs(fd - got) / max(1.0, abs(fd)))
    return worst

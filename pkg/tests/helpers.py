"""Finite-difference utilities shared by the gradient tests."""
import numpy as np

from specmap import autodiff as ad


def directional_check(loss_fn, params, rng, h=1e-5):
    """Worst relative error between <grad, v> and a central difference along v.

    ``loss_fn()`` rebuilds the graph from the current parameter values; one
    random direction is drawn per parameter tensor.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    ad.backward(loss)
    # directional derivatives this small are at the round-off level of the loss
    floor = 1e-7 * max(1.0, abs(float(loss.data)))
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        v = rng.standard_normal(p.shape)
        base = p.data.copy()
        p.data = base + h * v
        up = float(loss_fn().data)
        p.data = base - h * v
        down = float(loss_fn().data)
        p.data = base
        fd = (up - down) / (2 * h)
        an = float((g * v).sum())
        err = abs(fd - an) / max(abs(fd), abs(an), floor)
        worst = max(worst, err)
    return worst

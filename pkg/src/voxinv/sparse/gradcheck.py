"""Finite-difference verification of reverse-mode gradients."""
import numpy as np

from .autograd import no_grad


def gradient_check(fn, params, h=1e-5, max_entries=None, seed=0, floor=1e-5):
    """Largest relative error between backprop and central differences.

    ``fn`` rebuilds the scalar loss from the current parameter values (which
    should be float64). ``max_entries`` caps how many entries per parameter
    are probed; a seeded random subset is used when it is exceeded.
    Returns ``inf`` if the loss is not finite.

    The relative error's denominator is ``max(|numeric|, |analytic|, floor)``.
    Central differences at ``h = 1e-5`` carry roughly 1e-12 of absolute
    roundoff, so entries below ``floor`` are effectively compared absolutely.
    """
    for p in params:
        p.grad = None
    loss = fn()
    if not np.all(np.isfinite(loss.data)):
        return float("inf")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    return float("inf")
                num = (fp - fm) / (2 * h)
                ana = float(a.reshape(-1)[i])
                denom = max(abs(num), abs(ana), floor)
                worst = max(worst, abs(num - ana) / denom)
    return worst

"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Denominator floor: coordinates whose gradients are both below this are
# compared absolutely, since FD round-off (~1e-11) dominates there.
REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple
    probes: int

    def ok(self, tol=1e-4):
        return self.max_rel_error <= tol


def relative_error(a, n, floor=REL_FLOOR):
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(loss_fn, params, analytic, probes=100, step=1e-5, rng=None):
    """Compare ``analytic`` against central differences of ``loss_fn()``.

    ``loss_fn`` takes no arguments and reads the current values of the arrays
    in ``params`` (which are perturbed in place and restored). Probe
    coordinates are drawn uniformly over all parameter entries.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = (0.0, None, 0.0, 0.0)
    for flat in rng.integers(0, total, size=probes):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[i]
        idx = np.unravel_index(int(flat - offsets[i]), params[name].shape)
        arr = params[name]
        orig = arr[idx]
        arr[idx] = orig + step
        lp = loss_fn()
        arr[idx] = orig - step
        lm = loss_fn()
        arr[idx] = orig
        num = (lp - lm) / (2 * step)
        ana = float(analytic[name][idx])
        err = relative_error(ana, num)
        if err > worst[0] or worst[1] is None:
            worst = (err, (name, idx), ana, num)
    return GradCheckResult(max_rel_error=worst[0], worst=worst[1:], probes=probes)

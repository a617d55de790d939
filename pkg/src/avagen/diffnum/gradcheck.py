"""Central-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np


def grad_check(f, params, eps=1e-5, indices=None):
    """Compare a function's analytic gradient against central differences.

    f(params) must return (scalar value, flat gradient over
    params.values). Perturbs every parameter (or the given subset of
    indices) by +/- eps and reports the maximum relative error
        |analytic - central| / (|analytic| + |central| + 1e-12).
    Non-finite differences surface as inf rather than raising.
    """
    _, analytic = f(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    idx = range(params.values.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = params.values[i]
        params.values[i] = orig + eps
        fp = f(params)[0]
        params.values[i] = orig - eps
        fm = f(params)[0]
        params.values[i] = orig
        central = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - central) / (abs(analytic[i]) + abs(central) + 1e-12)
        if not np.isfinite(err):
            err = np.inf
        worst = max(worst, float(err))
    return worst

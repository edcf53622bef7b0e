"""Shared oracle helpers for the suite.

The finite-difference oracle lives here, in the tests, so it stays
independent of the engine paths it checks. Central differences are only a
valid derivative estimate where the function is smooth over the step window,
so the kink helpers condition inputs away from ReLU zeros and pool ties.
"""

import numpy as np
import pytest

FD_STEP = 1e-3
REL_TOL = 1e-4


def central_difference(f, x, step=FD_STEP):
    """Central finite differences of scalar f() w.r.t. x (mutated in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        hi = f()
        flat[i] = saved - step
        lo = f()
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def rel_error(analytic, numeric):
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(np.asarray(analytic) - numeric).max(initial=0.0)) / scale


def away_from_zero(rng, shape, margin=0.05):
    """Normal draws pushed at least margin away from 0 (ReLU-kink safe)."""
    v = rng.standard_normal(shape)
    return np.sign(v) * (margin + np.abs(v))


def unique_max_windows(rng, shape, window, margin=0.02):
    """Input whose non-overlapping pool windows have unique maxima by at
    least margin (pool-tie safe); rejection sampled deterministically."""
    b, c, h, w = shape
    oh, ow = h // window, w // window
    while True:
        x = rng.standard_normal(shape)
        wins = x.reshape(b, c, oh, window, ow, window) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, window * window)
        top2 = np.sort(wins, axis=-1)[..., -2:]
        if float((top2[..., 1] - top2[..., 0]).min()) > margin:
            return x


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

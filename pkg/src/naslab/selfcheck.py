"""Built-in oracle suite behind the ``gradcheck`` CLI command.

Cross-checks the convolution engine against the naive patch-gather oracle and
every analytic gradient (layers, loss, activity penalty) against central
finite differences in float64.

Central differences are only a valid derivative estimate where the function
is smooth across the whole step window, so inputs for the kinked layers
(ReLU, max pool) are constructed with a margin between every activation and
its nearest kink; the toy network keeps its pre-activations strictly positive
for the same reason.
"""

from __future__ import annotations

import numpy as np

from .metrics import patch_gather_conv2d
from .nn import (BatchNorm, Conv2D, Dense, MaxPool2D, MeasurePoint, Network,
                 ReLU, cross_entropy_loss)
from .regularizer import nas_penalty, nas_penalty_gradient

FD_STEP = 1e-3
REL_TOL = 1e-4


def numerical_gradient(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. x, mutating x in place."""
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


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def margin_values(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    """Standard normals pushed at least ``margin`` away from zero, so a ReLU
    mask cannot flip inside the finite-difference window."""
    v = rng.standard_normal(shape)
    return np.sign(v) * (margin + np.abs(v))


def pool_safe_input(rng: np.random.Generator, shape, window: int,
                    margin: float = 0.02) -> np.ndarray:
    """Random input whose pool windows all have a unique maximum with the
    given margin (rejection sampled; deterministic in the rng state)."""
    b, c, h, w = shape
    oh, ow = h // window, w // window
    while True:
        x = rng.standard_normal(shape)
        wins = x.reshape(b, c, oh, window, ow, window) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, window * window)
        top2 = np.sort(wins, axis=-1)[..., -2:]
        if float((top2[..., 1] - top2[..., 0]).min()) > margin:
            return x


def _positive_toy_network(rng: np.random.Generator) -> Network:
    """conv-relu-conv-relu-dense toy whose pre-activations stay strictly
    positive on positive inputs: no kink lies inside any FD window."""
    conv1 = Conv2D(2, 3, 3, stride=1, padding=1, rng=rng, dtype=np.float64)
    conv2 = Conv2D(3, 4, 3, stride=1, padding=1, rng=rng, dtype=np.float64)
    head = Dense(4 * 5 * 5, 5, rng=rng, dtype=np.float64)
    for conv in (conv1, conv2):
        conv.weights = rng.uniform(0.05, 0.25, size=conv.weights.shape)
        conv.bias = rng.uniform(0.3, 0.5, size=conv.bias.shape)
    layers = [
        ("conv1", conv1), ("conv1_relu", ReLU()),
        ("conv2", conv2), ("conv2_relu", ReLU()),
        ("head", head),
    ]
    points = [MeasurePoint("conv1", 0, True), MeasurePoint("conv2", 2, True),
              MeasurePoint("head", 4, False)]
    return Network(layers, points)


def check_conv_oracle(configs: int = 20, seed: int = 7) -> float:
    """Max abs difference between engine conv and the patch oracle over
    randomized shapes, strides, and paddings."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(configs):
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(2, 6))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        sh, sw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        ph, pw = int(rng.integers(0, 2)), int(rng.integers(0, 2))
        h = int(rng.integers(kh, kh + 6))
        w = int(rng.integers(kw, kw + 6))
        b = int(rng.integers(1, 4))
        layer = Conv2D(cin, cout, (kh, kw), stride=(sh, sw), padding=(ph, pw),
                       rng=rng, dtype=np.float64)
        x = rng.standard_normal((b, cin, h, w))
        worst = max(worst, float(np.abs(layer.forward(x) -
                                        patch_gather_conv2d(x, layer)).max()))
    return worst


def check_network_gradients(seed: int = 11) -> float:
    """Relative error of analytic vs numeric gradients for the 2-conv toy
    network under cross entropy plus the activity penalty on both convs."""
    rng = np.random.default_rng(seed)
    net = _positive_toy_network(rng)
    x = rng.uniform(0.5, 1.5, size=(2, 2, 5, 5))
    labels = np.array([1, 3])
    coeffs = {"conv1": 1.0 / 25.0, "conv2": 1.0 / 25.0}
    point_index = {mp.name: mp.layer_index for mp in net.measure_points}

    def total_loss() -> float:
        logits, recorded = net.forward(x, train=True, record=True)
        loss, _ = cross_entropy_loss(logits, labels)
        return loss + nas_penalty({n: recorded[n] for n in coeffs}, coeffs).total

    logits, recorded = net.forward(x, train=True, record=True)
    _, dlogits = cross_entropy_loss(logits, labels)
    extra = {point_index[n]: nas_penalty_gradient(recorded[n], lam)
             for n, lam in coeffs.items()}
    net.backward(dlogits, extra)
    worst = 0.0
    for name, attr, layer in net.parameters():
        analytic = getattr(layer, "grad_" + attr)
        numeric = numerical_gradient(total_loss, getattr(layer, attr))
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_single_layers(seed: int = 13) -> float:
    """Gradient check of each layer kind in isolation through a quadratic
    readout loss. Kinked layers get margin-conditioned inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = [
        (Conv2D(2, 3, 3, padding=1, rng=rng, dtype=np.float64),
         rng.standard_normal((2, 2, 5, 5))),
        (Dense(12, 4, rng=rng, dtype=np.float64), rng.standard_normal((3, 12))),
        (BatchNorm(3, dtype=np.float64), rng.standard_normal((4, 3, 4, 4))),
        (ReLU(), margin_values(rng, (3, 5))),
        (MaxPool2D(2), pool_safe_input(rng, (2, 2, 4, 4), 2)),
    ]
    for layer, x in cases:
        weights = rng.standard_normal(layer.forward(x, train=True).shape)

        def loss() -> float:
            out = layer.forward(x, train=True)
            return float(0.5 * np.sum(weights * out * out))

        out = layer.forward(x, train=True)
        dx = layer.backward(weights * out)
        worst = max(worst, relative_error(dx, numerical_gradient(loss, x)))
        for attr in layer.trainable:
            param = getattr(layer, attr)
            if param is None:
                continue
            layer.forward(x, train=True)
            layer.backward(weights * layer.forward(x, train=True))
            analytic = getattr(layer, "grad_" + attr)
            worst = max(worst, relative_error(analytic, numerical_gradient(loss, param)))
    return worst


def run_all(log=print) -> bool:
    checks = [
        ("conv engine vs patch-gather oracle (abs diff)", check_conv_oracle, 1e-6),
        ("layer gradients vs finite differences (rel err)", check_single_layers, REL_TOL),
        ("network+penalty gradients vs finite differences (rel err)",
         check_network_gradients, REL_TOL),
    ]
    ok = True
    for label, fn, tol in checks:
        value = fn()
        passed = value <= tol
        ok &= passed
        log(f"[{'PASS' if passed else 'FAIL'}] {label}: {value:.3e} (tol {tol:.0e})")
    return ok

"""Pure numpy implementations of the hot kernels.

Selected when the compiled extension is unavailable (or forced via
NOISEPLAN_PURE=1). Must implement exactly the same math as _core.pyx: a
two-hidden-layer MLP whose raw weights are squared so the effective weights
are nonnegative, tanh activations, full-batch gradient descent on MSE, and
the planner's nearest-node scan.
"""

from __future__ import annotations

import numpy as np


def unpack(raw, n_in, h1, h2):
    i = 0
    w1 = raw[i:i + n_in * h1].reshape(n_in, h1); i += n_in * h1
    b1 = raw[i:i + h1]; i += h1
    w2 = raw[i:i + h1 * h2].reshape(h1, h2); i += h1 * h2
    b2 = raw[i:i + h2]; i += h2
    w3 = raw[i:i + h2]; i += h2
    b3 = raw[i]
    return w1, b1, w2, b2, w3, b3


def n_params(n_in, h1, h2):
    return n_in * h1 + h1 + h1 * h2 + h2 + h2 + 1


def mlp_forward(raw, X, h1, h2):
    """Monotone-MLP forward pass. X is (n, n_in) normalized; returns (n,)."""
    raw = np.asarray(raw, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    w1, b1, w2, b2, w3, b3 = unpack(raw, X.shape[1], h1, h2)
    a1 = np.tanh(X @ (w1 * w1) + b1)
    a2 = np.tanh(a1 @ (w2 * w2) + b2)
    return a2 @ (w3 * w3) + b3


def mlp_train(raw, X, t, h1, h2, lr, epochs):
    """Full-batch gradient descent on MSE with squared-weight reparameterization.

    Returns (updated raw params, per-epoch loss array, epochs completed).
    Stops early if the loss goes non-finite; the caller decides how to react.
    """
    raw = np.array(raw, dtype=np.float64, copy=True)
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    n, n_in = X.shape
    losses = np.zeros(epochs, dtype=np.float64)
    w1r, b1, w2r, b2, w3r, _ = unpack(raw, n_in, h1, h2)
    # b3 must be writable through `raw`; track its flat index
    b3_idx = raw.size - 1
    np_err = np.errstate(over="ignore", invalid="ignore")
    with np_err:
        return _train_loop(raw, X, t, h1, h2, lr, epochs, losses,
                           w1r, b1, w2r, b2, w3r, b3_idx, n)


def _train_loop(raw, X, t, h1, h2, lr, epochs, losses,
                w1r, b1, w2r, b2, w3r, b3_idx, n):
    for epoch in range(epochs):
        s1, s2, s3 = w1r * w1r, w2r * w2r, w3r * w3r
        z1 = X @ s1 + b1
        a1 = np.tanh(z1)
        z2 = a1 @ s2 + b2
        a2 = np.tanh(z2)
        y = a2 @ s3 + raw[b3_idx]
        err = y - t
        loss = float(err @ err) / n
        losses[epoch] = loss
        if not np.isfinite(loss):
            return raw, losses, epoch
        dy = (2.0 / n) * err
        g_b3 = dy.sum()
        g_w3 = (a2.T @ dy) * (2.0 * w3r)
        da2 = np.outer(dy, s3)
        dz2 = da2 * (1.0 - a2 * a2)
        g_b2 = dz2.sum(axis=0)
        g_w2 = (a1.T @ dz2) * (2.0 * w2r)
        da1 = dz2 @ s2.T
        dz1 = da1 * (1.0 - a1 * a1)
        g_b1 = dz1.sum(axis=0)
        g_w1 = (X.T @ dz1) * (2.0 * w1r)
        w1r -= lr * g_w1
        b1 -= lr * g_b1
        w2r -= lr * g_w2
        b2 -= lr * g_b2
        w3r -= lr * g_w3
        raw[b3_idx] -= lr * g_b3
    return raw, losses, epochs


def nearest_state(xs, ys, zs, thetas, qx, qy, qz, qtheta):
    """Index of the tree node closest to the query in the position+heading
    metric (squared distance compared; ties go to the lowest index)."""
    dth = np.mod(thetas - qtheta + np.pi, 2.0 * np.pi) - np.pi
    d2 = (
        (xs - qx) ** 2
        + (ys - qy) ** 2
        + (zs - qz) ** 2
        + dth * dth / (2.0 * np.pi)
    )
    return int(np.argmin(d2))

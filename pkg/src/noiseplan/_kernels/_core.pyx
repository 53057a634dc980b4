# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: monotone-MLP forward/training and nearest-node scan.

The math here must stay in lockstep with _fallback.py; the test suite compares
both backends on the same inputs.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fmod, tanh, isfinite, pi

cnp.import_array()


def mlp_forward(double[::1] raw, double[:, ::1] X, int h1, int h2):
    """Monotone-MLP forward pass. X is (n, n_in) normalized; returns (n,)."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t n_in = X.shape[1]
    cdef Py_ssize_t o_b1 = n_in * h1
    cdef Py_ssize_t o_w2 = o_b1 + h1
    cdef Py_ssize_t o_b2 = o_w2 + h1 * h2
    cdef Py_ssize_t o_w3 = o_b2 + h2
    cdef Py_ssize_t o_b3 = o_w3 + h2
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] a1 = np.empty(h1, dtype=np.float64)
    cdef double[::1] a2 = np.empty(h2, dtype=np.float64)
    cdef Py_ssize_t i, j, k
    cdef double acc, w
    with nogil:
        for i in range(n):
            for j in range(h1):
                acc = raw[o_b1 + j]
                for k in range(n_in):
                    w = raw[k * h1 + j]
                    acc += X[i, k] * w * w
                a1[j] = tanh(acc)
            for j in range(h2):
                acc = raw[o_b2 + j]
                for k in range(h1):
                    w = raw[o_w2 + k * h2 + j]
                    acc += a1[k] * w * w
                a2[j] = tanh(acc)
            acc = raw[o_b3]
            for j in range(h2):
                w = raw[o_w3 + j]
                acc += a2[j] * w * w
            out[i] = acc
    return out_arr


def mlp_train(double[::1] raw0, double[:, ::1] X, double[::1] t,
              int h1, int h2, double lr, int epochs):
    """Full-batch gradient descent on MSE with squared-weight reparameterization.

    Returns (updated raw params, per-epoch loss array, epochs completed).
    Stops early if the loss goes non-finite; the caller decides how to react.
    """
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t n_in = X.shape[1]
    cdef Py_ssize_t o_b1 = n_in * h1
    cdef Py_ssize_t o_w2 = o_b1 + h1
    cdef Py_ssize_t o_b2 = o_w2 + h1 * h2
    cdef Py_ssize_t o_w3 = o_b2 + h2
    cdef Py_ssize_t o_b3 = o_w3 + h2

    raw_arr = np.array(raw0, dtype=np.float64, copy=True)
    losses_arr = np.zeros(epochs, dtype=np.float64)
    cdef double[::1] raw = raw_arr
    cdef double[::1] losses = losses_arr

    cdef double[:, ::1] a1 = np.empty((n, h1), dtype=np.float64)
    cdef double[:, ::1] a2 = np.empty((n, h2), dtype=np.float64)
    cdef double[::1] dy = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] dz2 = np.empty((n, h2), dtype=np.float64)
    cdef double[:, ::1] dz1 = np.empty((n, h1), dtype=np.float64)
    cdef double[::1] s1 = np.empty(o_b1, dtype=np.float64)
    cdef double[::1] s2 = np.empty(h1 * h2, dtype=np.float64)
    cdef double[::1] s3 = np.empty(h2, dtype=np.float64)
    cdef double[::1] grad = np.zeros(o_b3 + 1, dtype=np.float64)

    cdef Py_ssize_t epoch, i, j, k, done
    cdef double acc, loss, e, d
    done = epochs
    with nogil:
        for epoch in range(epochs):
            for j in range(o_b1):
                s1[j] = raw[j] * raw[j]
            for j in range(h1 * h2):
                s2[j] = raw[o_w2 + j] * raw[o_w2 + j]
            for j in range(h2):
                s3[j] = raw[o_w3 + j] * raw[o_w3 + j]
            loss = 0.0
            for i in range(n):
                for j in range(h1):
                    acc = raw[o_b1 + j]
                    for k in range(n_in):
                        acc += X[i, k] * s1[k * h1 + j]
                    a1[i, j] = tanh(acc)
                for j in range(h2):
                    acc = raw[o_b2 + j]
                    for k in range(h1):
                        acc += a1[i, k] * s2[k * h2 + j]
                    a2[i, j] = tanh(acc)
                acc = raw[o_b3]
                for j in range(h2):
                    acc += a2[i, j] * s3[j]
                e = acc - t[i]
                loss += e * e
                dy[i] = 2.0 * e / n
            loss /= n
            losses[epoch] = loss
            if not isfinite(loss):
                done = epoch
                break

            for j in range(o_b3 + 1):
                grad[j] = 0.0
            for i in range(n):
                grad[o_b3] += dy[i]
                for j in range(h2):
                    grad[o_w3 + j] += a2[i, j] * dy[i]
                    d = dy[i] * s3[j] * (1.0 - a2[i, j] * a2[i, j])
                    dz2[i, j] = d
                    grad[o_b2 + j] += d
                for j in range(h1):
                    acc = 0.0
                    for k in range(h2):
                        acc += dz2[i, k] * s2[j * h2 + k]
                    d = acc * (1.0 - a1[i, j] * a1[i, j])
                    dz1[i, j] = d
                    grad[o_b1 + j] += d
                for j in range(h1):
                    for k in range(h2):
                        grad[o_w2 + j * h2 + k] += a1[i, j] * dz2[i, k]
                for k in range(n_in):
                    for j in range(h1):
                        grad[k * h1 + j] += X[i, k] * dz1[i, j]
            for j in range(o_b1):
                grad[j] *= 2.0 * raw[j]
            for j in range(h1 * h2):
                grad[o_w2 + j] *= 2.0 * raw[o_w2 + j]
            for j in range(h2):
                grad[o_w3 + j] *= 2.0 * raw[o_w3 + j]
            for j in range(o_b3 + 1):
                raw[j] -= lr * grad[j]
    return raw_arr, losses_arr, done


def nearest_state(double[::1] xs, double[::1] ys, double[::1] zs,
                  double[::1] thetas, double qx, double qy, double qz,
                  double qtheta):
    """Index of the tree node closest to the query in the position+heading
    metric (squared distance compared; ties go to the lowest index)."""
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t i, best
    cdef double d2, best_d2, dx, dy, dz, dth
    cdef double two_pi = 2.0 * pi
    best = 0
    best_d2 = 0.0
    with nogil:
        for i in range(n):
            dx = xs[i] - qx
            dy = ys[i] - qy
            dz = zs[i] - qz
            dth = fmod(thetas[i] - qtheta + pi, two_pi)
            if dth < 0.0:
                dth += two_pi
            dth -= pi
            d2 = dx * dx + dy * dy + dz * dz + dth * dth / two_pi
            if i == 0 or d2 < best_d2:
                best_d2 = d2
                best = i
    return best

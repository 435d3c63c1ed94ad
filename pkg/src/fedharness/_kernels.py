"""Hot numeric kernels, each in a numba loop form and a vectorised numpy form.

The public names at the bottom resolve to one or the other depending on
``_accel.USE_NUMBA``. Both forms are importable for benchmarking and for
cross-checking in the test suite.

Parameter layout (shared by every kernel): per layer, the weight matrix in
row-major ``(fan_in, fan_out)`` order followed by the bias vector.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit


# -- numpy forms ---------------------------------------------------------------

def _log_softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logistic_loss_grad_np(params, X, y, num_classes):
    n, d = X.shape
    C = num_classes
    W = params[: d * C].reshape(d, C)
    b = params[d * C:]
    logp = _log_softmax_np(X @ W + b)
    rows = np.arange(n)
    loss = -logp[rows, y].sum() / n
    g = np.exp(logp)
    g[rows, y] -= 1.0
    g /= n
    grad = np.empty_like(params)
    grad[: d * C] = (X.T @ g).ravel()
    grad[d * C:] = g.sum(axis=0)
    return loss, grad


def mlp_loss_grad_np(params, X, y, hidden, num_classes):
    n, d = X.shape
    H, C = hidden, num_classes
    o1 = d * H
    o2 = o1 + H
    o3 = o2 + H * C
    W1 = params[:o1].reshape(d, H)
    b1 = params[o1:o2]
    W2 = params[o2:o3].reshape(H, C)
    b2 = params[o3:]
    pre = X @ W1 + b1
    h = np.maximum(pre, 0.0)
    logp = _log_softmax_np(h @ W2 + b2)
    rows = np.arange(n)
    loss = -logp[rows, y].sum() / n
    gz = np.exp(logp)
    gz[rows, y] -= 1.0
    gz /= n
    gh = (gz @ W2.T) * (pre > 0.0)
    grad = np.empty_like(params)
    grad[:o1] = (X.T @ gh).ravel()
    grad[o1:o2] = gh.sum(axis=0)
    grad[o2:o3] = (h.T @ gz).ravel()
    grad[o3:] = gz.sum(axis=0)
    return loss, grad


def pairwise_sq_dists_np(U):
    diff = U[:, None, :] - U[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


# -- loop forms (compiled by numba when enabled) ---------------------------------

def _logistic_loss_grad_loop(params, X, y, num_classes):
    n, d = X.shape
    C = num_classes
    off = d * C
    grad = np.zeros(params.shape[0])
    z = np.empty(C)
    loss = 0.0
    for i in range(n):
        for c in range(C):
            s = params[off + c]
            for k in range(d):
                s += X[i, k] * params[k * C + c]
            z[c] = s
        m = z[0]
        for c in range(1, C):
            if z[c] > m:
                m = z[c]
        zy = z[y[i]] - m
        tot = 0.0
        for c in range(C):
            z[c] = math.exp(z[c] - m)
            tot += z[c]
        loss += math.log(tot) - zy
        for c in range(C):
            g = z[c] / tot
            if c == y[i]:
                g -= 1.0
            g /= n
            grad[off + c] += g
            for k in range(d):
                grad[k * C + c] += X[i, k] * g
    return loss / n, grad


def _mlp_loss_grad_loop(params, X, y, hidden, num_classes):
    n, d = X.shape
    H, C = hidden, num_classes
    o1 = d * H
    o2 = o1 + H
    o3 = o2 + H * C
    grad = np.zeros(params.shape[0])
    pre = np.empty(H)
    h = np.empty(H)
    z = np.empty(C)
    gh = np.empty(H)
    loss = 0.0
    for i in range(n):
        for j in range(H):
            s = params[o1 + j]
            for k in range(d):
                s += X[i, k] * params[k * H + j]
            pre[j] = s
            h[j] = s if s > 0.0 else 0.0
        for c in range(C):
            s = params[o3 + c]
            for j in range(H):
                s += h[j] * params[o2 + j * C + c]
            z[c] = s
        m = z[0]
        for c in range(1, C):
            if z[c] > m:
                m = z[c]
        zy = z[y[i]] - m
        tot = 0.0
        for c in range(C):
            z[c] = math.exp(z[c] - m)
            tot += z[c]
        loss += math.log(tot) - zy
        for j in range(H):
            gh[j] = 0.0
        for c in range(C):
            g = z[c] / tot
            if c == y[i]:
                g -= 1.0
            g /= n
            grad[o3 + c] += g
            for j in range(H):
                grad[o2 + j * C + c] += h[j] * g
                gh[j] += params[o2 + j * C + c] * g
        for j in range(H):
            if pre[j] > 0.0:
                g = gh[j]
                grad[o1 + j] += g
                for k in range(d):
                    grad[k * H + j] += X[i, k] * g
    return loss / n, grad


def _pairwise_sq_dists_loop(U):
    n, d = U.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for k in range(d):
                t = U[i, k] - U[j, k]
                s += t * t
            out[i, j] = s
            out[j, i] = s
    return out


logistic_loss_grad_jit = njit(_logistic_loss_grad_loop)
mlp_loss_grad_jit = njit(_mlp_loss_grad_loop)
pairwise_sq_dists_jit = njit(_pairwise_sq_dists_loop)

if USE_NUMBA:
    logistic_loss_grad = logistic_loss_grad_jit
    mlp_loss_grad = mlp_loss_grad_jit
    pairwise_sq_dists = pairwise_sq_dists_jit
else:
    logistic_loss_grad = logistic_loss_grad_np
    mlp_loss_grad = mlp_loss_grad_np
    pairwise_sq_dists = pairwise_sq_dists_np

BACKEND = "numba" if USE_NUMBA else "numpy"

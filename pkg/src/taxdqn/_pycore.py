"""Pure numpy kernels for the two-head MLP.

Parameters live in one flat buffer; ``layout`` lists ``(w_off, b_off, n_in,
n_out)`` per layer in the order trunk..., head1, head2.  Weights are stored
row-major with shape ``(n_in, n_out)``.
"""
from __future__ import annotations

import numpy as np

NAME = "numpy"


def _views(flat, layout):
    return [(flat[w:w + i * o].reshape(i, o), flat[b:b + o]) for w, b, i, o in layout]


def forward(flat, layout, X):
    """Return ``(q1, q2, acts)``; ``acts[k]`` is the input to trunk layer k,
    ``acts[-1]`` the trunk output."""
    layers = _views(flat, layout)
    h = X
    acts = [h]
    for W, b in layers[:-2]:
        h = h @ W
        h += b
        np.maximum(h, 0.0, out=h)
        acts.append(h)
    (W1, b1), (W2, b2) = layers[-2:]
    return h @ W1 + b1, h @ W2 + b2, acts


def backward(flat, layout, acts, g1, g2, grad):
    """Accumulate nothing: overwrite ``grad`` with dL/dparams."""
    layers = _views(flat, layout)
    glayers = _views(grad, layout)
    h = acts[-1]
    (W1, _), (W2, _) = layers[-2:]
    (gW1, gb1), (gW2, gb2) = glayers[-2:]
    np.dot(h.T, g1, out=gW1)
    gb1[:] = g1.sum(axis=0)
    np.dot(h.T, g2, out=gW2)
    gb2[:] = g2.sum(axis=0)
    d = g1 @ W1.T + g2 @ W2.T
    n_trunk = len(layers) - 2
    for k in range(n_trunk - 1, -1, -1):
        d *= acts[k + 1] > 0.0
        gW, gb = glayers[k]
        np.dot(acts[k].T, d, out=gW)
        gb[:] = d.sum(axis=0)
        if k:
            d = d @ layers[k][0].T
    return grad


def adam(flat, grad, m, v, t, lr, b1, b2, eps):
    """One bias-corrected Adam update in place; returns the new step count."""
    t += 1
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    # same as lr * (m/c1) / (sqrt(v/c2) + eps), in the form the compiled kernel uses
    rc2 = np.sqrt(c2)
    flat -= (lr * rc2 / c1) * m / (np.sqrt(v) + eps * rc2)
    return t


def greedy(flat, layout, x, offered):
    q1, q2, _ = forward(flat, layout, x[None, :])
    a2 = int(q2[0, 1] > q2[0, 0]) if offered else 0
    return int(np.argmax(q1[0])), a2


def ddqn_targets(online, target, layout, util, next_obs, next_offered, gamma):
    """Per-head double-Q targets; head 2 is restricted to 0 where no offer."""
    n = len(util)
    q1o, q2o, _ = forward(online, layout, next_obs)
    q1t, q2t, _ = forward(target, layout, next_obs)
    rows = np.arange(n)
    a1 = q1o.argmax(axis=1)
    a2 = np.where(next_offered, q2o[:, 1] > q2o[:, 0], False).astype(np.int64)
    return util + gamma * q1t[rows, a1], util + gamma * q2t[rows, a2]


def train_step(online, target, grad, m, v, t, lr, b1, b2, eps, layout,
               obs, a1, a2, util, next_obs, next_offered, gamma):
    """Fused double-DQN minibatch update.  Returns ``(loss, t)``."""
    n = len(util)
    y1, y2 = ddqn_targets(online, target, layout, util, next_obs, next_offered, gamma)
    q1, q2, acts = forward(online, layout, obs)
    rows = np.arange(n)
    d1 = y1 - q1[rows, a1]
    d2 = y2 - q2[rows, a2]
    loss = float(np.mean(d1 * d1 + d2 * d2))
    g1 = np.zeros_like(q1)
    g2 = np.zeros_like(q2)
    g1[rows, a1] = -2.0 * d1 / n
    g2[rows, a2] = -2.0 * d2 / n
    backward(online, layout, acts, g1, g2, grad)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite loss or gradient (loss={loss})")
    t = adam(online, grad, m, v, t, lr, b1, b2, eps)
    return loss, t

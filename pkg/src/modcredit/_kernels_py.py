"""Pure numpy versions of the numeric kernels.

Used when the compiled extension is unavailable or ``MODCREDIT_PURE=1``.  Every
function here has a twin of the same signature in ``_kernels.pyx``.

Stacked-MLP layout: ``M`` independent networks with two ReLU hidden layers.
``W1 (M, I, H1)``, ``b1 (M, H1)``, ``W2 (M, H1, H2)``, ``b2 (M, H2)``,
``W3 (M, H2, O)``, ``b3 (M, O)``.  Inputs ``x (B, I)`` are shared by all nets.
Activations are kept as ``(M, B, .)``.
"""

import numpy as np


def stack_forward(W1, b1, W2, b2, W3, b3, x):
    a1 = np.matmul(x, W1) + b1[:, None, :]
    h1 = np.maximum(a1, 0.0)
    a2 = np.matmul(h1, W2) + b2[:, None, :]
    h2 = np.maximum(a2, 0.0)
    out = np.matmul(h2, W3) + b3[:, None, :]
    return h1, h2, out


def stack_backward(W2, W3, x, h1, h2, dout):
    """Parameter gradients for ``sum(out * dout)``; ``dout`` is ``(M, B, O)``."""
    gW3 = np.matmul(h2.transpose(0, 2, 1), dout)
    gb3 = dout.sum(axis=1)
    dh2 = np.matmul(dout, W3.transpose(0, 2, 1))
    dh2 *= h2 > 0
    gW2 = np.matmul(h1.transpose(0, 2, 1), dh2)
    gb2 = dh2.sum(axis=1)
    dh1 = np.matmul(dh2, W2.transpose(0, 2, 1))
    dh1 *= h1 > 0
    gW1 = np.einsum("bi,mbh->mih", x, dh1)
    gb1 = dh1.sum(axis=1)
    return gW1, gb1, gW2, gb2, gW3, gb3


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step, active):
    """In-place Adam on a stacked array; net ``k`` moves only if ``active[k]``.

    ``step`` holds the per-net step count *after* this update.
    """
    for k in np.flatnonzero(np.asarray(active)):
        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k]
        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k]
        mhat = m[k] / (1.0 - beta1 ** step[k])
        vhat = v[k] / (1.0 - beta2 ** step[k])
        p[k] -= lr * mhat / (np.sqrt(vhat) + eps)


def gae(rewards, values, next_values, dones, gamma, lam):
    """Backward GAE recursion; ``dones[t]`` cuts the trace after step ``t``."""
    T = len(rewards)
    adv = np.zeros(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_values[t] - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of ``_kernels_py``; same signatures and array layouts."""

import numpy as np
from libc.math cimport sqrt, pow


def stack_forward(double[:, :, ::1] W1, double[:, ::1] b1, double[:, :, ::1] W2, double[:, ::1] b2,
                  double[:, :, ::1] W3, double[:, ::1] b3, double[:, ::1] x):
    cdef Py_ssize_t M = W1.shape[0], I = W1.shape[1], H1 = W1.shape[2]
    cdef Py_ssize_t H2 = W2.shape[2], O = W3.shape[2], B = x.shape[0]
    h1_a = np.empty((M, B, H1))
    h2_a = np.empty((M, B, H2))
    out_a = np.empty((M, B, O))
    cdef double[:, :, ::1] h1 = h1_a, h2 = h2_a, out = out_a
    cdef Py_ssize_t m, b, i, j
    cdef double s, xv
    with nogil:
        for m in range(M):
            for b in range(B):
                for j in range(H1):
                    h1[m, b, j] = b1[m, j]
                for i in range(I):
                    xv = x[b, i]
                    if xv != 0.0:
                        for j in range(H1):
                            h1[m, b, j] += xv * W1[m, i, j]
                for j in range(H1):
                    if h1[m, b, j] < 0.0:
                        h1[m, b, j] = 0.0
                for j in range(H2):
                    h2[m, b, j] = b2[m, j]
                for i in range(H1):
                    xv = h1[m, b, i]
                    if xv != 0.0:
                        for j in range(H2):
                            h2[m, b, j] += xv * W2[m, i, j]
                for j in range(H2):
                    if h2[m, b, j] < 0.0:
                        h2[m, b, j] = 0.0
                for j in range(O):
                    s = b3[m, j]
                    for i in range(H2):
                        s += h2[m, b, i] * W3[m, i, j]
                    out[m, b, j] = s
    return h1_a, h2_a, out_a


def stack_backward(double[:, :, ::1] W2, double[:, :, ::1] W3, double[:, ::1] x,
                   double[:, :, ::1] h1, double[:, :, ::1] h2, double[:, :, ::1] dout):
    cdef Py_ssize_t M = W2.shape[0], H1 = W2.shape[1], H2 = W2.shape[2], O = W3.shape[2]
    cdef Py_ssize_t B = x.shape[0], I = x.shape[1]
    gW1_a = np.zeros((M, I, H1)); gb1_a = np.zeros((M, H1))
    gW2_a = np.zeros((M, H1, H2)); gb2_a = np.zeros((M, H2))
    gW3_a = np.zeros((M, H2, O)); gb3_a = np.zeros((M, O))
    cdef double[:, :, ::1] gW1 = gW1_a, gW2 = gW2_a, gW3 = gW3_a
    cdef double[:, ::1] gb1 = gb1_a, gb2 = gb2_a, gb3 = gb3_a
    dh1_a = np.empty(H1); dh2_a = np.empty(H2)
    cdef double[::1] dh1 = dh1_a, dh2 = dh2_a
    cdef Py_ssize_t m, b, i, j
    cdef double s, d, xv
    with nogil:
        for m in range(M):
            for b in range(B):
                for j in range(O):
                    d = dout[m, b, j]
                    gb3[m, j] += d
                    if d != 0.0:
                        for i in range(H2):
                            gW3[m, i, j] += h2[m, b, i] * d
                for i in range(H2):
                    if h2[m, b, i] > 0.0:
                        s = 0.0
                        for j in range(O):
                            s += dout[m, b, j] * W3[m, i, j]
                        dh2[i] = s
                    else:
                        dh2[i] = 0.0
                for j in range(H2):
                    gb2[m, j] += dh2[j]
                for i in range(H1):
                    xv = h1[m, b, i]
                    if xv > 0.0:
                        s = 0.0
                        for j in range(H2):
                            gW2[m, i, j] += xv * dh2[j]
                            s += dh2[j] * W2[m, i, j]
                        dh1[i] = s
                    else:
                        dh1[i] = 0.0
                for j in range(H1):
                    gb1[m, j] += dh1[j]
                for i in range(I):
                    xv = x[b, i]
                    if xv != 0.0:
                        for j in range(H1):
                            gW1[m, i, j] += xv * dh1[j]
    return gW1_a, gb1_a, gW2_a, gb2_a, gW3_a, gb3_a


def adam_update(p, g, m, v, double lr, double beta1, double beta2, double eps, step, active):
    cdef Py_ssize_t M = p.shape[0]
    cdef double[:, ::1] P = p.reshape(M, -1), G = g.reshape(M, -1)
    cdef double[:, ::1] Mm = m.reshape(M, -1), V = v.reshape(M, -1)
    cdef double[::1] st = np.ascontiguousarray(step, dtype=np.float64)
    cdef unsigned char[::1] act = np.ascontiguousarray(active, dtype=np.uint8)
    cdef Py_ssize_t k, i, n = P.shape[1]
    cdef double c1, c2, gi, mh, vh
    with nogil:
        for k in range(M):
            if not act[k]:
                continue
            c1 = 1.0 - pow(beta1, st[k])
            c2 = 1.0 - pow(beta2, st[k])
            for i in range(n):
                gi = G[k, i]
                Mm[k, i] = beta1 * Mm[k, i] + (1.0 - beta1) * gi
                V[k, i] = beta2 * V[k, i] + (1.0 - beta2) * gi * gi
                mh = Mm[k, i] / c1
                vh = V[k, i] / c2
                P[k, i] -= lr * mh / (sqrt(vh) + eps)


def gae(double[::1] rewards, double[::1] values, double[::1] next_values, double[::1] dones,
        double gamma, double lam):
    cdef Py_ssize_t T = rewards.shape[0], t
    adv_a = np.zeros(T)
    cdef double[::1] adv = adv_a
    cdef double running = 0.0, delta
    with nogil:
        for t in range(T - 1, -1, -1):
            delta = rewards[t] + gamma * next_values[t] - values[t]
            running = delta + gamma * lam * (1.0 - dones[t]) * running
            adv[t] = running
    return adv_a

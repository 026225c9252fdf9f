"""Jitted implementations of the loop-bound kernels.

Same signatures and conventions as `numpy_impl`; loops are serial so both
backends are deterministic run to run. Compilation results are cached on
disk, so only the first call in a fresh environment pays the JIT cost.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def softplus(x):
    out = np.empty_like(x)
    flat = x.ravel()
    oflat = out.ravel()
    for i in range(flat.size):
        v = flat[i]
        if v > 0.0:
            oflat[i] = v + np.log1p(np.exp(-v))
        else:
            oflat[i] = np.log1p(np.exp(v))
    return out


@njit(cache=True)
def sigmoid(x):
    out = np.empty_like(x)
    flat = x.ravel()
    oflat = out.ravel()
    for i in range(flat.size):
        v = flat[i]
        if v >= 0.0:
            oflat[i] = 1.0 / (1.0 + np.exp(-v))
        else:
            e = np.exp(v)
            oflat[i] = e / (1.0 + e)
    return out


@njit(cache=True)
def softmax_xent_fwd(logits, labels):
    n, c = logits.shape
    probs = np.empty_like(logits)
    total = 0.0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        denom = 0.0
        for j in range(c):
            probs[i, j] = np.exp(logits[i, j] - m)
            denom += probs[i, j]
        for j in range(c):
            probs[i, j] /= denom
        total += np.log(denom) + m - logits[i, labels[i]]
    return total / n, probs


@njit(cache=True)
def softmax_xent_bwd(probs, labels, gout):
    n, c = probs.shape
    d = np.empty_like(probs)
    scale = gout / n
    for i in range(n):
        for j in range(c):
            d[i, j] = probs[i, j] * scale
        d[i, labels[i]] -= scale
    return d


@njit(cache=True)
def cox_nll(eta, events, group_start):
    n = eta.shape[0]
    emax = eta[0]
    for i in range(1, n):
        if eta[i] > emax:
            emax = eta[i]
    ex = np.empty(n)
    for i in range(n):
        ex[i] = np.exp(eta[i] - emax)

    n_events = 0.0
    for i in range(n):
        n_events += events[i]

    # forward sweep: running risk sum, per-group event count and denominator
    n_groups = 0
    for i in range(n):
        if group_start[i]:
            n_groups += 1
    risk = np.empty(n_groups)
    d_g = np.empty(n_groups)
    group_of = np.empty(n, dtype=np.int64)

    csum = 0.0
    g = -1
    dcur = 0.0
    for i in range(n):
        if group_start[i]:
            if g >= 0:
                d_g[g] = dcur
            g += 1
            dcur = 0.0
        csum += ex[i]
        risk[g] = csum
        dcur += events[i]
        group_of[i] = g
    d_g[g] = dcur

    loglik = 0.0
    for i in range(n):
        loglik += eta[i] * events[i]
    for g in range(n_groups):
        loglik -= d_g[g] * (np.log(risk[g]) + emax)
    loss = -loglik / n_events

    # suffix sums of d/S give each subject's accumulated hazard mass
    suffix = np.empty(n_groups)
    acc = 0.0
    for g in range(n_groups - 1, -1, -1):
        acc += d_g[g] / risk[g]
        suffix[g] = acc

    grad = np.empty(n)
    for i in range(n):
        grad[i] = -(events[i] - ex[i] * suffix[group_of[i]]) / n_events
    return loss, grad


@njit(cache=True)
def cindex_counts(risk, time, event):
    n = risk.shape[0]
    conc = 0
    tied = 0
    comparable = 0
    for i in range(n):
        if event[i] == 0:
            continue
        for j in range(n):
            if time[i] < time[j]:
                comparable += 1
                if risk[i] > risk[j]:
                    conc += 1
                elif risk[i] == risk[j]:
                    tied += 1
    return conc, tied, comparable


@njit(cache=True)
def wilcoxon_exact_counts(ranks2, w2):
    n = ranks2.shape[0]
    n_ge = 0.0
    n_le = 0.0
    for mask in range(2 ** n):
        s = 0
        m = mask
        for i in range(n):
            if m & 1:
                s += ranks2[i]
            m >>= 1
        if s >= w2:
            n_ge += 1.0
        if s <= w2:
            n_le += 1.0
    return n_ge, n_le, float(2 ** n)

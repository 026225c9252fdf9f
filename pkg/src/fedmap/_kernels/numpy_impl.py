"""Pure-numpy implementations of the loop-bound kernels.

This is the fallback backend; `fedmap._kernels.numba_impl` carries the
jitted twins. Both compute the same quantities with the same argument
conventions so the backends are interchangeable.
"""

import numpy as np


def softplus(x):
    """Overflow-safe log(1 + exp(x)) = max(x, 0) + log1p(exp(-|x|))."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    """Overflow-safe logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_xent_fwd(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax logits.

    Returns (loss, probs); probs are cached for the backward pass.
    Log-sum-exp is stabilised by the row max, so finite logits never
    produce an infinite loss.
    """
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    ex = np.exp(shifted)
    denom = ex.sum(axis=1, keepdims=True)
    probs = ex / denom
    n = logits.shape[0]
    lse = np.log(denom[:, 0]) + m[:, 0]
    nll = lse - logits[np.arange(n), labels]
    return float(nll.sum() / n), probs


def softmax_xent_bwd(probs, labels, gout):
    """d(mean NLL)/d(logits) = gout * (softmax - onehot) / batch."""
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d *= gout / n
    return d


def cox_nll(eta, events, group_start):
    """Breslow negative partial log-likelihood, mean per event, plus gradient.

    Inputs are pre-sorted by descending survival time; `group_start[i]` marks
    the first subject of each tie group. The risk set of an event at time t
    is every subject with time >= t, so the running sum of exp(eta) after a
    whole tie group has been added is the shared Breslow denominator for all
    events in that group.

    Returns (loss, grad) with grad in the same (sorted) order as eta.
    """
    n = eta.shape[0]
    emax = eta.max()
    ex = np.exp(eta - emax)

    # group boundaries -> per-group risk sums and event counts
    starts = np.flatnonzero(group_start)
    ends = np.append(starts[1:], n)
    csum = np.cumsum(ex)
    risk = csum[ends - 1]                     # scaled risk-set sum per group
    d_g = np.add.reduceat(events.astype(np.float64), starts)

    n_events = float(events.sum())
    loglik = float((eta * events).sum() - (d_g * (np.log(risk) + emax)).sum())
    loss = -loglik / n_events

    # grad_j = -(1/D) [event_j - exp(eta_j) * sum_{groups g with t_g <= t_j} d_g / S_g]
    ratio = d_g / risk
    suffix = np.cumsum(ratio[::-1])[::-1]     # groups at or below each time
    per_subject = np.repeat(suffix, ends - starts)
    grad = -(events.astype(np.float64) - ex * per_subject) / n_events
    return loss, grad


def cindex_counts(risk, time, event):
    """Concordant / tied / comparable pair counts for the concordance index.

    A pair (i, j) is comparable when subject i has an event strictly before
    time j; it is concordant when risk_i > risk_j and tied when the risks
    are equal.
    """
    ev = event.astype(bool)
    lt = time[:, None] < time[None, :]
    comparable = lt & ev[:, None]
    gt_risk = risk[:, None] > risk[None, :]
    eq_risk = risk[:, None] == risk[None, :]
    conc = int(np.count_nonzero(comparable & gt_risk))
    tied = int(np.count_nonzero(comparable & eq_risk))
    return conc, tied, int(np.count_nonzero(comparable))


def wilcoxon_exact_counts(ranks2, w2):
    """Tail counts of the exact null distribution of the signed-rank sum.

    `ranks2` are the |difference| ranks doubled so ties (.5 average ranks)
    become integers; `w2` is the doubled observed positive-rank sum. Counts
    subsets of ranks by total via the subset-sum recurrence, which
    enumerates the same 2^n sign assignments without materialising them.

    Returns (count_ge, count_le, total).
    """
    total_sum = int(ranks2.sum())
    counts = np.zeros(total_sum + 1, dtype=np.float64)
    counts[0] = 1.0
    upper = 0
    for r in ranks2:
        r = int(r)
        upper += r
        counts[r:upper + 1] += counts[0:upper + 1 - r]
    sums = np.arange(total_sum + 1)
    n_ge = float(counts[sums >= w2].sum())
    n_le = float(counts[sums <= w2].sum())
    return n_ge, n_le, float(2 ** len(ranks2))

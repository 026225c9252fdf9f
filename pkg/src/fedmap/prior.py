"""Learnable convex regulariser over model parameters.

The regulariser is

    R(theta) = f(theta, mu) + alpha * ||theta - mu||^2
             + eps * (||theta||^2 + ||mu||^2)

where f is an input-convex network over the concatenation (theta, mu):
the first layer is an unconstrained affine map, every later layer is
softplus(Wz z + Wx x + b) with Wz entrywise non-negative, and the head is a
non-negative-weighted linear functional. Convexity in (theta, mu) holds by
construction for any fixed network weights; alpha, eps > 0 make R strongly
convex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._kernels import softplus as _softplus

__all__ = [
    "IcnnParams",
    "PriorState",
    "init_icnn",
    "icnn_forward",
    "regularizer",
    "project_nonneg",
    "check_strong_convexity",
    "check_midpoint_convexity",
    "build_regularizer",
    "build_icnn",
    "icnn_vars",
    "apply_icnn",
    "icnn_to_flat",
    "icnn_from_flat",
]


@dataclass
class IcnnParams:
    """Weights of the input-convex network.

    `w_in`/`b_in` form the unconstrained first layer on the stacked input;
    `wz[i]` (constrained >= 0) and `wx[i]`/`bz[i]` form hidden layer i+2;
    `w_out` (constrained >= 0) and `b_out` form the scalar head.
    """

    w_in: np.ndarray
    b_in: np.ndarray
    wz: list[np.ndarray] = field(default_factory=list)
    wx: list[np.ndarray] = field(default_factory=list)
    bz: list[np.ndarray] = field(default_factory=list)
    w_out: np.ndarray = None
    b_out: float = 0.0

    @property
    def input_dim(self) -> int:
        return self.w_in.shape[1]

    def constrained_arrays(self):
        return list(self.wz) + [self.w_out]

    def copy(self) -> "IcnnParams":
        return IcnnParams(
            w_in=self.w_in.copy(),
            b_in=self.b_in.copy(),
            wz=[w.copy() for w in self.wz],
            wx=[w.copy() for w in self.wx],
            bz=[b.copy() for b in self.bz],
            w_out=self.w_out.copy(),
            b_out=float(self.b_out),
        )

    def validate(self) -> None:
        for k, w in enumerate(self.constrained_arrays()):
            if np.any(w < 0):
                raise ValueError(
                    f"structural violation: constrained weight block {k} has a "
                    "negative entry"
                )


def init_icnn(d: int, widths=(16, 16), rng: np.random.Generator | None = None) -> IcnnParams:
    """Random network weights strictly inside the feasible set.

    Unconstrained blocks draw from N(0, 1/fan_in); constrained blocks take
    absolute values so projection starts as a no-op. `d` is the model
    parameter count; the network input is the 2d-long stacked (theta, mu).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    widths = tuple(int(w) for w in widths)
    if len(widths) < 1:
        raise ValueError("need at least one hidden layer")
    two_d = 2 * d

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))

    params = IcnnParams(w_in=dense(two_d, widths[0]), b_in=np.zeros(widths[0]))
    prev = widths[0]
    for w in widths[1:]:
        params.wz.append(np.abs(dense(prev, w)))
        params.wx.append(dense(two_d, w))
        params.bz.append(np.zeros(w))
        prev = w
    params.w_out = np.abs(dense(prev, 1))[0]
    params.b_out = 0.0
    return params


def icnn_forward(psi: IcnnParams, theta: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """f(theta, mu) for single vectors or (batch, d) stacks of them.

    Raises on any negative constrained weight; the projection step is
    responsible for keeping the structure valid.
    """
    psi.validate()
    theta = np.asarray(theta, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if theta.shape != mu.shape:
        raise ValueError(f"theta {theta.shape} and mu {mu.shape} differ")
    squeeze = theta.ndim == 1
    if squeeze:
        theta, mu = theta[None, :], mu[None, :]
    x = np.concatenate([theta, mu], axis=1)
    if x.shape[1] != psi.input_dim:
        raise ValueError(
            f"stacked input width {x.shape[1]} does not match network ({psi.input_dim})"
        )
    z = _softplus(x @ psi.w_in.T + psi.b_in)
    for wz, wx, bz in zip(psi.wz, psi.wx, psi.bz):
        z = _softplus(z @ wz.T + x @ wx.T + bz)
    out = z @ psi.w_out + psi.b_out
    return float(out[0]) if squeeze else out


@dataclass
class PriorState:
    """The pair (mu, psi) with its strong-convexity hyperparameters.

    `psi=None` disables the network term entirely (pure quadratic prior, the
    ablation used by the quadratic strategy and the theory fixtures).
    """

    mu: np.ndarray
    psi: IcnnParams | None
    alpha: float = 0.1
    eps: float = 1e-3

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.alpha <= 0 or self.eps <= 0:
            raise ValueError("alpha and eps must be positive")
        if self.psi is not None and self.psi.input_dim != 2 * self.mu.shape[0]:
            raise ValueError("network input width does not match 2 * len(mu)")

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    def copy(self) -> "PriorState":
        return PriorState(
            mu=self.mu.copy(),
            psi=None if self.psi is None else self.psi.copy(),
            alpha=self.alpha,
            eps=self.eps,
        )


def regularizer(prior: PriorState, theta: np.ndarray) -> np.ndarray:
    """R(theta; mu, psi) for a single vector or a (batch, d) stack."""
    theta = np.asarray(theta, dtype=np.float64)
    squeeze = theta.ndim == 1
    th = theta[None, :] if squeeze else theta
    if th.shape[1] != prior.d:
        raise ValueError(f"theta length {th.shape[1]} does not match mu ({prior.d})")
    mu = np.broadcast_to(prior.mu, th.shape)
    out = (
        prior.alpha * ((th - mu) ** 2).sum(axis=1)
        + prior.eps * ((th ** 2).sum(axis=1) + (mu ** 2).sum(axis=1))
    )
    if prior.psi is not None:
        out = out + icnn_forward(prior.psi, th, mu)
    return float(out[0]) if squeeze else out


def project_nonneg(psi: IcnnParams) -> IcnnParams:
    """Clamp every constrained weight at zero; idempotent.

    First-layer weights, the x-path weights and all biases are untouched.
    """
    out = psi.copy()
    out.wz = [np.maximum(w, 0.0) for w in out.wz]
    out.w_out = np.maximum(out.w_out, 0.0)
    return out


# ---- flat (de)serialisation -------------------------------------------------------


def _psi_blocks(psi: IcnnParams):
    blocks = [("w_in", psi.w_in), ("b_in", psi.b_in)]
    for i in range(len(psi.wz)):
        blocks += [(f"wz{i}", psi.wz[i]), (f"wx{i}", psi.wx[i]), (f"bz{i}", psi.bz[i])]
    blocks += [("w_out", psi.w_out), ("b_out", np.asarray([psi.b_out]))]
    return blocks


def icnn_to_flat(psi: IcnnParams):
    """(flat f64 vector, shape header) for checkpoints and joint gamma steps."""
    blocks = _psi_blocks(psi)
    flat = np.concatenate([b.ravel() for _, b in blocks])
    header = [[name, list(b.shape)] for name, b in blocks]
    return flat, header


def icnn_from_flat(flat: np.ndarray, header) -> IcnnParams:
    arrays = {}
    off = 0
    for name, shape in header:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.asarray(flat[off:off + size], dtype=np.float64).reshape(shape)
        off += size
    if off != flat.shape[0]:
        raise ValueError("flat vector length does not match shape header")
    n_hidden = sum(1 for name in arrays if name.startswith("wz"))
    return IcnnParams(
        w_in=arrays["w_in"],
        b_in=arrays["b_in"],
        wz=[arrays[f"wz{i}"] for i in range(n_hidden)],
        wx=[arrays[f"wx{i}"] for i in range(n_hidden)],
        bz=[arrays[f"bz{i}"] for i in range(n_hidden)],
        w_out=arrays["w_out"],
        b_out=float(arrays["b_out"][0]),
    )


# ---- tape construction ------------------------------------------------------------


def _as_var(tape: ad.Tape, value, collect: list | None):
    """Input leaf (tracked for gradients) or baked constant."""
    arr = np.asarray(value, dtype=np.float64)
    if collect is None:
        return tape.constant(arr)
    v = tape.input(arr.shape)
    collect.append(arr)
    return v


def icnn_vars(tape: ad.Tape, psi: IcnnParams, psi_feed: list | None):
    """Tape handles for every weight block, in `icnn_to_flat` block order.

    When `psi_feed` is a list the blocks become tape inputs (their current
    values are appended to the list in the same order) so gradients with
    respect to psi can be taken; otherwise they are baked constants. The
    returned handle list can be shared by several `apply_icnn` calls on one
    tape, which is how the server differentiates a weighted sum of
    regulariser terms with respect to one set of network weights.
    """
    blocks = [b for _, b in _psi_blocks(psi)]
    return [_as_var(tape, b, psi_feed) for b in blocks]


def apply_icnn(tape: ad.Tape, n_hidden: int, handles, x: "ad.Var"):
    """f over a 1-d stacked input node, given handles from `icnn_vars`."""
    it = iter(handles)
    w_in, b_in = next(it), next(it)
    z = ad.softplus(ad.add(ad.matvec(w_in, x), b_in))
    for _ in range(n_hidden):
        wz_v, wx_v, bz_v = next(it), next(it), next(it)
        z = ad.softplus(ad.add(ad.add(ad.matvec(wz_v, z), ad.matvec(wx_v, x)), bz_v))
    w_out, b_out = next(it), next(it)
    return ad.add(ad.dot(w_out, z), ad.asum(b_out))


def build_icnn(tape: ad.Tape, psi: IcnnParams, x: "ad.Var", psi_feed: list | None):
    """f as tape nodes over a 1-d stacked input node (single-use wrapper)."""
    return apply_icnn(tape, len(psi.wz), icnn_vars(tape, psi, psi_feed), x)


def build_regularizer(tape: ad.Tape, prior: PriorState, theta: "ad.Var",
                      mu: "ad.Var | None" = None, psi_feed: list | None = None):
    """R as tape nodes given theta (and optionally mu, psi) as tape inputs.

    `theta` must be a 1-d Var. Pass a Var for `mu` to differentiate with
    respect to it (otherwise the prior's mu is baked in); pass a list for
    `psi_feed` to expose the network weights as inputs, as in `build_icnn`.
    """
    if mu is None:
        mu = tape.constant(prior.mu)
    diff = ad.sub(theta, mu)
    r = ad.add(
        ad.scale(ad.sumsq(diff), prior.alpha),
        ad.scale(ad.add(ad.sumsq(theta), ad.sumsq(mu)), prior.eps),
    )
    if prior.psi is not None:
        x = ad.concat([theta, mu])
        r = ad.add(r, build_icnn(tape, prior.psi, x, psi_feed))
    return r


# ---- convexity certification -------------------------------------------------------


def check_midpoint_convexity(psi: IcnnParams, d: int, n_pairs: int,
                             rng: np.random.Generator, spread: float = 2.0) -> float:
    """Min over random pairs of (f(x1)+f(x2))/2 - f(midpoint).

    Non-negative up to roundoff when f is convex; returns the worst slack.
    """
    t1 = rng.normal(0.0, spread, size=(n_pairs, d))
    m1 = rng.normal(0.0, spread, size=(n_pairs, d))
    t2 = rng.normal(0.0, spread, size=(n_pairs, d))
    m2 = rng.normal(0.0, spread, size=(n_pairs, d))
    f1 = icnn_forward(psi, t1, m1)
    f2 = icnn_forward(psi, t2, m2)
    fm = icnn_forward(psi, (t1 + t2) / 2.0, (m1 + m2) / 2.0)
    return float(np.min(0.5 * f1 + 0.5 * f2 - fm))


def check_strong_convexity(prior: PriorState, n_pairs: int,
                           rng: np.random.Generator, spread: float = 2.0,
                           tol: float = 1e-9):
    """Certify eps-strong convexity of R in (theta, mu) on random pairs.

    Checks R(p1)/2 + R(p2)/2 >= R(midpoint) + eps * (||dtheta/2||^2 +
    ||dmu/2||^2) over sampled pairs (the network weights stay fixed). The
    eps quadratic term is exactly eps-strongly convex and everything else is
    convex, so eps is a certified modulus lower bound. Returns the minimum
    slack; raises with a witness pair if it dips below -tol.
    """
    d = prior.d
    t1 = rng.normal(0.0, spread, size=(n_pairs, d))
    t2 = rng.normal(0.0, spread, size=(n_pairs, d))
    m1 = rng.normal(0.0, spread, size=(n_pairs, d))
    m2 = rng.normal(0.0, spread, size=(n_pairs, d))
    r1 = _reg_batch(prior, t1, m1)
    r2 = _reg_batch(prior, t2, m2)
    rm = _reg_batch(prior, (t1 + t2) / 2.0, (m1 + m2) / 2.0)
    quad = prior.eps * (
        (((t1 - t2) / 2.0) ** 2).sum(axis=1) + (((m1 - m2) / 2.0) ** 2).sum(axis=1)
    )
    slack = 0.5 * r1 + 0.5 * r2 - rm - quad
    worst = int(np.argmin(slack))
    if slack[worst] < -tol:
        raise AssertionError(
            f"strong convexity violated by {slack[worst]:.3e} at pair {worst}: "
            f"theta1={t1[worst]}, mu1={m1[worst]}, theta2={t2[worst]}, mu2={m2[worst]}"
        )
    return float(slack[worst])


def _reg_batch(prior: PriorState, thetas: np.ndarray, mus: np.ndarray) -> np.ndarray:
    """R evaluated row-wise with mu varying per row (psi fixed)."""
    out = (
        prior.alpha * ((thetas - mus) ** 2).sum(axis=1)
        + prior.eps * ((thetas ** 2).sum(axis=1) + (mus ** 2).sum(axis=1))
    )
    if prior.psi is not None:
        out = out + icnn_forward(prior.psi, thetas, mus)
    return out

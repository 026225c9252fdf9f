"""The federated MAP strategy: local optimisation, posterior weighting,
and server-side aggregation of the global model and the prior network.

One communication round is: every participating site minimises

    (1/N_k) L(theta; Z_k) + R(theta; mu, psi)

for a fixed number of epochs and reports its new parameters together with a
log-domain posterior weight; the server then averages the parameters under
softmax-normalised weights and takes a few projected gradient steps on the
weighted regulariser with respect to the network weights.

The count-weighted gradient update on (mu, psi) used by the convergence
checks lives in `analysis.theory` (`run_theory_iterates`), with exact inner
solves instead of epoch-limited training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import (
    ModelPreset,
    OptimiserConfig,
    SiteDataset,
    data_loss,
    init_params,
    layout_for,
    make_batch_objective,
    predict,
    train_local_sgd,
)
from .prior import (
    IcnnParams,
    PriorState,
    apply_icnn,
    build_regularizer,
    icnn_from_flat,
    icnn_to_flat,
    icnn_vars,
    init_icnn,
    project_nonneg,
    regularizer,
)
from .rng import rng_for

__all__ = [
    "FedMapHyper",
    "LocalUpdate",
    "RoundReport",
    "T1Result",
    "local_optimize",
    "compute_log_weight",
    "normalized_weights",
    "aggregate_mu",
    "update_psi",
    "run_t1",
    "finetune_t2",
    "infer_t3",
]

WEIGHT_MODES = ("posterior", "sample-size", "uniform")


@dataclass(frozen=True)
class FedMapHyper:
    """Round-level hyperparameters of the federation."""

    rounds: int = 10
    local_epochs: int = 1
    s_agg: int = 5
    lr_psi: float = 0.01
    weight_mode: str = "posterior"
    likelihood_temper: str = "mean"  # "mean" | "paper-literal"

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 1 or self.s_agg < 0:
            raise ValueError("need rounds >= 0, local_epochs >= 1, s_agg >= 0")
        if self.lr_psi <= 0:
            raise ValueError("lr_psi must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.likelihood_temper not in ("mean", "paper-literal"):
            raise ValueError("likelihood_temper must be 'mean' or 'paper-literal'")


@dataclass
class LocalUpdate:
    """One site's contribution to a round."""

    site_id: str
    theta: np.ndarray
    log_weight: float
    n_samples: int
    epoch_losses: list[float]

    def __post_init__(self):
        if not np.isfinite(self.theta).all():
            raise ValueError(f"site {self.site_id}: non-finite parameters")
        if not np.isfinite(self.log_weight):
            raise ValueError(f"site {self.site_id}: non-finite log weight")


@dataclass
class RoundReport:
    round_index: int
    site_losses: dict[str, float]
    log_weights: dict[str, float]
    weights: dict[str, float]
    aggregate_objective: float
    aggregate_objective_after: float
    seconds: float

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "site_losses": self.site_losses,
            "log_weights": self.log_weights,
            "weights": self.weights,
            "aggregate_objective": self.aggregate_objective,
            "aggregate_objective_after": self.aggregate_objective_after,
            "seconds": self.seconds,
        }


@dataclass
class T1Result:
    mu: np.ndarray
    psi: IcnnParams | None
    thetas: dict[str, np.ndarray]
    reports: list[RoundReport]
    prior: PriorState


def compute_log_weight(preset: ModelPreset, theta: np.ndarray, prior: PriorState,
                       data: SiteDataset, temper: str = "mean") -> float:
    """log of the posterior weighting factor, entirely in the log domain.

    log w = log P(Z | theta) - R(theta) with the likelihood term tempered to
    -N_k * meanNLL * tau. The default tau = 1/N_k keeps sites of very
    different sizes on a comparable scale; "paper-literal" uses tau = 1,
    whose exp() would underflow for large sites, which is exactly why the
    weight is never exponentiated on its own here.
    """
    mean_nll = data_loss(preset, theta, data)
    tau = 1.0 if temper == "paper-literal" else 1.0 / data.n
    return float(-data.n * mean_nll * tau - regularizer(prior, theta))


def local_optimize(theta_init: np.ndarray, prior: PriorState, data: SiteDataset,
                   preset: ModelPreset, epochs: int, opt: OptimiserConfig,
                   rng: np.random.Generator, temper: str = "mean") -> LocalUpdate:
    """Epoch-limited minimisation of the regularised local objective."""
    reg = lambda tape, flat: build_regularizer(tape, prior, flat)
    objective, layout = make_batch_objective(preset, data, rng=rng, reg_builder=reg)
    result = train_local_sgd(
        theta_init, layout.shapes, objective, data.n, epochs, opt, rng
    )
    log_w = compute_log_weight(preset, result.theta, prior, data, temper=temper)
    return LocalUpdate(
        site_id=data.site_id,
        theta=result.theta,
        log_weight=log_w,
        n_samples=data.n,
        epoch_losses=result.epoch_losses,
    )


def _sorted_updates(updates) -> list[LocalUpdate]:
    if not updates:
        raise ValueError("need at least one local update")
    upds = sorted(updates, key=lambda u: u.site_id)
    d = upds[0].theta.shape[0]
    for u in upds:
        if u.theta.shape != (d,):
            raise ValueError(f"site {u.site_id}: parameter length mismatch")
    return upds


def normalized_weights(updates, mode: str = "posterior"):
    """(sorted updates, raw weights, normalised weights) for a round.

    Posterior weights go through log-sum-exp, so finite log weights can
    never collectively underflow to zero.
    """
    upds = _sorted_updates(updates)
    if mode == "posterior":
        lw = np.array([u.log_weight for u in upds])
        raw = np.exp(lw - lw.max())
    elif mode == "sample-size":
        raw = np.array([float(u.n_samples) for u in upds])
    elif mode == "uniform":
        raw = np.ones(len(upds))
    else:
        raise ValueError(f"weight mode must be one of {WEIGHT_MODES}")
    return upds, raw, raw / raw.sum()


def aggregate_mu(updates, mode: str = "posterior") -> np.ndarray:
    """Weighted average of the received parameters, in ascending site order.

    The result is a convex combination, hence lies coordinate-wise inside
    the hull of the received parameter vectors.
    """
    upds, raw, _ = normalized_weights(updates, mode)
    stacked = np.stack([u.theta for u in upds])
    return (raw[:, None] * stacked).sum(axis=0) / raw.sum()


def update_psi(psi: IcnnParams | None, updates, mu_new: np.ndarray, s_agg: int,
               lr_psi: float, alpha: float, eps: float,
               mode: str = "posterior"):
    """Projected gradient steps on the weighted regulariser in psi.

    Minimises sum_k w_k R(theta_k; mu_new, psi) over the network weights,
    clamping the constrained blocks after every step. Returns the new
    weights plus the objective value before and after (the quadratic part of
    R does not depend on psi but is included so the reported objective is
    the full weighted regulariser).
    """
    if psi is None or s_agg == 0:
        before = _weighted_reg_value(psi, updates, mu_new, alpha, eps, mode)
        return (psi if psi is None else psi.copy()), before, before

    upds, _, w = normalized_weights(updates, mode)
    quad = _weighted_quad_value(upds, w, mu_new, alpha, eps)

    tape = ad.Tape()
    feed: list = []
    handles = icnn_vars(tape, psi, feed)
    total = None
    for u, wk in zip(upds, w):
        x = tape.constant(np.concatenate([u.theta, mu_new]))
        term = ad.scale(apply_icnn(tape, len(psi.wz), handles, x), float(wk))
        total = term if total is None else ad.add(total, term)
    tape.set_root(total)

    _, header = icnn_to_flat(psi)
    current = psi
    before = tape.forward(*feed) + quad
    for step in range(s_agg):
        tape.forward(*feed)
        grads = tape.backward()
        if any(not np.isfinite(g).all() for g in grads):
            raise FloatingPointError(f"non-finite psi gradient at step {step}")
        flat = np.concatenate([f.ravel() for f in feed])
        gflat = np.concatenate([g.ravel() for g in grads])
        current = project_nonneg(icnn_from_flat(flat - lr_psi * gflat, header))
        flat_new, _ = icnn_to_flat(current)
        feed = _split_like(flat_new, feed)
    after = tape.forward(*feed) + quad
    return current, float(before), float(after)


def _split_like(flat: np.ndarray, like: list) -> list:
    out = []
    off = 0
    for arr in like:
        out.append(flat[off:off + arr.size].reshape(arr.shape))
        off += arr.size
    return out


def _weighted_quad_value(upds, w, mu, alpha, eps) -> float:
    total = 0.0
    for u, wk in zip(upds, w):
        diff = u.theta - mu
        total += wk * (
            alpha * float(diff @ diff)
            + eps * (float(u.theta @ u.theta) + float(mu @ mu))
        )
    return total


def _weighted_reg_value(psi, updates, mu, alpha, eps, mode) -> float:
    upds, _, w = normalized_weights(updates, mode)
    prior = PriorState(mu=mu, psi=psi, alpha=alpha, eps=eps)
    return float(sum(wk * regularizer(prior, u.theta) for u, wk in zip(upds, w)))


def run_t1(sites: list[SiteDataset], preset: ModelPreset, hyper: FedMapHyper,
           opt: OptimiserConfig, seed: int, alpha: float = 0.1, eps: float = 1e-3,
           icnn_widths=(16, 16), use_icnn: bool = True,
           checkpoint_cb=None) -> T1Result:
    """Full federated training over the given sites.

    Initialisation picks one site at random (seeded); its freshly initialised
    parameters seed the global model and every site's local model, and the
    prior network starts from random feasible weights. Each round runs the
    sites in ascending site-id order (sites are independent, so execution
    order only fixes the reduction order), aggregates, and reports.

    A site failure aborts the round: the pre-round state is handed to
    `checkpoint_cb` (when given) and the error is re-raised with the round
    index attached.
    """
    if not sites:
        raise ValueError("need at least one tier-1 site")
    sites = sorted(sites, key=lambda s: s.site_id)
    layout = layout_for(preset)

    init_rng = rng_for(seed, "t1-init")
    j = int(init_rng.integers(len(sites)))
    theta0 = init_params(preset, rng_for(seed, "site-init", sites[j].site_id))
    mu = theta0.copy()
    psi = (
        init_icnn(layout.total, icnn_widths, rng_for(seed, "icnn-init"))
        if use_icnn
        else None
    )
    thetas = {s.site_id: theta0.copy() for s in sites}
    reports: list[RoundReport] = []

    for t in range(hyper.rounds):
        tic = time.perf_counter()
        prior = PriorState(mu=mu, psi=psi, alpha=alpha, eps=eps)
        try:
            updates = [
                local_optimize(
                    thetas[s.site_id], prior, s, preset, hyper.local_epochs, opt,
                    rng_for(seed, "local", s.site_id, t),
                    temper=hyper.likelihood_temper,
                )
                for s in sites
            ]
        except Exception as exc:
            if checkpoint_cb is not None:
                checkpoint_cb(t, mu, psi, thetas)
            raise RuntimeError(f"round {t} aborted: {exc}") from exc
        mu = aggregate_mu(updates, hyper.weight_mode)
        psi, obj_before, obj_after = update_psi(
            psi, updates, mu, hyper.s_agg, hyper.lr_psi, alpha, eps,
            mode=hyper.weight_mode,
        )
        upds, _, w = normalized_weights(updates, hyper.weight_mode)
        thetas = {u.site_id: u.theta for u in upds}
        reports.append(RoundReport(
            round_index=t,
            site_losses={u.site_id: u.epoch_losses[-1] for u in upds},
            log_weights={u.site_id: u.log_weight for u in upds},
            weights={u.site_id: float(wk) for u, wk in zip(upds, w)},
            aggregate_objective=obj_before,
            aggregate_objective_after=obj_after,
            seconds=time.perf_counter() - tic,
        ))
        if checkpoint_cb is not None:
            checkpoint_cb(t, mu, psi, thetas)

    prior = PriorState(mu=mu, psi=psi, alpha=alpha, eps=eps)
    return T1Result(mu=mu, psi=psi, thetas=thetas, reports=reports, prior=prior)


def finetune_t2(preset: ModelPreset, prior: PriorState, data: SiteDataset,
                epochs: int, opt: OptimiserConfig,
                rng: np.random.Generator) -> np.ndarray:
    """Local fine-tuning from the trained global state, no communication.

    Starts at theta = mu and runs epoch-limited mini-batch descent on the
    regularised objective under the frozen (mu, psi). Zero epochs return mu
    unchanged.
    """
    reg = lambda tape, flat: build_regularizer(tape, prior, flat)
    objective, layout = make_batch_objective(preset, data, rng=rng, reg_builder=reg)
    result = train_local_sgd(
        prior.mu, layout.shapes, objective, data.n, epochs, opt, rng
    )
    return result.theta


def infer_t3(preset: ModelPreset, mu: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Inference-only scores under the global model; pure and stateless."""
    return predict(preset, mu, features)

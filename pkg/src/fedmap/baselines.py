"""Comparison strategies sharing the federation harness.

"fedavg" is count-weighted parameter averaging with local training restarted
from the global model each round; "individual" trains each site alone with
no parameter exchange; "fedmap-quad" is the main strategy with the network
term disabled (pure quadratic prior, no server prior steps). Strategy
outputs all use the flat-parameter contract, so the evaluation pipeline
treats them interchangeably.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LocalUpdate, RoundReport
from .models import (
    ModelPreset,
    OptimiserConfig,
    SiteDataset,
    init_params,
    make_batch_objective,
    train_local_sgd,
)
from .rng import rng_for

__all__ = ["STRATEGIES", "fedavg_aggregate", "run_fedavg", "run_individual"]

STRATEGIES = ("fedmap", "fedmap-quad", "fedavg", "individual")


def fedavg_aggregate(updates) -> np.ndarray:
    """mu = sum_k N_k theta_k / sum_k N_k, in ascending site-id order."""
    if not updates:
        raise ValueError("need at least one local update")
    upds = sorted(updates, key=lambda u: u.site_id)
    d = upds[0].theta.shape[0]
    for u in upds:
        if u.theta.shape != (d,):
            raise ValueError(f"site {u.site_id}: parameter length mismatch")
    counts = np.array([float(u.n_samples) for u in upds])
    stacked = np.stack([u.theta for u in upds])
    return (counts[:, None] * stacked).sum(axis=0) / counts.sum()


@dataclass
class FedAvgResult:
    mu: np.ndarray
    reports: list[RoundReport]


def run_fedavg(sites: list[SiteDataset], preset: ModelPreset, rounds: int,
               local_epochs: int, opt: OptimiserConfig, seed: int) -> FedAvgResult:
    """Reference federated averaging: every round each site trains from the
    current global model, and the server takes the count-weighted mean."""
    if not sites:
        raise ValueError("need at least one site")
    sites = sorted(sites, key=lambda s: s.site_id)
    init_rng = rng_for(seed, "t1-init")
    j = int(init_rng.integers(len(sites)))
    mu = init_params(preset, rng_for(seed, "site-init", sites[j].site_id))
    reports: list[RoundReport] = []

    for t in range(rounds):
        updates = []
        for s in sites:
            rng = rng_for(seed, "local", s.site_id, t)
            objective, layout = make_batch_objective(preset, s, rng=rng)
            res = train_local_sgd(
                mu, layout.shapes, objective, s.n, local_epochs, opt, rng
            )
            updates.append(LocalUpdate(
                site_id=s.site_id, theta=res.theta, log_weight=0.0,
                n_samples=s.n, epoch_losses=res.epoch_losses,
            ))
        mu = fedavg_aggregate(updates)
        counts = np.array([float(u.n_samples) for u in updates])
        reports.append(RoundReport(
            round_index=t,
            site_losses={u.site_id: u.epoch_losses[-1] for u in updates},
            log_weights={u.site_id: 0.0 for u in updates},
            weights={
                u.site_id: float(c / counts.sum())
                for u, c in zip(updates, counts)
            },
            aggregate_objective=0.0,
            aggregate_objective_after=0.0,
            seconds=0.0,
        ))
    return FedAvgResult(mu=mu, reports=reports)


def run_individual(sites: list[SiteDataset], preset: ModelPreset, epochs: int,
                   opt: OptimiserConfig, seed: int) -> dict[str, np.ndarray]:
    """Per-site training with no parameter exchange; order-independent."""
    out: dict[str, np.ndarray] = {}
    for s in sorted(sites, key=lambda x: x.site_id):
        theta0 = init_params(preset, rng_for(seed, "indiv-init", s.site_id))
        rng = rng_for(seed, "indiv", s.site_id)
        objective, layout = make_batch_objective(preset, s, rng=rng)
        res = train_local_sgd(
            theta0, layout.shapes, objective, s.n, epochs, opt, rng
        )
        out[s.site_id] = res.theta
    return out

"""Synthetic federated cohorts with controllable quantity, label, and
feature skew, plus the skew quantification used to characterise them.

Quantity skew comes from a lognormal site-size law, label skew from
Beta-perturbed per-site class priors (concentration `label_alpha`: large
values approach identically distributed sites, small values produce heavy
skew), and feature skew from per-site affine distortions and/or a
logistic covariate-driven site assignment. Survival cohorts draw
exponential event times under per-site rate multipliers with uniform
censoring tuned to hit the per-site event-rate target exactly.

Generation is deterministic: every random draw comes from a counter-based
stream keyed by (seed, site, purpose).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .analysis.metrics import auroc
from .models import SiteDataset
from .rng import rng_for

__all__ = [
    "SizeLaw",
    "LogisticAssign",
    "PartitionSpec",
    "SkewReport",
    "generate_cohort",
    "logistic_assign",
    "wasserstein_1d",
    "skew_report",
    "assign_tiers",
    "export_cohort",
    "load_cohort",
]

QUANTILE_GRID = 1024


@dataclass(frozen=True)
class SizeLaw:
    kind: str = "lognormal"  # "lognormal" | "fixed"
    mean: float = 200.0
    cv: float = 1.0
    n: int = 200
    min_size: int = 8

    def __post_init__(self):
        if self.kind not in ("lognormal", "fixed"):
            raise ValueError(f"unknown size law {self.kind!r}")
        if self.kind == "lognormal" and (self.mean <= 0 or self.cv <= 0):
            raise ValueError("lognormal size law needs positive mean and cv")
        if self.kind == "fixed" and self.n < 1:
            raise ValueError("fixed size law needs n >= 1")


@dataclass(frozen=True)
class LogisticAssign:
    """Covariate-driven site assignment amplitude and shape."""

    L: float = 1.0
    k: float = 0.2
    x0: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.L <= 1.0:
            raise ValueError("L must be a probability amplitude in (0, 1]")


@dataclass(frozen=True)
class PartitionSpec:
    n_sites: int = 10
    n_features: int = 8
    size_law: SizeLaw = field(default_factory=SizeLaw)
    label_alpha: float = 10.0
    feature_shift_sd: float = 0.0
    feature_scale_sd: float = 0.0
    positive_rate: float = 0.2
    min_class_fraction: float = 0.05
    survival: bool = False
    censor_rate_sd: float = 0.25
    separation: float = 1.5
    logistic: LogisticAssign | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError("need at least one site")
        if self.label_alpha <= 0:
            raise ValueError("label concentration must be positive")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive rate must lie strictly inside (0, 1)")
        if not 0.0 <= self.min_class_fraction < 0.5:
            raise ValueError("min class fraction must lie in [0, 0.5)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionSpec":
        d = dict(d)
        if d.get("size_law") is not None:
            d["size_law"] = SizeLaw(**d["size_law"])
        if d.get("logistic") is not None:
            d["logistic"] = LogisticAssign(**d["logistic"])
        return cls(**d)


def logistic_assign(x, L: float, k: float, x0: float):
    """Assignment probability L / (1 + exp(-k (x - x0)))."""
    x = np.asarray(x, dtype=np.float64)
    out = L / (1.0 + np.exp(-k * (x - x0)))
    return float(out) if out.ndim == 0 else out


def _site_sizes(spec: PartitionSpec) -> np.ndarray:
    rng = rng_for(spec.seed, "sizes")
    if spec.size_law.kind == "fixed":
        return np.full(spec.n_sites, spec.size_law.n, dtype=np.int64)
    sigma2 = math.log1p(spec.size_law.cv ** 2)
    mu_ln = math.log(spec.size_law.mean) - sigma2 / 2.0
    raw = rng.lognormal(mean=mu_ln, sigma=math.sqrt(sigma2), size=spec.n_sites)
    return np.maximum(np.rint(raw).astype(np.int64), spec.size_law.min_size)


def _site_positive_rates(spec: PartitionSpec) -> np.ndarray:
    rng = rng_for(spec.seed, "labels")
    a = spec.label_alpha
    r = spec.positive_rate
    return rng.beta(a * r, a * (1.0 - r), size=spec.n_sites)


def _class_means(spec: PartitionSpec) -> tuple[np.ndarray, np.ndarray]:
    # the signal decays across features, so feature 0 is the most predictive
    profile = 0.75 ** np.arange(spec.n_features)
    m1 = spec.separation * profile
    return np.zeros(spec.n_features), m1


def _site_affine(spec: PartitionSpec, site_index: int):
    rng = rng_for(spec.seed, "affine", site_index)
    shift = rng.normal(0.0, spec.feature_shift_sd, size=spec.n_features) \
        if spec.feature_shift_sd > 0 else np.zeros(spec.n_features)
    scale = np.exp(rng.normal(0.0, spec.feature_scale_sd, size=spec.n_features)) \
        if spec.feature_scale_sd > 0 else np.ones(spec.n_features)
    return shift, scale


def _positive_count(spec: PartitionSpec, rng, n: int, rate: float) -> int:
    lo = max(1, math.ceil(spec.min_class_fraction * n)) if spec.min_class_fraction > 0 else 0
    lo = min(lo, n // 2)
    k = int(rng.binomial(n, rate))
    return int(np.clip(k, lo, n - lo))


def _survival_columns(spec: PartitionSpec, rng, x: np.ndarray, rate_mult: float,
                      target_events: int):
    """Exponential event times with censoring tuned to the exact event count.

    Each subject i censors at v_i * c for a uniform v_i; as the horizon c
    grows, subject i flips to an observed event at c = T_i / v_i, so picking
    c between order statistics of those thresholds realises any count.
    """
    n = x.shape[0]
    beta = 0.4 * 0.75 ** np.arange(x.shape[1])
    eta = np.clip(x @ beta, -4.0, 4.0)
    rates = rate_mult * np.exp(eta)
    times_event = rng.exponential(1.0 / rates)
    v = rng.uniform(0.05, 1.0, size=n)
    thresholds = np.sort(times_event / v)
    k = int(np.clip(target_events, 1, n))
    if k >= n:
        horizon = thresholds[-1] * 1.01
    else:
        horizon = 0.5 * (thresholds[k - 1] + thresholds[k])
    censor = v * horizon
    events = (times_event <= censor).astype(np.int64)
    times = np.minimum(times_event, censor)
    return np.maximum(times, 1e-9), events


def generate_cohort(spec: PartitionSpec) -> list[SiteDataset]:
    """Draw the full federated cohort described by the spec.

    Classification sites get class-conditional Gaussian features pushed
    through a per-site affine map; survival sites get the same features with
    exponential (time, event) columns. With a logistic assignment law the
    sites are instead filled from a pooled draw, with each subject routed by
    a logistic probability in feature 0 (alternate sites take the
    complement), which induces feature skew through the assignment itself.
    """
    sizes = _site_sizes(spec)
    rates = _site_positive_rates(spec)
    m0, m1 = _class_means(spec)
    if spec.logistic is not None:
        return _generate_logistic(spec, sizes, rates, m0, m1)

    sites = []
    for i in range(spec.n_sites):
        rng = rng_for(spec.seed, "site", i)
        n = int(sizes[i])
        shift, scale = _site_affine(spec, i)
        n_pos = _positive_count(spec, rng, n, rates[i])
        y = np.zeros(n, dtype=np.int64)
        y[:n_pos] = 1
        rng.shuffle(y)
        x = rng.normal(0.0, 1.0, size=(n, spec.n_features))
        x = np.where(y[:, None] == 1, x + m1, x + m0)
        x = x * scale + shift
        if spec.survival:
            mult = float(np.exp(rng_for(spec.seed, "hazard", i).normal(0.0, spec.censor_rate_sd)))
            times, events = _survival_columns(spec, rng, x, mult, n_pos)
            sites.append(SiteDataset(_site_name(i), x, times=times, events=events))
        else:
            sites.append(SiteDataset(_site_name(i), x, labels=y))
    return sites


def _generate_logistic(spec: PartitionSpec, sizes, rates, m0, m1) -> list[SiteDataset]:
    total = int(sizes.sum())
    rng = rng_for(spec.seed, "pooled")
    rate_pool = float(np.clip(rates.mean(), 0.02, 0.98))
    n_pos = _positive_count(spec, rng, total, rate_pool)
    y = np.zeros(total, dtype=np.int64)
    y[:n_pos] = 1
    rng.shuffle(y)
    x = rng.normal(0.0, 1.0, size=(total, spec.n_features))
    x = np.where(y[:, None] == 1, x + m1, x + m0)

    law = spec.logistic
    cov = x[:, 0]
    centres = np.quantile(cov, (np.arange(spec.n_sites) + 1.0) / (spec.n_sites + 1.0))
    weights = np.empty((total, spec.n_sites))
    for k in range(spec.n_sites):
        p = logistic_assign(cov, law.L, law.k, law.x0 + centres[k])
        weights[:, k] = sizes[k] * (p if k % 2 == 0 else 1.0 - p)
    weights = np.maximum(weights, 1e-12)
    weights /= weights.sum(axis=1, keepdims=True)
    u = rng.random(total)
    assignment = (weights.cumsum(axis=1) < u[:, None]).sum(axis=1)

    sites = []
    for k in range(spec.n_sites):
        idx = np.flatnonzero(assignment == k)
        if idx.size == 0:
            raise ValueError(f"logistic assignment left site {k} empty; adjust the law")
        xs, ys = x[idx], y[idx]
        if spec.survival:
            srng = rng_for(spec.seed, "site", k)
            mult = float(np.exp(rng_for(spec.seed, "hazard", k).normal(0.0, spec.censor_rate_sd)))
            target = max(1, int(round(rates[k] * idx.size)))
            times, events = _survival_columns(spec, srng, xs, mult, target)
            sites.append(SiteDataset(_site_name(k), xs, times=times, events=events))
        else:
            sites.append(SiteDataset(_site_name(k), xs, labels=ys))
    return sites


def _site_name(i: int) -> str:
    return f"site-{i:03d}"


# ---- skew quantification -----------------------------------------------------------


def wasserstein_1d(a, b) -> float:
    """Distance between the empirical distributions of two 1-d samples.

    Equal sizes reduce to the mean absolute difference of matched order
    statistics (exact); unequal sizes evaluate both empirical quantile
    functions on a fixed 1024-point midpoint grid, which is exact whenever
    both sizes divide the grid.
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    u = (np.arange(QUANTILE_GRID) + 0.5) / QUANTILE_GRID
    qa = a[np.minimum((u * a.size).astype(np.int64), a.size - 1)]
    qb = b[np.minimum((u * b.size).astype(np.int64), b.size - 1)]
    return float(np.mean(np.abs(qa - qb)))


@dataclass
class SkewReport:
    site_ids: list[str]
    sizes: np.ndarray
    size_cov: float
    positive_ratios: np.ndarray
    positive_mean: float
    positive_sd: float
    feature_index: int
    w1_matrix: np.ndarray
    w1_mean: float
    w1_sd: float
    single_class_sites: list[str]

    def to_dict(self) -> dict:
        return {
            "site_ids": self.site_ids,
            "sizes": self.sizes.tolist(),
            "size_cov": self.size_cov,
            "positive_ratios": self.positive_ratios.tolist(),
            "positive_mean": self.positive_mean,
            "positive_sd": self.positive_sd,
            "feature_index": self.feature_index,
            "w1_matrix": self.w1_matrix.tolist(),
            "w1_mean": self.w1_mean,
            "w1_sd": self.w1_sd,
            "single_class_sites": self.single_class_sites,
        }


def _positives(site: SiteDataset) -> np.ndarray:
    return site.events if site.is_survival else (site.labels == 1).astype(np.int64)


def most_predictive_feature(sites: list[SiteDataset]) -> int:
    """Feature with the largest single-feature AUROC deviation from 0.5.

    Ranked on the pooled cohort; survival cohorts rank against the event
    indicator.
    """
    x = np.concatenate([s.features for s in sites])
    y = np.concatenate([_positives(s) for s in sites])
    if y.min() == y.max():
        return 0
    scores = [abs(auroc(x[:, j], y) - 0.5) for j in range(x.shape[1])]
    return int(np.argmax(scores))


def skew_report(sites: list[SiteDataset], feature_index: int | None = None) -> SkewReport:
    """Quantity, label, and feature skew summary across sites."""
    if len(sites) < 2:
        raise ValueError("skew report needs at least two sites")
    sites = sorted(sites, key=lambda s: s.site_id)
    sizes = np.array([s.n for s in sites], dtype=np.float64)
    ratios = np.array([_positives(s).mean() for s in sites])
    single = [s.site_id for s in sites if len(np.unique(_positives(s))) < 2]
    j = most_predictive_feature(sites) if feature_index is None else int(feature_index)
    q = len(sites)
    w1 = np.zeros((q, q))
    for a in range(q):
        for b in range(a + 1, q):
            d = wasserstein_1d(sites[a].features[:, j], sites[b].features[:, j])
            w1[a, b] = w1[b, a] = d
    off = w1[np.triu_indices(q, k=1)]
    return SkewReport(
        site_ids=[s.site_id for s in sites],
        sizes=sizes,
        size_cov=float(sizes.std() / sizes.mean()),
        positive_ratios=ratios,
        positive_mean=float(ratios.mean()),
        positive_sd=float(ratios.std()),
        feature_index=j,
        w1_matrix=w1,
        w1_mean=float(off.mean()),
        w1_sd=float(off.std()),
        single_class_sites=single,
    )


def assign_tiers(sites: list[SiteDataset], t_low: float, t_high: float) -> list[SiteDataset]:
    """Size-based tier tags: above t_high full training, below t_low
    inference-only, the inclusive band in between fine-tuning."""
    if not t_low < t_high:
        raise ValueError("need t_low < t_high")
    for s in sites:
        if s.n > t_high:
            s.tier = "T1"
        elif s.n >= t_low:
            s.tier = "T2"
        else:
            s.tier = "T3"
    return sites


# ---- cohort persistence -------------------------------------------------------------


def export_cohort(sites: list[SiteDataset], spec: PartitionSpec | None,
                  out_dir: str | Path) -> Path:
    """One CSV per site plus a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    file_map = {}
    for s in sorted(sites, key=lambda x: x.site_id):
        fname = f"{s.site_id}.csv"
        file_map[s.site_id] = fname
        header = [f"f{j}" for j in range(s.n_features)]
        header += ["time", "event"] if s.is_survival else ["label"]
        with open(out / fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(s.n):
                row = [repr(float(v)) for v in s.features[i]]
                if s.is_survival:
                    row += [repr(float(s.times[i])), str(int(s.events[i]))]
                else:
                    row += [str(int(s.labels[i]))]
                w.writerow(row)
    manifest = {
        "format": "fedmap-cohort-v1",
        "spec": None if spec is None else spec.to_dict(),
        "seed": None if spec is None else spec.seed,
        "sites": file_map,
        "tiers": {s.site_id: s.tier for s in sites},
        "survival": sites[0].is_survival,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_cohort(manifest_path: str | Path) -> list[SiteDataset]:
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "fedmap-cohort-v1":
        raise ValueError(f"{path}: not a cohort manifest")
    sites = []
    for site_id, fname in sorted(manifest["sites"].items()):
        rows = list(csv.reader(open(path.parent / fname)))
        header, body = rows[0], rows[1:]
        arr = np.array(body, dtype=np.float64)
        if manifest["survival"]:
            feats, times, events = arr[:, :-2], arr[:, -2], arr[:, -1]
            site = SiteDataset(site_id, feats, times=times,
                               events=events.astype(np.int64))
        else:
            feats, labels = arr[:, :-1], arr[:, -1]
            site = SiteDataset(site_id, feats, labels=labels.astype(np.int64))
        site.tier = manifest["tiers"].get(site_id)
        sites.append(site)
    return sites

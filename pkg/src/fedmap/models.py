"""Prediction models and local loss functions.

A model preset describes an MLP as one or more branch chains over fixed
slices of the input vector, an optional fusion chain over their
concatenation, and a linear head producing either class logits or a scalar
log-hazard. Parameters live in a single flat float64 vector; the layout
(per-layer shapes and offsets) is derived from the preset and the input
width.

Batch normalisation in the reference architectures is replaced by
per-feature standardisation fitted on each site's training split and frozen
thereafter; see `Standardizer`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from ._kernels import cox_nll as _cox_kernel, softmax_xent_fwd as _xent_fwd

__all__ = [
    "Branch",
    "ModelPreset",
    "ParamLayout",
    "SiteDataset",
    "Standardizer",
    "OptimiserConfig",
    "TrainResult",
    "preset_by_name",
    "layout_for",
    "init_params",
    "predict",
    "cross_entropy",
    "cox_loss",
    "train_local_sgd",
    "build_scores",
]


@dataclass(frozen=True)
class Branch:
    """One chain of dense layers over an input slice.

    `widths` are layer output sizes; ReLU follows every layer except,
    when `relu_last` is False, the final one.
    """

    start: int | None
    stop: int | None
    widths: tuple[int, ...]
    relu_last: bool = True


@dataclass(frozen=True)
class ModelPreset:
    name: str
    branches: tuple[Branch, ...]
    fusion: tuple[int, ...]
    n_outputs: int
    head: str  # "logits" | "log-hazard"
    dropout: float = 0.0

    def with_input_dim(self, n_features: int) -> "ModelPreset":
        """Resolve open-ended branch slices against a concrete feature count."""
        resolved = []
        for b in self.branches:
            start = 0 if b.start is None else b.start
            stop = n_features if b.stop is None else b.stop
            if not 0 <= start < stop <= n_features:
                raise ValueError(
                    f"preset {self.name!r}: branch slice [{start}:{stop}) invalid "
                    f"for {n_features} features"
                )
            resolved.append(replace(b, start=start, stop=stop))
        return replace(self, branches=tuple(resolved))


def _thirds(n: int) -> tuple[int, int]:
    a = n // 3
    b = 2 * n // 3
    return a, b


def preset_by_name(name: str, n_features: int, *, hidden=None, n_classes: int = 2,
                   dropout: float | None = None) -> ModelPreset:
    """Named architecture presets, resolved for the given input width.

    "cprd-surv"       three shrinking hidden layers and a log-hazard head
    "eicu-multimodal" three branch encoders over fixed input slices, fused
    "interval-mlp"    two equal hidden layers and a logits head
    "mlp"             generic classifier; `hidden` picks the widths
    """
    if name == "cprd-surv":
        p = ModelPreset(
            name=name,
            branches=(Branch(None, None, (64, 32, 16)),),
            fusion=(),
            n_outputs=1,
            head="log-hazard",
            dropout=0.1 if dropout is None else dropout,
        )
    elif name == "eicu-multimodal":
        a, b = _thirds(n_features)
        if a < 1 or b - a < 1 or n_features - b < 1:
            raise ValueError("eicu-multimodal needs at least 3 features")
        p = ModelPreset(
            name=name,
            branches=(
                Branch(0, a, (100, 50, 10, 5), relu_last=False),
                Branch(a, b, (100, 50, 10, 5), relu_last=False),
                Branch(b, None, (40, 20, 10, 5), relu_last=False),
            ),
            fusion=(15, 10, 5),
            n_outputs=2,
            head="logits",
            dropout=0.3 if dropout is None else dropout,
        )
    elif name == "interval-mlp":
        p = ModelPreset(
            name=name,
            branches=(Branch(None, None, (64, 64)),),
            fusion=(),
            n_outputs=n_classes,
            head="logits",
            dropout=0.1 if dropout is None else dropout,
        )
    elif name == "mlp":
        widths = tuple(int(w) for w in (hidden if hidden is not None else (16,)))
        p = ModelPreset(
            name=name,
            branches=(Branch(None, None, widths),),
            fusion=(),
            n_outputs=n_classes,
            head="logits",
            dropout=0.0 if dropout is None else dropout,
        )
    else:
        raise ValueError(f"unknown model preset {name!r}")
    return p.with_input_dim(n_features)


@dataclass(frozen=True)
class ParamLayout:
    """Shapes and flat offsets of every weight matrix and bias vector."""

    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...]
    total: int

    def split(self, theta: np.ndarray) -> list[np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.total,):
            raise ValueError(
                f"parameter vector has length {theta.shape}, layout needs ({self.total},)"
            )
        parts = []
        for shape, off in zip(self.shapes, self.offsets):
            size = int(np.prod(shape))
            parts.append(theta[off:off + size].reshape(shape))
        return parts

    def join(self, parts) -> np.ndarray:
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])


def _layer_dims(preset: ModelPreset):
    """(in, out) pairs for every dense layer, in parameter order."""
    dims = []
    for b in preset.branches:
        fan_in = b.stop - b.start
        for w in b.widths:
            dims.append((fan_in, w))
            fan_in = w
    fan_in = sum(b.widths[-1] for b in preset.branches)
    for w in preset.fusion:
        dims.append((fan_in, w))
        fan_in = w
    dims.append((fan_in, preset.n_outputs))
    return dims


def layout_for(preset: ModelPreset) -> ParamLayout:
    shapes: list[tuple[int, ...]] = []
    for fan_in, fan_out in _layer_dims(preset):
        shapes.append((fan_out, fan_in))
        shapes.append((fan_out,))
    offsets = []
    off = 0
    for s in shapes:
        offsets.append(off)
        off += int(np.prod(s))
    return ParamLayout(tuple(shapes), tuple(offsets), off)


def init_params(preset: ModelPreset, rng: np.random.Generator) -> np.ndarray:
    """He-style initial weights, zero biases, as one flat vector."""
    parts = []
    for fan_in, fan_out in _layer_dims(preset):
        parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        parts.append(np.zeros(fan_out))
    return layout_for(preset).join(parts)


# ---- wiring ---------------------------------------------------------------------


def build_scores(tape: ad.Tape, preset: ModelPreset, param_vars, x: "ad.Var",
                 dropout_masks=None):
    """Model scores as tape nodes; `param_vars` follow the layout order.

    `dropout_masks` is an optional list of pre-scaled mask arrays, one per
    hidden activation in order; eval mode passes None.
    """
    it = iter(param_vars)
    masks = iter(dropout_masks) if dropout_masks is not None else None

    def dense(h, use_relu):
        w = next(it)
        b = next(it)
        out = ad.affine(h, w, b)
        if use_relu:
            out = ad.relu(out)
            if masks is not None:
                out = ad.mul(out, tape.constant(next(masks)))
        return out

    branch_outs = []
    for br in preset.branches:
        h = x if (br.start, br.stop) == (0, x.shape[-1]) else _slice_var(tape, x, br)
        for li, width in enumerate(br.widths):
            last = li == len(br.widths) - 1
            h = dense(h, use_relu=(br.relu_last or not last))
        branch_outs.append(h)
    if len(branch_outs) == 1:
        h = branch_outs[0]
    else:
        h = _hstack_vars(tape, branch_outs)
    for _ in preset.fusion:
        h = dense(h, use_relu=True)
    return dense(h, use_relu=False)


def _slice_var(tape: ad.Tape, x: "ad.Var", br: Branch):
    # column slices of the data are baked as constants; the data itself is
    # never differentiated, so x must be a constant node here
    val = tape._aux[x.idx]
    if val is None:
        raise ValueError("branch slicing requires the feature matrix as a constant")
    return tape.constant(np.ascontiguousarray(val[..., br.start:br.stop]))


def _hstack_vars(tape: ad.Tape, parts):
    if len(parts[0].shape) == 1:
        return ad.concat(parts)
    # (B, k) blocks: concat flattened rows would interleave wrongly, so fold
    # each block through a fixed 0/1 placement matrix instead
    widths = [p.shape[1] for p in parts]
    total = sum(widths)
    out = None
    off = 0
    for p, w in zip(parts, widths):
        placer = np.zeros((w, total))
        placer[np.arange(w), off + np.arange(w)] = 1.0
        term = ad.affine(p, tape.constant(placer.T),
                         tape.constant(np.zeros(total)))
        out = term if out is None else ad.add(out, term)
        off += w
    return out


# ---- data -----------------------------------------------------------------------


@dataclass
class SiteDataset:
    """One site's local supervised data.

    Classification sites carry integer `labels`; survival sites carry
    (`times`, `events`) with strictly positive times. `tier` is one of
    "T1", "T2", "T3" once assigned.
    """

    site_id: str
    features: np.ndarray
    labels: np.ndarray | None = None
    times: np.ndarray | None = None
    events: np.ndarray | None = None
    tier: str | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"site {self.site_id}: features must be a nonempty matrix")
        if not np.isfinite(self.features).all():
            raise ValueError(f"site {self.site_id}: non-finite feature rows")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ValueError(f"site {self.site_id}: labels length mismatch")
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=np.float64)
            self.events = np.asarray(self.events, dtype=np.int64)
            if self.times.shape != (self.n,) or self.events.shape != (self.n,):
                raise ValueError(f"site {self.site_id}: survival columns length mismatch")
            if not np.all(self.times > 0):
                raise ValueError(f"site {self.site_id}: survival times must be positive")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def is_survival(self) -> bool:
        return self.times is not None

    def subset(self, idx: np.ndarray) -> "SiteDataset":
        return SiteDataset(
            site_id=self.site_id,
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            times=None if self.times is None else self.times[idx],
            events=None if self.events is None else self.events[idx],
            tier=self.tier,
        )


@dataclass
class Standardizer:
    """Per-feature affine map fitted once on training data, frozen after."""

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        mean = features.mean(axis=0)
        sd = features.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return cls(mean=mean, sd=sd)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.sd


# ---- losses and prediction -------------------------------------------------------


def _forward(preset: ModelPreset, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    layout = layout_for(preset)
    parts = layout.split(theta)
    tape = ad.Tape()
    param_vars = [tape.constant(p) for p in parts]
    xc = tape.constant(np.asarray(x, dtype=np.float64))
    scores = build_scores(tape, preset, param_vars, xc)
    tape.set_root(ad.asum(scores))
    tape.forward()
    return tape.value(scores)


def predict(preset: ModelPreset, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Eval-mode scores for feature rows: class logits or log-hazard values.

    Deterministic (dropout off); a pure function of (theta, x).
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    expected = max(b.stop for b in preset.branches)
    if x.shape[1] != expected:
        raise ValueError(f"feature width {x.shape[1]} does not match preset ({expected})")
    out = _forward(preset, theta, x)
    if preset.head == "log-hazard":
        out = out[:, 0]
    if not np.isfinite(out).all():
        bad = int(np.flatnonzero(~np.isfinite(out).reshape(out.shape[0], -1).all(axis=1))[0])
        raise FloatingPointError(f"non-finite model output at input row {bad}")
    return out[0] if squeeze else out


def cross_entropy(preset: ModelPreset, theta: np.ndarray, data: SiteDataset) -> float:
    """Mean negative log-likelihood of the labels under the softmax head."""
    if data.labels is None:
        raise ValueError("cross_entropy needs a classification dataset")
    if data.labels.min() < 0 or data.labels.max() >= preset.n_outputs:
        raise ValueError("label outside the preset's class range")
    logits = predict(preset, theta, data.features)
    loss, _ = _xent_fwd(logits, data.labels)
    return float(loss)


def cox_loss(preset: ModelPreset, theta: np.ndarray, data: SiteDataset) -> float:
    """Breslow negative partial log-likelihood, averaged over events."""
    if not data.is_survival:
        raise ValueError("cox_loss needs a survival dataset")
    if int(data.events.sum()) < 1:
        raise ValueError(f"site {data.site_id}: no events, partial likelihood undefined")
    eta = predict(preset, theta, data.features)
    order = np.argsort(-data.times, kind="stable")
    ts = data.times[order]
    group_start = np.empty(ts.shape[0], dtype=np.bool_)
    group_start[0] = True
    group_start[1:] = ts[1:] != ts[:-1]
    loss, _ = _cox_kernel(eta[order], data.events[order], group_start)
    return float(loss)


def data_loss(preset: ModelPreset, theta: np.ndarray, data: SiteDataset) -> float:
    """Mean local loss for whichever label kind the dataset carries."""
    return cox_loss(preset, theta, data) if data.is_survival else cross_entropy(preset, theta, data)


# ---- training --------------------------------------------------------------------


@dataclass(frozen=True)
class OptimiserConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ValueError(f"unknown optimiser {self.name!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainResult:
    theta: np.ndarray
    epoch_losses: list[float]


class _Adam:
    def __init__(self, dim: int, cfg: OptimiserConfig):
        self.cfg = cfg
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * theta
        if cfg.name == "sgd":
            return theta - cfg.lr * grad
        self.t += 1
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * grad * grad
        mhat = self.m / (1 - cfg.beta1 ** self.t)
        vhat = self.v / (1 - cfg.beta2 ** self.t)
        return theta - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def train_local_sgd(theta0: np.ndarray, shapes, objective, n_samples: int,
                    epochs: int, opt: OptimiserConfig, rng: np.random.Generator,
                    shuffle: bool = True) -> TrainResult:
    """Mini-batch training of a flat parameter vector.

    `objective(tape, param_vars, idx)` builds the scalar batch objective for
    the given sample indices and returns the root Var, or None to skip a
    degenerate batch (e.g. a survival mini-batch with no events). `shapes`
    gives the per-part array shapes into which theta is split; the split
    order is also the gradient order.

    Training is deterministic for a fixed rng state. A non-finite batch
    objective aborts with the epoch and batch index.
    """
    shapes = [tuple(s) for s in shapes]
    sizes = [int(np.prod(s)) for s in shapes]
    if sum(sizes) != theta0.shape[0]:
        raise ValueError("shapes do not tile the parameter vector")
    theta = np.asarray(theta0, dtype=np.float64).copy()
    adam = _Adam(theta.shape[0], opt)
    batch = max(1, min(opt.batch_size, n_samples))
    epoch_losses: list[float] = []

    for epoch in range(epochs):
        idx_all = rng.permutation(n_samples) if shuffle else np.arange(n_samples)
        total = 0.0
        used = 0
        for start in range(0, n_samples, batch):
            idx = idx_all[start:start + batch]
            tape = ad.Tape()
            parts = []
            off = 0
            for shape, size in zip(shapes, sizes):
                v = tape.input(shape)
                parts.append((v, theta[off:off + size].reshape(shape)))
                off += size
            root = objective(tape, [p[0] for p in parts], idx)
            if root is None:
                continue
            tape.set_root(root)
            loss = tape.forward(*[p[1] for p in parts])
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite objective at epoch {epoch}, batch {start // batch}"
                )
            grads = tape.backward()
            flat_grad = np.concatenate([g.ravel() for g in grads])
            theta = adam.step(theta, flat_grad)
            total += loss * len(idx)
            used += len(idx)
        epoch_losses.append(total / used if used else float("nan"))
    return TrainResult(theta=theta, epoch_losses=epoch_losses)


def make_batch_objective(preset: ModelPreset, data: SiteDataset, rng=None,
                         reg_builder=None):
    """Standard per-batch objective: mean data loss plus optional regulariser.

    `reg_builder(tape, theta_flat_var)` adds the regulariser term given the
    flat parameter vector as a tape node. When `rng` is given and the preset
    has a positive dropout rate, fresh inverted-dropout masks are drawn for
    every batch.
    """
    layout = layout_for(preset)
    n_hidden = sum(
        len(b.widths) - (0 if b.relu_last else 1) for b in preset.branches
    ) + len(preset.fusion)

    def objective(tape: ad.Tape, param_vars, idx):
        x = data.features[idx]
        masks = None
        if rng is not None and preset.dropout > 0.0:
            keep = 1.0 - preset.dropout
            masks = []
            for b in preset.branches:
                for li, w in enumerate(b.widths):
                    if b.relu_last or li < len(b.widths) - 1:
                        masks.append(
                            (rng.random((len(idx), w)) < keep).astype(np.float64) / keep
                        )
            for w in preset.fusion:
                masks.append((rng.random((len(idx), w)) < keep).astype(np.float64) / keep)
            assert len(masks) == n_hidden
        scores = build_scores(tape, preset, param_vars, tape.constant(x),
                              dropout_masks=masks)
        if data.is_survival:
            ev = data.events[idx]
            if int(ev.sum()) < 1:
                return None
            eta = ad.flatten(scores)
            loss = ad.cox_partial_nll(eta, data.times[idx], ev)
        else:
            loss = ad.xent_logits(scores, data.labels[idx])
        if reg_builder is not None:
            theta_flat = ad.concat([ad.flatten(v) for v in param_vars])
            loss = ad.add(loss, reg_builder(tape, theta_flat))
        return loss

    return objective, layout

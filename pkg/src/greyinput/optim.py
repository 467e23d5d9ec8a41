"""AdamW, discriminative learning rates and the two-phase training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import DataError, NumericError, ParameterError
from .layers import Model, ParamGroup
from .losses import LOSSES, weights_from_counts
from .metrics import macro_prauc
from .tensor import DTYPES, Tensor, default_dtype

LOG_FIELDS = ("epoch", "phase", "mean_loss", "macro_prauc", "wall_seconds")


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    m: dict = field(default_factory=dict)  # id(param) -> first moment
    v: dict = field(default_factory=dict)  # id(param) -> second moment

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ParameterError("eps must be > 0 and weight_decay >= 0")

    def moments(self, p: Tensor) -> tuple[np.ndarray, np.ndarray]:
        key = id(p)
        if key not in self.m:
            self.m[key] = np.zeros_like(p.data)
            self.v[key] = np.zeros_like(p.data)
        return self.m[key], self.v[key]


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimState, lr: float,
               group: str = "params", advance: bool = True) -> None:
    """One AdamW update in place: decay ``p -= lr*wd*p``, then a bias-corrected Adam step.

    ``advance=False`` reuses the current step count, so several groups can
    share one step of a multi-group optimizer.
    """
    if lr <= 0:
        raise ParameterError(f"learning rate must be > 0, got {lr}")
    for p, g in zip(params, grads):
        if g is None:
            raise NumericError(f"missing gradient in group {group!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in group {group!r}")
    if advance:
        state.step += 1
    t = state.step
    if t < 1:
        raise ParameterError("state.step must be >= 1 before an update")
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g in zip(params, grads):
        m, v = state.moments(p)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * ((m / c1) / (np.sqrt(v / c2) + state.eps))


class AdamW:
    """AdamW over ordered parameter groups, each with its own learning rate.

    Frozen groups and parameters without ``requires_grad`` are skipped;
    their moments are left untouched.
    """

    def __init__(self, groups: Sequence[ParamGroup], lrs: Sequence[float], **hyper):
        if len(groups) != len(lrs):
            raise ParameterError(f"{len(groups)} groups but {len(lrs)} learning rates")
        self.groups = list(groups)
        self.lrs = [float(lr) for lr in lrs]
        self.state = OptimState(**hyper)

    def step(self) -> None:
        self.state.step += 1
        for group, lr in zip(self.groups, self.lrs):
            if group.frozen:
                continue
            live = [p for p in group.parameters if p.requires_grad]
            adamw_step(live, [p.grad for p in live], self.state, lr, group.name, advance=False)


def discriminative_lrs(groups: Sequence, lr_min: float, lr_max: float) -> list[float]:
    """Geometric progression from ``lr_min`` (first group) to ``lr_max`` (last)."""
    n = len(groups)
    if n == 0:
        raise ParameterError("discriminative_lrs needs at least one group")
    if not (0 < lr_min <= lr_max):
        raise ParameterError(f"need 0 < lr_min <= lr_max, got {lr_min}, {lr_max}")
    if n == 1:
        return [float(lr_max)]
    lrs = np.geomspace(lr_min, lr_max, n)
    lrs[0], lrs[-1] = lr_min, lr_max
    return [float(v) for v in lrs]


# ---------------------------------------------------------------------------
# two-phase schedule


@dataclass(frozen=True)
class PhasePlan:
    phase1_epochs: int = 10
    phase2_epochs: int = 40
    phase1_lr: float = 1e-3
    phase2_lr_range: tuple[float, float] = (1e-6, 1e-4)
    weight_decay: float = 0.1
    batch_size: int = 32
    bn_batches: int = 8  # training batches used to re-estimate BN statistics per epoch (0 = off)
    dtype: str = "float64"  # compute dtype during training; weights return as float64

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ParameterError("epoch counts must be >= 0")
        lo, hi = self.phase2_lr_range
        if not (0 < lo <= hi):
            raise ParameterError(f"phase2_lr_range needs 0 < lr_min <= lr_max, got {self.phase2_lr_range}")
        if self.phase1_lr <= 0 or self.batch_size < 1 or self.bn_batches < 0:
            raise ParameterError("phase1_lr must be > 0, batch_size >= 1 and bn_batches >= 0")
        if self.dtype not in DTYPES:
            raise ParameterError(f"dtype must be one of {', '.join(DTYPES)}, got {self.dtype!r}")


class TrainingData(Protocol):
    n_train: int
    n_val: int

    def train_batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...
    def val_batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...
    def train_label_counts(self) -> np.ndarray: ...


@dataclass
class ArrayData:
    """In-memory training data: B x 3 x H x W inputs and B x C labels."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.x_train)

    @property
    def n_val(self) -> int:
        return len(self.x_val)

    def train_batch(self, idx):
        return self.x_train[idx], self.y_train[idx]

    def val_batch(self, idx):
        return self.x_val[idx], self.y_val[idx]

    def train_label_counts(self):
        return self.y_train.sum(axis=0)


@dataclass
class LogRow:
    epoch: int
    phase: int
    mean_loss: float
    macro_prauc: float
    wall_seconds: float

    def as_list(self) -> list:
        return [self.epoch, self.phase, repr(self.mean_loss), repr(self.macro_prauc), f"{self.wall_seconds:.3f}"]


def write_log_csv(path, rows: Sequence[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow(r.as_list())


def predict_data(model: Model, data: TrainingData, batch_size: int = 32, split: str = "val"):
    """Eval-mode scores and labels for a whole split."""
    n = data.n_val if split == "val" else data.n_train
    fetch = data.val_batch if split == "val" else data.train_batch
    scores, labels = [], []
    for b0 in range(0, n, batch_size):
        x, y = fetch(np.arange(b0, min(n, b0 + batch_size)))
        scores.append(model.predict(x, batch_size))
        labels.append(y)
    n_classes = model.spec.n_classes
    if not scores:
        return np.zeros((0, n_classes)), np.zeros((0, n_classes))
    return np.concatenate(scores), np.concatenate(labels)


def _loss_fn(loss_kind: str, data: TrainingData) -> Callable:
    if loss_kind not in LOSSES:
        raise ParameterError(f"unknown loss {loss_kind!r}; expected one of {', '.join(LOSSES)}")
    if loss_kind == "bce":
        weights = weights_from_counts(data.train_label_counts())
        return lambda s, y: LOSSES["bce"](s, y, weights)
    return LOSSES[loss_kind]


def run_two_phase(model: Model, data: TrainingData, plan: PhasePlan, loss_kind: str = "bce",
                  seed: int = 0, on_epoch: Callable[[LogRow], None] | None = None) -> list[LogRow]:
    """Phase 1 trains preproc+head over a frozen backbone; phase 2 trains
    everything with discriminative learning rates.  One log row per epoch.

    Shuffling draws from a generator seeded by ``seed``; dropout draws from
    the model's own generator, so the whole run is a function of the
    model seed, ``seed`` and the data.
    """
    if data.n_train == 0:
        raise DataError("training split is empty")
    if plan.phase1_epochs + plan.phase2_epochs == 0:
        return []
    model.cast(DTYPES[plan.dtype])
    try:
        with default_dtype(plan.dtype):
            return _run_phases(model, data, plan, loss_kind, seed, on_epoch)
    finally:
        model.cast(np.float64)
        model.freeze_backbone(False)
        model.eval()


def _run_phases(model, data, plan, loss_kind, seed, on_epoch) -> list[LogRow]:
    loss_fn = _loss_fn(loss_kind, data)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    rows: list[LogRow] = []
    start = time.perf_counter()
    epoch = 0
    for phase, n_epochs in ((1, plan.phase1_epochs), (2, plan.phase2_epochs)):
        if n_epochs == 0:
            continue
        model.freeze_backbone(phase == 1)
        groups = model.param_groups()
        if phase == 1:
            lrs = [plan.phase1_lr] * len(groups)
        else:
            lrs = discriminative_lrs(groups, *plan.phase2_lr_range)
        opt = AdamW(groups, lrs, weight_decay=plan.weight_decay)
        for _ in range(n_epochs):
            epoch += 1
            model.train()
            order = shuffle_rng.permutation(data.n_train)
            total, count = 0.0, 0
            for b0 in range(0, data.n_train, plan.batch_size):
                idx = np.sort(order[b0 : b0 + plan.batch_size])
                if len(idx) < 2:  # batch statistics need two samples
                    continue
                x, y = data.train_batch(idx)
                model.zero_grad()
                loss = loss_fn(model(Tensor(x)), y)
                loss.backward(keep_intermediate=False)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite loss in epoch {epoch}")
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            mean_loss = total / count if count else float("nan")
            if plan.bn_batches:
                model.recalibrate_batchnorm(
                    data.train_batch(np.sort(order[b0 : b0 + plan.batch_size]))[0]
                    for b0 in range(0, min(data.n_train, plan.bn_batches * plan.batch_size), plan.batch_size)
                )
            prauc = float("nan")
            if data.n_val:
                scores, labels = predict_data(model, data, plan.batch_size)
                if labels.sum() > 0:
                    prauc = macro_prauc(scores, labels).macro
            row = LogRow(epoch, phase, mean_loss, prauc, time.perf_counter() - start)
            rows.append(row)
            if on_epoch is not None:
                on_epoch(row)
    return rows

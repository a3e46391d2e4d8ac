"""Optimisation: Adam, step learning-rate decay, spot batching and early stopping."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SlideDataset
from .evaluation import mean_defined, pcc_per_gene
from .fusion import fusion_loss
from .model import TriplexModel
from .nn import Parameter
from .tensor import backward, concat, no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "lr", "L_Ta", "L_Ne", "L_Gl", "L_F", "total", "val_pcc_m"]


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    step_size: int = 50
    gamma: float = 0.9
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    seed: int = 2021
    alpha: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.step_size < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("step_size, batch_size and max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def lr_schedule(epoch: int, lr0: float = 1e-4, step_size: int = 50, gamma: float = 0.9) -> float:
    """Step decay: ``lr0 * gamma ** (epoch // step_size)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * gamma ** (epoch // step_size)


# ----------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Parameter]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray | None],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Sequence[str] | None = None,
) -> OptimizerState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A ``None`` gradient is treated as zero.
    """
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        named_params = list(named_params)
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimizerState.zeros_like(self.params)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr, self.beta1, self.beta2, self.eps, self.names)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ----------------------------------------------------------------------
# early stopping


@dataclass
class EarlyStopState:
    patience: int
    best: float = -math.inf
    best_epoch: int = -1
    epochs_since: int = 0
    best_state: dict | None = field(default=None, repr=False)


def early_stop_check(state: EarlyStopState, pcc_m: float, epoch: int = -1, snapshot: Callable[[], dict] | None = None) -> bool:
    """Record one validation score; return True when training should stop.

    An undefined (NaN) score never counts as an improvement.
    """
    if not math.isnan(pcc_m) and pcc_m > state.best:
        state.best = pcc_m
        state.best_epoch = epoch
        state.epochs_since = 0
        if snapshot is not None:
            state.best_state = snapshot()
    else:
        state.epochs_since += 1
    return state.epochs_since >= state.patience


# ----------------------------------------------------------------------
# epochs


@dataclass
class EpochStats:
    epoch: int
    lr: float
    steps: int
    losses: dict[str, float]
    val_pcc_m: float = math.nan


def _check_trainable(slides: Sequence[SlideDataset]) -> None:
    if not slides or sum(ds.n for ds in slides) == 0:
        raise ValueError("empty training set")
    for ds in slides:
        if ds.features is None:
            raise ValueError(f"slide {ds.slide_id!r} has no features")
        if ds.stage not in ("normalized", "smoothed"):
            raise ValueError(f"slide {ds.slide_id!r} labels are {ds.stage!r}, expected normalized")


def batch_loss(model: TriplexModel, slides: Sequence[SlideDataset], members: np.ndarray, alpha: float):
    """Loss over a batch given as (slide index, row) pairs.

    The global encoder runs once over each slide touched by the batch and the
    rows belonging to the batch are gathered from its output.
    """
    z_parts, t_parts, n_parts, y_parts = [], [], [], []
    for s in np.unique(members[:, 0]):
        ds = slides[s]
        rows = np.sort(members[members[:, 0] == s, 1])
        z_gl = model.encode_global(ds.features.global_, ds.grid)
        z_parts.append(z_gl.take(rows))
        t_parts.append(model.target_input(ds, rows))
        n_parts.append(ds.features.neighbor[rows])
        y_parts.append(ds.expression[rows])
    z = z_parts[0] if len(z_parts) == 1 else concat(z_parts)
    out = model(np.concatenate(t_parts), np.concatenate(n_parts), z)
    y = np.concatenate(y_parts).astype(model.dtype)
    return fusion_loss(out.q_ta, out.q_ne, out.q_gl, out.q_f, y, alpha)


def train_epoch(
    model: TriplexModel,
    slides: Sequence[SlideDataset],
    config: TrainConfig,
    optimizer: Adam,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochStats:
    """One pass over all training spots in shuffled batches of ``batch_size``."""
    _check_trainable(slides)
    members = np.array([(s, r) for s, ds in enumerate(slides) for r in range(ds.n)], dtype=np.int64)
    members = members[rng.permutation(len(members))]
    lr = lr_schedule(epoch, config.lr0, config.step_size, config.gamma)
    model.train(True, rng)
    totals: dict[str, float] = {}
    steps = 0
    for start in range(0, len(members), config.batch_size):
        batch = members[start : start + config.batch_size]
        optimizer.zero_grad()
        losses = batch_loss(model, slides, batch, config.alpha)
        backward(losses.total)
        optimizer.step(lr)
        for k, v in losses.as_floats().items():
            totals[k] = totals.get(k, 0.0) + v * len(batch)
        steps += 1
    model.eval()
    n = len(members)
    return EpochStats(epoch, lr, steps, {k: v / n for k, v in totals.items()})


def dataset_loss(model: TriplexModel, slides: Sequence[SlideDataset], alpha: float, batch: int = 256) -> dict[str, float]:
    """Spot-weighted mean loss terms over ``slides`` in eval mode (no dropout, no graph)."""
    _check_trainable(slides)
    was_training, rng = model.training, model._rng
    model.eval()
    totals: dict[str, float] = {}
    count = 0
    try:
        with no_grad():
            for s, ds in enumerate(slides):
                for start in range(0, ds.n, batch):
                    rows = np.arange(start, min(start + batch, ds.n))
                    members = np.stack([np.full(len(rows), s), rows], axis=1)
                    for k, v in batch_loss(model, slides, members, alpha).as_floats().items():
                        totals[k] = totals.get(k, 0.0) + v * len(rows)
                    count += len(rows)
    finally:
        if was_training:
            model.train(True, rng)
    return {k: v / count for k, v in totals.items()}


def validation_pcc_m(model: TriplexModel, slides: Sequence[SlideDataset]) -> float:
    """Mean over slides of the per-slide mean PCC across defined genes."""
    scores = [mean_defined(pcc_per_gene(model.predict_slide(ds), ds.expression)) for ds in slides]
    return mean_defined(np.array(scores))


@dataclass
class FitResult:
    history: list[EpochStats]
    best_epoch: int
    best_val_pcc_m: float
    stopped_early: bool


def fit(
    model: TriplexModel,
    train_slides: Sequence[SlideDataset],
    val_slides: Sequence[SlideDataset] = (),
    config: TrainConfig | None = None,
    log_path: str | Path | None = None,
) -> FitResult:
    """Train until ``max_epochs`` or until validation PCC(M) stalls for ``patience`` epochs.

    With validation slides the best-scoring weights are restored at the end.
    """
    config = config or TrainConfig()
    _check_trainable(train_slides)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.named_parameters(), config.beta1, config.beta2, config.adam_eps)
    stopper = EarlyStopState(config.patience)
    history: list[EpochStats] = []
    stopped = False
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    try:
        for epoch in range(config.max_epochs):
            stats = train_epoch(model, train_slides, config, opt, rng, epoch)
            if val_slides:
                stats.val_pcc_m = validation_pcc_m(model, val_slides)
            history.append(stats)
            if writer is not None:
                L = stats.losses
                writer.writerow(
                    [epoch, repr(stats.lr), *(f"{L[k]:.9g}" for k in ("L_Ta", "L_Ne", "L_Gl", "L_F", "total")), f"{stats.val_pcc_m:.9g}"]
                )
            log.debug("epoch %d lr %.3g loss %.5f val_pcc_m %.4f", epoch, stats.lr, stats.losses["total"], stats.val_pcc_m)
            if val_slides and early_stop_check(stopper, stats.val_pcc_m, epoch, model.state_dict):
                stopped = True
                break
    finally:
        if fh is not None:
            fh.close()
    if val_slides and stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    return FitResult(history, stopper.best_epoch, stopper.best, stopped)

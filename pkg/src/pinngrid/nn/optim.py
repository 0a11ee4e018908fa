"""AdamW, plateau learning-rate reduction, early stopping and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, backward, grads_for

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """A monitored loss term became non-finite."""


@dataclass
class OptimizerState:
    lr: float
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_init(params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8) -> OptimizerState:
    return OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay,
                          m=[np.zeros_like(p.data) for p in params],
                          v=[np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: OptimizerState) -> OptimizerState:
    """One AdamW update in place. Weight decay is applied to the parameter directly."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` checks without improvement."""

    def __init__(self, factor=0.5, patience=10, min_delta=0.0, min_lr=0.0):
        if not 0.0 < factor < 1.0:
            raise ValueError("factor must be in (0, 1)")
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.factor, self.patience, self.min_delta, self.min_lr = factor, patience, min_delta, min_lr
        self.best = math.inf
        self.bad = 0

    def update(self, value, state: OptimizerState) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            state.lr = max(state.lr * self.factor, self.min_lr)
            self.bad = 0
            return True
        return False


class EarlyStopping:
    def __init__(self, patience=20, min_delta=0.0):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf
        self.bad = 0

    def update(self, value) -> bool:
        """Record a monitored value; True means stop."""
        if value < self.best - self.min_delta:
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 4000
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-6
    check_every: int = 25
    patience: int = 40
    min_delta: float = 0.0
    lr_factor: float = 0.5
    lr_patience: int = 10
    min_lr: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.lr_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must be in (0, 1)")
        if self.max_steps < 0 or self.batch_size < 1 or self.check_every < 1:
            raise ValueError("invalid step/batch settings")


@dataclass
class TrainResult:
    history: list
    steps: int
    stopped_early: bool
    best_monitor: float


def _check_finite(value, terms):
    if math.isfinite(value):
        return
    bad = [k for k, v in (terms or {}).items() if not math.isfinite(v)]
    raise TrainingDiverged(f"non-finite loss; offending term(s): {bad or ['total']}")


def run_training_loop(params, loss_fn, cfg: TrainConfig, monitor_fn=None, on_check=None) -> TrainResult:
    """Minimise ``loss_fn`` with AdamW.

    ``loss_fn(step)`` runs inside an active tape and returns either a scalar
    Tensor or ``(scalar Tensor, {term: float})``. Every ``cfg.check_every``
    steps ``monitor_fn()`` (default: the latest training loss) feeds both the
    plateau schedule and early stopping. History rows are dicts with the step,
    the learning rate, the monitored value and any reported terms.
    """
    state = adamw_init(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr_factor, cfg.lr_patience, cfg.min_delta, cfg.min_lr)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    history, stopped, last, best = [], False, math.nan, math.inf
    step = 0
    while step < cfg.max_steps:
        with Tape() as tape:
            try:
                out = loss_fn(step)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"step {step}: {exc}") from exc
        loss, terms = out if isinstance(out, tuple) else (out, {})
        last = float(loss.data)
        _check_finite(last, terms)
        if loss.requires_grad:
            grads = grads_for(params, backward(tape, loss))
            adamw_step(params, grads, state)
        step += 1
        if step % cfg.check_every == 0 or step == cfg.max_steps:
            monitored = float(monitor_fn()) if monitor_fn is not None else last
            _check_finite(monitored, terms)
            best = min(best, monitored)
            history.append({"step": step, "lr": state.lr, "monitor": monitored, "best": best, **terms})
            if on_check is not None:
                on_check(history[-1])
            sched.update(monitored, state)
            if stopper.update(monitored):
                stopped = True
                log.info("early stop at step %d (best %.3e)", step, best)
                break
    return TrainResult(history=history, steps=step, stopped_early=stopped, best_monitor=best)

"""Episodic training with Adam and step learning-rate decay."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset, InstancePool
from .model import EpisodeBatch, ScapeModel
from .nn import AdamState, adam_step, lr_schedule
from .tensor import Tape

log = logging.getLogger(__name__)


class NumericFailure(FloatingPointError):
    def __init__(self, step: int, batch: EpisodeBatch):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.batch = batch


@dataclass
class TrainLog:
    steps: list[int]
    lrs: list[float]
    losses: list[float]

    def to_csv(self) -> str:
        rows = ["step,lr,loss"] + [f"{s},{lr:.6g},{l:.9f}"
                                   for s, lr, l in zip(self.steps, self.lrs, self.losses)]
        return "\n".join(rows) + "\n"


def train_step(model: ScapeModel, batch: EpisodeBatch, state: AdamState,
               supervise_occluded: bool = True) -> float:
    params = model.parameters()
    with Tape() as tape:
        res = model.forward(batch, supervise_occluded=supervise_occluded)
    loss = float(res.loss.data)
    if not np.isfinite(loss):
        raise FloatingPointError
    tape.backward(res.loss, params)
    adam_step(params, [p.grad for p in params], state)
    model.zero_grad()
    return loss


def train(
    model: ScapeModel,
    dataset: Dataset,
    steps: int,
    batch_size: int = 16,
    base_lr: float = 2e-4,
    seed: int = 0,
    n_shot: int = 1,
    steps_per_epoch: int | None = None,
    pool_size: int = 64,
    supervise_occluded: bool = True,
    on_epoch: Callable[[int], None] | None = None,
    log_every: int = 1,
) -> TrainLog:
    """Train in place for ``steps`` batches of episodes from the train split.

    The learning-rate schedule is the 180-epoch step decay compressed onto
    ``steps // steps_per_epoch`` epochs.
    """
    steps_per_epoch = steps_per_epoch or max(1, steps // 180)
    n_epochs = max(1, -(-steps // steps_per_epoch))
    rng = np.random.default_rng([seed, 1])
    model.rng = np.random.default_rng([seed, 2])
    pool = InstancePool(dataset, "train", pool_size)
    state = AdamState(lr=base_lr)
    out = TrainLog([], [], [])
    model.training = True
    try:
        for step in range(steps):
            epoch = step // steps_per_epoch
            state.lr = lr_schedule(epoch, base_lr, n_epochs)
            batch = EpisodeBatch.from_episodes(
                [pool.sample(rng, n_shot) for _ in range(batch_size)], model.cfg.K_max)
            try:
                loss = train_step(model, batch, state, supervise_occluded)
            except FloatingPointError:
                raise NumericFailure(step, batch) from None
            if step % log_every == 0 or step == steps - 1:
                out.steps.append(step)
                out.lrs.append(state.lr)
                out.losses.append(loss)
            if on_epoch is not None and (step + 1) % steps_per_epoch == 0:
                on_epoch(epoch)
            if step % 500 == 0:
                log.info("step %d lr %.2e loss %.4f", step, state.lr, loss)
    finally:
        model.training = False
    return out


def overfit_episode(model: ScapeModel, batch: EpisodeBatch, steps: int = 300,
                    lr: float = 1e-3) -> list[float]:
    """Repeated Adam steps on one fixed batch; returns the loss trace."""
    state = AdamState(lr=lr)
    losses = []
    for _ in range(steps):
        losses.append(train_step(model, batch, state))
    return losses

"""Learning-rate plateau schedule and training failure signal."""

from __future__ import annotations

import math


class TrainingDiverged(RuntimeError):
    pass


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has
    failed to improve for ``patience`` consecutive epochs."""

    def __init__(self, optimizer, patience: int = 2, factor: float = 0.5, min_delta: float = 0.0):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.min_delta = min_delta
        self.best = math.inf
        self.stagnant = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, loss: float) -> bool:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.stagnant = 0
            return False
        self.stagnant += 1
        if self.stagnant >= self.patience:
            for g in self.optimizer.param_groups:
                g["lr"] *= self.factor
            self.stagnant = 0
            return True
        return False

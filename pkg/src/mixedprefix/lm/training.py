"""
mixedprefix.lm.training

Generic minibatch loop shared by backbone pretraining and every adaptation
strategy. The caller supplies a step function that performs forward,
backward and the optimizer update for a list of example rows; the loop owns
the epoch/step budget, evaluation cadence, early stopping and restoration of
the best parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from mixedprefix.autodiff.graph import Tensor
from mixedprefix.autodiff.rng import RngStream
from mixedprefix.errors import TrainingDiverged
from mixedprefix.lm.batching import iter_minibatches
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.training")

# Returns the batch loss, or None when the batch had no targets and no update was made.
StepFn = Callable[[list[int], int], Optional[float]]


class TrainingBudget(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_epochs: int = Field(default=3, ge=1)
    max_steps: int = Field(default=5000, ge=1)
    batch_size: int = Field(default=16, ge=1)
    # 0 = evaluate once per epoch
    eval_every: int = Field(default=0, ge=0)
    patience: int = Field(default=2, ge=1)
    early_stopping: bool = True


@dataclass
class TrainingResult:
    steps: int = 0
    epochs: int = 0
    curve: list[Dict[str, Any]] = field(default_factory=list)
    best_val: Optional[float] = None
    best_step: Optional[int] = None
    stopped_early: bool = False
    skipped_batches: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "steps": self.steps,
            "epochs": self.epochs,
            "curve": self.curve,
            "best_val": self.best_val,
            "best_step": self.best_step,
            "stopped_early": self.stopped_early,
            "skipped_batches": self.skipped_batches,
        }


def snapshot(params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


def restore(params: Mapping[str, Tensor], state: Mapping[str, np.ndarray]) -> None:
    for name, t in params.items():
        if name in state:
            t.data[...] = state[name]


def ensure_finite(loss: float, step: int, params: Mapping[str, Tensor]) -> None:
    """Raise before the update is applied, so `last_good` is the pre-step state."""
    if not math.isfinite(loss):
        log.error("non-finite loss %s at step %d", loss, step)
        raise TrainingDiverged(f"loss became {loss} at step {step}", step, snapshot(params))


def fit(
    n_examples: int,
    step_fn: StepFn,
    params: Mapping[str, Tensor],
    budget: TrainingBudget,
    rng: RngStream,
    evaluate: Optional[Callable[[], float]] = None,
    label: str = "train",
) -> TrainingResult:
    result = TrainingResult()
    if n_examples == 0:
        log.warning("%s: no training examples, nothing to do", label)
        return result

    best_state: Optional[Dict[str, np.ndarray]] = None
    bad_evals = 0
    window: list[float] = []

    def checkpoint_eval() -> bool:
        nonlocal best_state, bad_evals
        train_loss = float(np.mean(window)) if window else None
        window.clear()
        point: Dict[str, Any] = {"step": result.steps, "epoch": result.epochs, "train_loss": train_loss}
        if evaluate is not None:
            val = float(evaluate())
            point["val_nll"] = val
            if result.best_val is None or val < result.best_val:
                result.best_val, result.best_step = val, result.steps
                best_state = snapshot(params)
                bad_evals = 0
            else:
                bad_evals += 1
        result.curve.append(point)
        log.info("%s step=%d train_loss=%s val_nll=%s", label, result.steps, train_loss, point.get("val_nll"))
        return budget.early_stopping and evaluate is not None and bad_evals >= budget.patience

    stop = False
    for epoch in range(budget.max_epochs):
        for rows in iter_minibatches(n_examples, budget.batch_size, rng.child(f"epoch{epoch}")):
            loss = step_fn(rows, result.steps)
            result.steps += 1
            if loss is None:
                result.skipped_batches += 1
            else:
                window.append(loss)
            if budget.eval_every and result.steps % budget.eval_every == 0:
                stop = checkpoint_eval()
            if stop or result.steps >= budget.max_steps:
                break
        result.epochs = epoch + 1
        if stop:
            break
        already_scored = bool(result.curve) and result.curve[-1]["step"] == result.steps
        if (not budget.eval_every or result.steps >= budget.max_steps) and not already_scored:
            stop = checkpoint_eval()
        if stop or result.steps >= budget.max_steps:
            break

    result.stopped_early = stop
    if best_state is not None and result.best_step != result.steps:
        restore(params, best_state)
        log.info("%s: restored parameters from step %s (val_nll=%s)", label, result.best_step, result.best_val)
    return result

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from mixedprefix.autodiff.graph import Graph
from mixedprefix.autodiff.rng import RngStream
from mixedprefix.errors import ContractViolation, EmptyTargetsError
from mixedprefix.lm.batching import collate
from mixedprefix.lm.model import LmModel, lm_forward, nll_per_token
from mixedprefix.lm.optim import AdamW, AdamWConfig
from mixedprefix.lm.scoring import mean_nll
from mixedprefix.lm.training import TrainingBudget, TrainingResult, ensure_finite, fit
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.lm.pretrain")


@dataclass
class PretrainResult:
    model: LmModel
    training: TrainingResult
    initial_val_nll: Optional[float]
    final_val_nll: Optional[float]
    checkpoint: Optional[Path] = None

    def summary(self) -> Dict[str, Any]:
        return {
            "initial_val_nll": self.initial_val_nll,
            "final_val_nll": self.final_val_nll,
            "training": self.training.to_dict(),
            "parameters": self.model.parameter_count(),
        }


def pretrain_backbone(
    model: LmModel,
    train: Sequence[Sequence[int]],
    val: Optional[Sequence[Sequence[int]]] = None,
    optimizer: Optional[AdamWConfig] = None,
    budget: Optional[TrainingBudget] = None,
    rng: Optional[RngStream] = None,
    out_path: Optional[Path] = None,
    eval_batch_size: int = 64,
) -> PretrainResult:
    """Train every backbone tensor on a pooled corpus, then freeze the model."""
    if model.frozen:
        raise ContractViolation("pretrain_backbone needs an unfrozen model")
    budget = budget or TrainingBudget()
    rng = rng or RngStream(0, "pretrain")
    opt = AdamW(model.params, optimizer)

    def step(rows: list[int], n: int) -> Optional[float]:
        batch = collate([train[r] for r in rows])
        if batch.n_targets == 0:
            return None
        g = Graph()
        out = lm_forward(model, g, batch.inputs, None, rng.child(f"dropout/{n}"))
        loss = nll_per_token(out.logits, batch.targets)
        ensure_finite(float(loss.value), n, model.params)
        opt.step(g.backward(loss))
        return float(loss.value)

    def evaluate() -> float:
        return mean_nll(model, val, eval_batch_size)

    has_val = bool(val)
    initial = None
    if has_val:
        try:
            initial = evaluate()
        except EmptyTargetsError:
            has_val = False
    training = fit(len(train), step, model.params, budget, rng.child("order"), evaluate if has_val else None, "pretrain")
    final = evaluate() if has_val else None
    model.freeze()
    log.info("pretraining done: val_nll %s -> %s after %d steps", initial, final, training.steps)

    result = PretrainResult(model, training, initial, final)
    if out_path is not None:
        result.checkpoint = model.save(Path(out_path), {"pretraining": result.summary()})
    return result

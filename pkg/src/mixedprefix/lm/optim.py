from __future__ import annotations

from typing import Dict, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from mixedprefix.autodiff.graph import Tensor


class AdamWConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)


class AdamW:
    """
    Decoupled weight decay with adaptive moments over named Tensors.

    Step counts are kept per parameter, so a tensor that is absent from a
    step's gradients (a no-pool copy whose group was not in the batch) keeps
    its own bias correction.
    """

    def __init__(self, params: Mapping[str, Tensor], config: Optional[AdamWConfig] = None):
        self.params = dict(params)
        self.config = config or AdamWConfig()
        self.state: Dict[str, Dict[str, np.ndarray]] = {}
        self.steps: Dict[str, int] = {}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        cfg = self.config
        for name, grad in grads.items():
            p = self.params.get(name)
            if p is None or grad is None:
                continue
            st = self.state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
            t = self.steps.get(name, 0) + 1
            self.steps[name] = t
            st["m"] = cfg.beta1 * st["m"] + (1.0 - cfg.beta1) * grad
            st["v"] = cfg.beta2 * st["v"] + (1.0 - cfg.beta2) * grad * grad
            m_hat = st["m"] / (1.0 - cfg.beta1**t)
            v_hat = st["v"] / (1.0 - cfg.beta2**t)
            p.data *= 1.0 - cfg.lr * cfg.weight_decay
            p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name, st in self.state.items():
            out[f"{name}/m"] = st["m"].copy()
            out[f"{name}/v"] = st["v"].copy()
            out[f"{name}/t"] = np.array(float(self.steps[name]))
        return out

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from mixedprefix.config import REFERENCE_REGULARIZER, REFERENCE_STAR_DROPOUT


class MetHyperparams(BaseModel):
    """Random-effect controls: star dropout ε and the pull β toward the shared prefix."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    epsilon: float = Field(default=REFERENCE_STAR_DROPOUT, ge=0.0, le=1.0)
    beta: float = Field(default=REFERENCE_REGULARIZER, ge=0.0)
    star_gradient: Literal["flow-through", "stopped"] = "flow-through"
    dropout_mode: Literal["per-slot", "all-or-none"] = "per-slot"


class PrefixConfig(BaseModel):
    """Architecture of θ: embedding table W_E and the prefix MLP(s)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    embed_dim: int = Field(default=64, gt=0)
    hidden: int = Field(default=64, gt=0)
    mlp_mode: Literal["shared", "independent"] = "shared"
    init_std: float = Field(default=0.02, gt=0.0)

from __future__ import annotations

from typing import Any, Dict, Optional


class MixedPrefixError(RuntimeError):
    """Base error. `payload` carries structured detail for the CLI's error JSON."""

    def __init__(self, message: str, payload: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.payload: Dict[str, Any] = dict(payload or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ok": False,
            "error": type(self).__name__,
            "message": str(self),
            "payload": self.payload,
        }


class ShapeError(MixedPrefixError):
    def __init__(self, primitive: str, shapes: list[tuple[int, ...]], detail: str = ""):
        msg = f"{primitive}: incompatible shapes {shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg, {"primitive": primitive, "shapes": [list(s) for s in shapes]})
        self.primitive = primitive
        self.shapes = shapes


class GraphError(MixedPrefixError):
    pass


class EmptyTargetsError(MixedPrefixError):
    pass


class VocabularyOverflowError(MixedPrefixError):
    def __init__(self, feature: str, capacity: int, value: str):
        super().__init__(
            f"feature '{feature}' is full ({capacity} values); cannot add '{value}'",
            {"feature": feature, "capacity": capacity, "value": value},
        )
        self.feature = feature


class UnknownFeatureValueError(MixedPrefixError):
    pass


class ContractViolation(MixedPrefixError):
    pass


class TrainingDiverged(MixedPrefixError):
    """Non-finite loss. `last_good` holds the parameter snapshot before the failing step."""

    def __init__(self, message: str, step: int, last_good: Optional[Dict[str, Any]] = None):
        super().__init__(message, {"step": step})
        self.step = step
        self.last_good = last_good or {}


class ConvergenceError(MixedPrefixError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message, {"iterations": len(trace), "trace_tail": trace[-10:]})
        self.trace = trace


class RankDeficientError(MixedPrefixError):
    pass


class CorpusFormatError(MixedPrefixError):
    pass


class SplitError(MixedPrefixError):
    pass


class ConfigError(MixedPrefixError):
    pass


class CheckpointError(MixedPrefixError):
    pass

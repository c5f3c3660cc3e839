from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from mixedprefix.autodiff.graph import Graph, Node, Tensor
from mixedprefix.autodiff.rng import RngStream
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.autodiff.gradcheck")

LossBuilder = Callable[[Graph, Dict[str, Node]], Node]


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    location: Optional[tuple[int, ...]]
    checked: int
    passed: bool
    nan_at: Optional[str] = None


@dataclass
class CheckReport:
    tol: float
    params: Dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params.values())

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params.values()), default=0.0)

    def summary(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "max_rel_error": self.max_rel_error,
            "params": {
                k: {"max_rel_error": p.max_rel_error, "location": p.location, "passed": p.passed, "nan_at": p.nan_at}
                for k, p in self.params.items()
            },
        }


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _scalar_loss(f: LossBuilder, params: Mapping[str, Tensor]) -> float:
    g = Graph(grad_enabled=False)
    nodes = {name: g.param(t, name) for name, t in params.items()}
    return float(f(g, nodes).value)


def gradient_check(
    f: LossBuilder,
    params: Mapping[str, Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
    atol: float = 1e-10,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> CheckReport:
    """
    Compare analytic gradients against central finite differences.

    `f` must be deterministic: any RngStream it uses has to be created inside
    the builder. Element pairs whose absolute difference is below `atol` count
    as exact agreement (finite-difference round-off floor for near-zero
    gradients). `max_elements` caps the number of probed elements per
    parameter; the subset is drawn from a fixed stream.
    """
    saved_flags = {name: t.requires_grad for name, t in params.items()}
    for t in params.values():
        t.requires_grad = True
    try:
        graph = Graph()
        nodes = {name: graph.param(t, name) for name, t in params.items()}
        loss = f(graph, nodes)
        analytic = graph.backward(loss, wrt=params)
    finally:
        for name, t in params.items():
            t.requires_grad = saved_flags[name]

    report = CheckReport(tol=tol)
    for name, tensor in params.items():
        grad = analytic[name]
        flat_indices = np.arange(tensor.size)
        if max_elements is not None and tensor.size > max_elements:
            rng = RngStream(seed, f"gradcheck/{name}")
            flat_indices = np.sort(rng.permutation(tensor.size)[:max_elements])

        worst, worst_loc, nan_at = 0.0, None, None
        for flat in flat_indices:
            idx = np.unravel_index(int(flat), tensor.shape) if tensor.shape else ()
            orig = tensor.data[idx]
            tensor.data[idx] = orig + step
            fp = _scalar_loss(f, params)
            tensor.data[idx] = orig - step
            fm = _scalar_loss(f, params)
            tensor.data[idx] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(grad[idx])
            if not (np.isfinite(a) and np.isfinite(numeric)):
                nan_at = f"{name}{tuple(int(i) for i in idx)}"
                worst, worst_loc = float("nan"), tuple(int(i) for i in idx)
                break
            err = 0.0 if abs(a - numeric) <= atol else relative_error(a, numeric)
            if err > worst:
                worst, worst_loc = err, tuple(int(i) for i in idx)

        passed = nan_at is None and worst < tol
        report.params[name] = ParamCheck(name, worst, worst_loc, len(flat_indices), passed, nan_at)
        if not passed:
            log.warning("gradient check failed for %s: rel_error=%s at %s", name, worst, worst_loc)
    return report

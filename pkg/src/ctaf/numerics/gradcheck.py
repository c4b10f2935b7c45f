"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .core import Tensor, backward, parameters


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    checked_entries: dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err <= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL " + ",".join(self.failures)
        return f"grad_check max_rel_err={self.max_error:.3e} tol={self.tol:.0e} {status}"


def grad_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    values: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare ``backward`` against central differences for every named input.

    ``fn`` rebuilds the graph from a dict of leaf tensors and returns a scalar.
    The relative error of a parameter is ``max|a - n| / max(max|a|, max|n|, floor * G)``
    over its checked entries (a = analytic, n = numeric, G = largest analytic
    entry over all inputs), i.e. the worst deviation measured against that
    parameter's own gradient scale. The ``floor * G`` term keeps structurally
    zero gradients (e.g. attention key biases, which softmax shift-invariance
    cancels) from dividing round-off by round-off. With
    ``max_entries`` set, larger tensors are checked on a seeded random subset.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in values.items()}
    leaves = parameters(base)
    analytic = backward(fn(leaves), leaves)
    G = max((float(np.abs(g).max(initial=0.0)) for g in analytic.values()), default=0.0)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(eps=eps, tol=tol)

    def evaluate() -> float:
        return float(fn(parameters(base, requires_grad=False)).data)

    for name, arr in base.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        a = analytic[name].reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor * G, 1e-300)
        report.errors[name] = float(np.abs(a - numeric).max(initial=0.0) / scale)
        report.checked_entries[name] = int(idx.size)
    return report

"""Tensor node type and the reverse-mode sweep.

Every value that takes part in a differentiable computation is a
:class:`Tensor`. Operators (see :mod:`ctaf.numerics.ops`) create new nodes
holding a reference to their parents plus a closure that maps the output
gradient to one gradient per parent. :func:`backward` walks the DAG in reverse
topological order and returns a gradient map keyed by parameter name.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

# Additive logit mask for invalid keys. exp(-1e9 - max) underflows to exactly 0.0.
MASK_VALUE = -1e9

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_check_finite = True


class NumericError(FloatingPointError):
    """Raised when an operator produces a non-finite value."""


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the per-node NaN/Inf check; returns the previous setting."""
    global _check_finite
    previous = _check_finite
    _check_finite = bool(enabled)
    return previous


class Tensor:
    """Dense float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "parents", "backward_fn", "op", "name", "requires_grad")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        *,
        parents: tuple["Tensor", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward_fn: BackwardFn,
        op: str,
    ) -> "Tensor":
        """Build an operator node. Graph edges are only kept when a parent needs grad."""
        data = np.asarray(data, dtype=DTYPE)
        # a single reduction propagates any NaN/Inf; cheaper than isfinite().all()
        if _check_finite and not np.isfinite(np.add.reduce(data, axis=None)):
            names = ", ".join(p.name or p.op for p in parents)
            raise NumericError(f"non-finite output in node '{op}' (inputs: {names})")
        if any(p.requires_grad for p in parents):
            return cls(data, True, parents=tuple(parents), backward_fn=backward_fn, op=op)
        return cls(data, False, op=op)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.data.shape})"

    # Arithmetic sugar; implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameters(values: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap named arrays as leaf tensors (copies are not made)."""
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in values.items()}


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to every tensor in ``params``.

    Parameters that are not on any path to ``output`` receive a zero array of
    their own shape.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.data.shape}")
    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(_topological_order(output)):
            if node.backward_fn is None:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ValueError(
                        f"gradient rule of '{node.op}' returned shape {pg.shape} "
                        f"for parent of shape {parent.data.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = {}
    for name, t in params.items():
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else np.array(g, dtype=DTYPE)
    return out

"""Define-by-run reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Var` objects that
live on it. ``Tape.backward(loss)`` walks the records in reverse and
accumulates vector-Jacobian products into the leaves.

Complex values follow the usual convention for real losses: the gradient of
a complex quantity ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``, so a complex
linear map ``y = A z`` has adjoint ``A^H``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's broadcasting rule."""


class ContractError(ValueError):
    """A precondition of a tape operation was violated."""


class Var:
    """A value, its gradient buffer (leaves only), and the tape it is recorded on."""

    __slots__ = ("value", "grad", "tape", "id", "is_leaf")

    def __init__(self, value, tape: "Tape | None" = None, is_leaf: bool = False):
        arr = np.asarray(value)
        if arr.dtype.kind == "c":
            arr = arr.astype(np.complex128, copy=False)
        else:
            arr = arr.astype(np.float64, copy=False)
        self.value = arr
        self.grad = np.zeros_like(arr) if is_leaf else None
        self.tape = tape
        self.id = next(_ids)
        self.is_leaf = is_leaf

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_complex(self) -> bool:
        return self.value.dtype.kind == "c"

    def __repr__(self) -> str:
        kind = "complex" if self.is_complex else "real"
        return f"Var(shape={self.shape}, kind={kind}, tracked={self.tape is not None})"

    # operator sugar; the primitives live in afno.tensor.ops
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

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def const(x) -> Var:
    """An untracked value (no gradient flows into it)."""
    return Var(x.value if isinstance(x, Var) else x)


def detach(x: Var) -> Var:
    return Var(x.value)


class Tape:
    """Ordered record of primitive applications on one computation."""

    def __init__(self):
        self.nodes: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self.leaves: list[Var] = []

    def leaf(self, value) -> Var:
        v = Var(np.array(value, copy=True), tape=self, is_leaf=True)
        self.leaves.append(v)
        return v

    def record(self, out: Var, inputs: Sequence[Var], vjp: Callable) -> None:
        self.nodes.append((out, tuple(inputs), vjp))

    def backward(self, loss: Var, release: bool = False) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

        Returns a map from leaf id to gradient array. With ``release`` each
        node is dropped once processed, freeing activations as the sweep
        proceeds; the tape cannot be differentiated again afterwards.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss must be a Var recorded on this tape")
        if loss.value.size != 1 or loss.is_complex:
            raise ContractError(f"loss must be a real scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        if release:
            nodes, self.nodes = self.nodes, []
            walk = (nodes.pop() for _ in range(len(nodes)))
        else:
            walk = reversed(self.nodes)
        for out, inputs, vjp in walk:
            g = grads.pop(out.id, None)
            if g is None:
                continue
            in_grads = vjp(g)
            for var, gi in zip(inputs, in_grads):
                if gi is None or var.tape is not self:
                    continue
                if var.id in grads:
                    grads[var.id] = grads[var.id] + gi
                else:
                    grads[var.id] = gi
        result = {}
        for leaf in self.leaves:
            g = grads.get(leaf.id)
            if g is None:
                g = np.zeros_like(leaf.value)
            g = np.asarray(g)
            if not leaf.is_complex and g.dtype.kind == "c":
                g = g.real
            leaf.grad = leaf.grad + g.reshape(leaf.shape)
            result[leaf.id] = leaf.grad
        return result


def tape_of(*xs: Var) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("operands are recorded on different tapes")
            tape = x.tape
    return tape


def emit(value, inputs: Sequence[Var], vjp: Callable) -> Var:
    """Wrap a primitive's output value and record its adjoint when tracked."""
    tape = tape_of(*inputs)
    out = Var(value, tape=tape)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out

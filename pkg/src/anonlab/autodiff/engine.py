"""Reverse-mode autodiff core: tensors, tapes, backward traversal.

Tensors wrap numpy arrays. Operations record nodes onto the active Tape
(see ops.py); ``backward`` walks the tape in reverse creation order and
sums gradients across fan-out, which makes gradient accumulation
deterministic. Precision is a process-global mode: float32 for training,
float64 for oracle checks.

Tapes are single-threaded. Tensors are value-semantic: optimizers rebind
``tensor.data`` to fresh arrays instead of writing in place, so arrays
saved on an old tape stay valid for replay.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when input shapes are invalid for a primitive."""


class CatalogError(ValueError):
    """Raised when a primitive id is not in the catalog."""


_VALID_MODES = {"float32": np.float32, "float64": np.float64}
_mode_lock = threading.Lock()
_current_dtype = np.float32


def set_precision(mode: str) -> None:
    """Set the global precision mode ('float32' or 'float64')."""
    global _current_dtype
    if mode not in _VALID_MODES:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_VALID_MODES)}")
    with _mode_lock:
        _current_dtype = _VALID_MODES[mode]


def current_dtype() -> np.dtype:
    return np.dtype(_current_dtype)


class precision:
    """Context manager that switches the global precision mode.

    >>> with precision("float64"):
    ...     t = Tensor([1.0, 2.0])
    """

    def __init__(self, mode: str):
        self.mode = mode
        self._saved: Optional[str] = None

    def __enter__(self) -> "precision":
        self._saved = str(current_dtype())
        set_precision(self.mode)
        return self

    def __exit__(self, *exc) -> None:
        set_precision("float64" if self._saved == "float64" else "float32")


class Tensor:
    """N-dimensional numeric array that can participate in a tape.

    ``requires_grad`` marks trainable leaves; intermediate results inherit
    it so dead branches can be skipped during backward. ``node_id`` is the
    handle on the tape the tensor was last registered on.
    """

    __slots__ = ("data", "requires_grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=current_dtype())
        self.requires_grad = bool(requires_grad)
        self.tape: Optional[Tape] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic operators are attached by ops.py to avoid an import cycle.


def as_tensor(value) -> Tensor:
    """Wrap plain values; pass Tensors through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class TapeNode:
    """One forward record: primitive id, input handles, saved activations."""

    node_id: int
    prim: str
    input_ids: tuple
    attrs: dict
    out: np.ndarray
    inputs: tuple  # saved input arrays, in order
    stash: Any = None  # primitive-private saved intermediates
    requires_grad: bool = False  # leaf flag / reachable-from-grad-leaf flag


class Tape:
    """Ordered record of primitive applications; creation order is topological.

    Use as a context manager to make it the active tape for the current
    thread. Nested tapes are allowed; the innermost one records.
    """

    _active = threading.local()

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.leaf_tensors: dict[int, Tensor] = {}  # node id -> registered tensor

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._active, "stack", None)
        if stack is None:
            stack = []
            Tape._active.stack = stack
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.stack.pop()

    @staticmethod
    def active() -> Optional["Tape"]:
        stack = getattr(Tape._active, "stack", None)
        return stack[-1] if stack else None

    def register_leaf(self, t: Tensor) -> int:
        """Register a tensor as a leaf (idempotent per tape)."""
        if t.tape is self and t.node_id is not None:
            return t.node_id
        nid = len(self.nodes)
        self.nodes.append(
            TapeNode(nid, "leaf", (), {}, t.data, (), None, t.requires_grad)
        )
        self.leaf_tensors[nid] = t
        t.tape = self
        t.node_id = nid
        return nid

    def record(
        self,
        prim: str,
        input_ids: tuple,
        attrs: dict,
        out: np.ndarray,
        inputs: tuple,
        stash: Any,
        requires_grad: bool,
    ) -> int:
        nid = len(self.nodes)
        self.nodes.append(
            TapeNode(nid, prim, input_ids, attrs, out, inputs, stash, requires_grad)
        )
        return nid

    def replay(self) -> list[np.ndarray]:
        """Re-execute all forward records from the saved leaf values.

        Returns the recomputed output array of every node, in order. In
        single-threaded mode this reproduces the recorded outputs bitwise.
        """
        from . import ops  # local import: ops depends on engine

        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.prim == "leaf":
                values.append(node.out)
            else:
                args = [values[i] for i in node.input_ids]
                result = ops.run_forward(node.prim, args, node.attrs)
                values.append(result)
        return values


class GradientMap:
    """Gradients of a scalar loss w.r.t. each requires_grad leaf of a tape.

    Keys are tape node ids; every requires_grad leaf has an entry whose
    shape matches the parameter (zeros when the loss does not depend on it).
    Leaf identity is captured at backward time, so the map stays valid after
    the same tensors are reused on later tapes.
    """

    def __init__(self, tape: Tape, entries: dict[int, np.ndarray]):
        self._tape = tape
        self._entries = entries
        self._by_obj = {
            id(tape.leaf_tensors[nid]): g
            for nid, g in entries.items()
            if nid in tape.leaf_tensors
        }

    def wrt(self, t: Tensor) -> np.ndarray:
        hit = self._by_obj.get(id(t))
        if hit is not None:
            return hit
        if t.tape is not self._tape or t.node_id is None:
            raise KeyError("tensor is not a leaf of the tape this map was computed on")
        if t.node_id not in self._entries:
            raise KeyError("tensor is not a requires_grad leaf")
        return self._entries[t.node_id]

    def get(self, t: Tensor) -> Optional[np.ndarray]:
        try:
            return self.wrt(t)
        except KeyError:
            return None

    def ids(self) -> Iterator[int]:
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def __contains__(self, t: Tensor) -> bool:
        return self.get(t) is not None

    def __len__(self) -> int:
        return len(self._entries)


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode sweep from a scalar loss over its tape.

    Gradients are accumulated by summation across fan-out, visiting nodes
    in reverse creation order (reverse topological order), so results are
    deterministic for a fixed tape.
    """
    from . import ops  # local import: ops depends on engine

    if loss.tape is None or loss.node_id is None:
        raise ValueError("loss tensor is not on a tape; run the forward pass inside `with Tape():`")
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")

    tape = loss.tape
    nodes = tape.nodes
    grads: list[Optional[np.ndarray]] = [None] * len(nodes)
    grads[loss.node_id] = np.ones_like(loss.data)

    for node in reversed(nodes):
        g = grads[node.node_id]
        if g is None or node.prim == "leaf":
            continue
        if not node.requires_grad:
            continue
        input_grads = ops.run_backward(node.prim, g, node.inputs, node.out, node.attrs, node.stash)
        for iid, ig in zip(node.input_ids, input_grads):
            if ig is None:
                continue
            if not nodes[iid].requires_grad:
                continue
            if grads[iid] is None:
                grads[iid] = ig
            else:
                grads[iid] = grads[iid] + ig

    entries: dict[int, np.ndarray] = {}
    for node in nodes:
        if node.prim == "leaf" and node.requires_grad:
            g = grads[node.node_id]
            entries[node.node_id] = g if g is not None else np.zeros_like(node.out)
    return GradientMap(tape, entries)

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from main.exceptions import ContractError

logger = logging.getLogger(__name__)

_local = threading.local()

# Operation kinds whose backward rule is deliberately perturbed (mutation testing).
_CORRUPTED_KINDS: set[str] = set()
CORRUPTION_FACTOR = 1.5


@dataclass
class Node:
    kind: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """
    Define-by-run record of differentiable operations.

    Nodes are appended while the forward pass runs, so every node's inputs
    precede it. A tape is single-writer; use one per thread. Outside a
    ``with Tape():`` block nothing is recorded.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, inputs, backward) -> int:
        self.nodes.append(Node(kind, tuple(inputs), backward))
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor") -> "GradientMap":
        if loss.data.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        node_grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}

        for node_id in range(loss.node_id, -1, -1):
            grad_out = node_grads.pop(node_id, None)
            if grad_out is None:
                continue
            node = self.nodes[node_id]
            grads_in = node.backward(grad_out)
            if node.kind in _CORRUPTED_KINDS:
                grads_in = tuple(
                    None if g is None else g * CORRUPTION_FACTOR for g in grads_in
                )
            for tensor, grad in zip(node.inputs, grads_in):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.node_id is not None and tensor._tape is self:
                    _accumulate(node_grads, tensor.node_id, grad)
                elif tensor.node_id is None:
                    _accumulate(leaf_grads, id(tensor), grad)
                    leaves[id(tensor)] = tensor

        return GradientMap(leaves, leaf_grads)


def _accumulate(store, key, grad):
    if key in store:
        store[key] = store[key] + grad
    else:
        store[key] = np.array(grad, dtype=np.float64)


class GradientMap:
    """Gradients of the requires_grad leaves reached by a backward pass."""

    def __init__(self, leaves, grads):
        self._leaves = leaves
        self._grads = grads

    def __getitem__(self, tensor: "Tensor") -> np.ndarray:
        if not tensor.requires_grad or tensor.node_id is not None:
            raise ContractError("gradients are only reported for requires_grad leaves")
        grad = self._grads.get(id(tensor))
        if grad is None:
            return np.zeros(tensor.shape)
        return grad.reshape(tensor.shape)

    def __contains__(self, tensor):
        return id(tensor) in self._grads

    def __len__(self):
        return len(self._grads)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    """Innermost active tape, or None when operations run untracked."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def corrupt_backward(*kinds):
    """Test hook: scale the backward rule of the named operation kinds."""
    added = set(kinds) - _CORRUPTED_KINDS
    _CORRUPTED_KINDS.update(added)
    logger.warning(f"[TAPE] corrupting backward rules kinds={sorted(added)}")
    try:
        yield
    finally:
        _CORRUPTED_KINDS.difference_update(added)


class Tensor:
    """
    Dense, immutable float64 array with optional gradient tracking.

    Tensors produced by a tracked operation carry the id of their tape node;
    leaves (parameters, inputs) have ``node_id`` None.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @classmethod
    def _from_op(cls, data, tape, node_id):
        out = cls(data, requires_grad=True)
        out.node_id = node_id
        out._tape = tape
        return out

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return ops.elementwise("add", self, other)

    def __radd__(self, other):
        return ops.elementwise("add", other, self)

    def __sub__(self, other):
        return ops.elementwise("sub", self, other)

    def __rsub__(self, other):
        return ops.elementwise("sub", other, self)

    def __mul__(self, other):
        return ops.elementwise("mul", self, other)

    def __rmul__(self, other):
        return ops.elementwise("mul", other, self)

    def __truediv__(self, other):
        return ops.elementwise("div", self, other)

    def __rtruediv__(self, other):
        return ops.elementwise("div", other, self)

    def __neg__(self):
        return ops.elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, key):
        return ops.getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode sweep over the tape that recorded ``loss``."""
    if loss._tape is None:
        raise ContractError("loss is not on a tape (nothing requires grad)")
    return loss._tape.backward(loss)


from tensor_core import ops  # noqa: E402

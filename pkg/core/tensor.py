# core/tensor.py
"""
Dense tensors with a per-pass gradient tape.

A ``Tensor`` wraps a contiguous numpy array. Leaf tensors created with
``requires_grad=True`` are parameters; every differentiable op run while a
``Tape`` is active appends one node holding the backward rule, and the
output tensor keeps a handle (``grad_node``) into that tape.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.errors import ContractError, TapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


@dataclass
class Node:
    """One recorded operation: inputs plus the rule mapping dOut to dInputs."""

    op: str
    inputs: Tuple["Tensor", ...]
    backward: BackwardFn


class Tape:
    """Append-only operation record owned by a single forward/backward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded when at least one input is tracked. Tapes are thread-local,
    so independent passes may run on different threads.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple["Tensor", ...], backward: BackwardFn) -> int:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); start a new forward pass")
        self.nodes.append(Node(op=op, inputs=inputs, backward=backward))
        return len(self.nodes) - 1


def _stack() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> Optional[Tape]:
    """The innermost active tape of the calling thread, if any."""
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-dimensional array with an optional gradient-tape handle."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: Optional[str] = None,
    ):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.grad_node: Optional[int] = None
        self.name = name
        self._tape: Optional[Tape] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.grad_node is None

    def tracked_on(self, tape: Tape) -> bool:
        """True when gradients must flow into this tensor on ``tape``."""
        if self.grad_node is None:
            return self.requires_grad
        return self._tape is tape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        flags = " requires_grad" if self.requires_grad else ""
        node = f" node={self.grad_node}" if self.grad_node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}{flags}{node})"

    # -- operator sugar; the actual rules live in core.functional -------
    def __add__(self, other: "Tensor") -> "Tensor":
        from core import functional as F
        return F.add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other: "Tensor") -> "Tensor":
        from core import functional as F
        return F.sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        from core import functional as F
        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from core import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from core import functional as F
        return F.matmul(self, other)

    @property
    def T(self) -> "Tensor":
        from core import functional as F
        return F.transpose(self)


def _as_tensor(value: Union[Tensor, ArrayLike], dtype: np.dtype) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def parameter(data: ArrayLike, name: Optional[str] = None, dtype: Optional[np.dtype] = None) -> Tensor:
    """Create a learnable leaf tensor."""
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def record(op: str, out_data: np.ndarray, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap an op result, appending a tape node when any input is tracked."""
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = current_tape()
    if tape is not None and any(t.tracked_on(tape) for t in inputs):
        out.grad_node = tape.record(op, inputs, backward)
        out._tape = tape
    return out


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode pass from a scalar loss.

    Visits the tape nodes once each, in reverse insertion order, and
    accumulates ``d loss / d param`` into every tracked leaf's ``.grad``.
    The tape is consumed and its saved activations released.

    Args:
        loss: Scalar tensor produced on an active tape.

    Returns:
        Mapping from each reached leaf tensor to its gradient for this pass.

    Raises:
        ContractError: If ``loss`` is not a scalar.
        TapeError: If ``loss`` is detached or its tape was already consumed.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.grad_node is None:
        raise TapeError("loss is not attached to a gradient tape")
    if tape.consumed:
        raise TapeError("backward() already ran for this forward pass")

    node_grads: List[Optional[np.ndarray]] = [None] * (loss.grad_node + 1)
    node_grads[loss.grad_node] = np.ones_like(loss.data)
    leaf_grads: Dict[int, np.ndarray] = {}
    leaves: Dict[int, Tensor] = {}

    for index in range(loss.grad_node, -1, -1):
        grad_out = node_grads[index]
        if grad_out is None:
            continue
        node_grads[index] = None
        node = tape.nodes[index]
        for inp, grad_in in zip(node.inputs, node.backward(grad_out)):
            if grad_in is None or not inp.tracked_on(tape):
                continue
            if inp.grad_node is not None:
                slot = inp.grad_node
                node_grads[slot] = grad_in if node_grads[slot] is None else node_grads[slot] + grad_in
            else:
                key = id(inp)
                leaves[key] = inp
                leaf_grads[key] = grad_in if key not in leaf_grads else leaf_grads[key] + grad_in

    tape.consumed = True
    tape.nodes.clear()

    result: Dict[Tensor, np.ndarray] = {}
    for key, grad in leaf_grads.items():
        leaf = leaves[key]
        grad = grad.astype(leaf.dtype, copy=False).reshape(leaf.shape)
        leaf.grad = grad if leaf.grad is None else leaf.grad + grad
        result[leaf] = grad
    logger.debug(f"backward reached {len(result)} leaf tensors")
    return result

"""Dense double-precision tensors and shape-checked numeric kernels.

All values are float64 in row-major order. Kernels are pure functions:
the same inputs give bit-identical outputs on a given machine (no internal
parallelism, no stochastic algorithms). The only broadcast rule supported
by the binary elementwise kernels is a length-D vector against an N x D
matrix along rows.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DomainError, ParseError, ShapeError

MMT1_MAGIC = b"MMT1"


class Tensor:
    """Immutable dense array of float64, row-major.

    ``shape`` is a tuple of extents and ``data`` a flat row-major view of
    the payload; ``len(data) == prod(shape)`` always holds.
    """

    __slots__ = ("array",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.array = arr

    @classmethod
    def _wrap(cls, arr) -> "Tensor":
        # freeze in place when we own the buffer; copy only views
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.base is not None or not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.array = arr
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=np.float64))

    @classmethod
    def ones(cls, shape) -> "Tensor":
        return cls._wrap(np.ones(shape, dtype=np.float64))

    @classmethod
    def from_flat(cls, shape, flat) -> "Tensor":
        flat = np.asarray(flat, dtype=np.float64)
        n = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        if flat.size != n:
            raise ShapeError(
                f"flat payload of length {flat.size} does not fill shape {tuple(shape)}"
            )
        return cls._wrap(flat.reshape(tuple(shape)))

    @property
    def shape(self):
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the payload."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def tolist(self):
        return self.array.tolist()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.array)))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.array, other.array))

    def __hash__(self):
        return id(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an N x K and a K x P tensor.

    An empty inner dimension yields zeros (empty-sum convention).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    return Tensor._wrap(a.array @ b.array)


def _broadcast_pair(a: Tensor, b: Tensor):
    """Resolve the supported elementwise shape combinations.

    Allowed: equal shapes, or a length-D vector against an N x D matrix
    (in either operand position), broadcast along rows.
    """
    if a.shape == b.shape:
        return a.array, b.array
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return a.array, b.array[None, :]
    if a.ndim == 1 and b.ndim == 2 and b.shape[1] == a.shape[0]:
        return a.array[None, :], b.array
    raise ShapeError(f"elementwise shapes incompatible: {a.shape} vs {b.shape}")


_UNARY_OPS = {"exp", "log", "pow2", "neg", "relu"}
_BINARY_OPS = {"add", "sub", "mul", "div"}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply a named elementwise kernel.

    ``div`` rejects any exact-zero divisor element and ``log`` any
    nonpositive input, so finite in-domain inputs give finite outputs.
    """
    a = _as_tensor(a)
    if op in _UNARY_OPS:
        if b is not None:
            raise ShapeError(f"unary op '{op}' takes one operand")
        x = a.array
        if op == "exp":
            return Tensor._wrap(np.exp(x))
        if op == "log":
            if np.any(x <= 0.0):
                raise DomainError("log of nonpositive value")
            return Tensor._wrap(np.log(x))
        if op == "pow2":
            return Tensor._wrap(x * x)
        if op == "neg":
            return Tensor._wrap(-x)
        return Tensor._wrap(np.maximum(x, 0.0))
    if op in _BINARY_OPS:
        if b is None:
            raise ShapeError(f"binary op '{op}' takes two operands")
        xa, xb = _broadcast_pair(a, _as_tensor(b))
        if op == "add":
            return Tensor._wrap(xa + xb)
        if op == "sub":
            return Tensor._wrap(xa - xb)
        if op == "mul":
            return Tensor._wrap(xa * xb)
        if np.any(xb == 0.0):
            raise DomainError("division by exact zero")
        return Tensor._wrap(xa / xb)
    raise ShapeError(f"unknown elementwise op '{op}'")


def reduce(op: str, a: Tensor, axis: int | None = None) -> Tensor:
    """Sum or mean over all elements (no axis) or along one axis."""
    a = _as_tensor(a)
    if op not in ("sum", "mean"):
        raise ShapeError(f"unknown reduction '{op}'")
    if axis is not None:
        if not (0 <= axis < a.ndim):
            raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    x = a.array
    if op == "sum":
        return Tensor._wrap(np.sum(x, axis=axis))
    return Tensor._wrap(np.mean(x, axis=axis))


def l2_norm_cols(a: Tensor) -> Tensor:
    """Per-column Euclidean norm of an N x D matrix: sqrt(sum_i a[i,k]^2)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"l2_norm_cols needs a rank-2 tensor, got {a.shape}")
    return Tensor._wrap(np.sqrt(np.sum(a.array * a.array, axis=0)))


def save_mmt1(path, tensor: Tensor) -> None:
    """Write a tensor in the MMT1 binary format.

    Layout: 4-byte magic ``MMT1``, little-endian u32 rank, rank u32
    extents, then the row-major float64 payload, little-endian.
    """
    tensor = _as_tensor(tensor)
    with open(path, "wb") as f:
        f.write(MMT1_MAGIC)
        f.write(struct.pack("<I", tensor.ndim))
        for extent in tensor.shape:
            f.write(struct.pack("<I", extent))
        f.write(tensor.array.astype("<f8", copy=False).tobytes(order="C"))


def load_mmt1(path) -> Tensor:
    """Read a tensor written by :func:`save_mmt1`.

    Raises :class:`ParseError` on a bad magic, truncated header or a
    payload whose length disagrees with the declared extents.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != MMT1_MAGIC:
        raise ParseError(f"{path}: not an MMT1 file (bad magic)")
    (rank,) = struct.unpack_from("<I", raw, 4)
    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise ParseError(f"{path}: truncated MMT1 header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8) if rank else ()
    count = 1
    for extent in shape:
        if extent == 0:
            raise ParseError(f"{path}: zero extent in shape {shape}")
        count *= extent
    expected = header_end + 8 * count
    if len(raw) != expected:
        raise ParseError(
            f"{path}: payload length {len(raw) - header_end} bytes, expected {8 * count}"
        )
    flat = np.frombuffer(raw, dtype="<f8", offset=header_end, count=count)
    return Tensor.from_flat(shape, flat)

"""Dense 4-D float32 tensors, the gradient tape, and GGT1 serialization.

Everything downstream (kernels, heads, losses) works on these tensors. The
tape holds one hand-written backward closure per executed op; calling
``Tape.backward`` replays them in reverse, accumulating gradients into each
tensor's ``grad`` buffer.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Iterable, Iterator

import numpy as np

MAGIC = b"GGT1"
HEADER_SIZE = 4 + 4 * 4  # magic + four little-endian uint32 shape fields


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class ConfigError(ValueError):
    """A structural parameter (kernel size, stride, channel count) is invalid."""


class Tensor:
    """(batch, channels, height, width) array of float32 with an optional grad buffer."""

    __slots__ = ("data", "grad", "requires_grad", "exact")

    def __init__(self, shape, data=None, requires_grad: bool = True):
        shape = tuple(int(s) for s in shape)
        if len(shape) != 4 or any(s < 0 for s in shape):
            raise ShapeError(f"tensor shape must be 4 nonnegative ints, got {shape}")
        count = int(np.prod(shape, dtype=np.int64))
        if data is None:
            self.data = np.zeros(shape, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=np.float32).reshape(-1)
            if arr.size != count:
                raise ShapeError(f"data has {arr.size} values, shape {shape} needs {count}")
            self.data = np.ascontiguousarray(arr.reshape(shape))
        self.grad = None
        self.requires_grad = requires_grad
        self.exact = None

    @classmethod
    def from_array(cls, arr, requires_grad: bool = True) -> "Tensor":
        arr = np.asarray(arr)
        if arr.ndim != 4:
            raise ShapeError(f"expected a 4-D array, got ndim={arr.ndim}")
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float32)
        t.grad = None
        t.requires_grad = requires_grad
        t.exact = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def scalar(self) -> float:
        """``item()`` at float64 precision when the producing reduction kept it.

        Storage is float32, so a scalar loss read back through ``item()`` is
        quantized to ~1e-7 relative; reductions stash their 64-bit
        accumulator in ``exact`` so finite-difference probes stay usable.
        """
        if self.exact is not None:
            return float(self.exact)
        return self.item()

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def add_grad(self, delta) -> None:
        self.ensure_grad()
        self.grad += np.asarray(delta, dtype=np.float32).reshape(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


# ===== Gradient tape =====

class Tape:
    """Ordered record of backward closures for one forward pass."""

    def __init__(self):
        self._steps = []

    def record(self, step) -> None:
        self._steps.append(step)

    def __len__(self):
        return len(self._steps)

    def backward(self, head: Tensor) -> None:
        if head.size != 1:
            raise ShapeError("backward() starts from a scalar (1,1,1,1) tensor")
        head.ensure_grad()
        head.grad[...] = 1.0
        for step in reversed(self._steps):
            step()


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextmanager
def tape() -> Iterator[Tape]:
    t = Tape()
    _ACTIVE.append(t)
    try:
        yield t
    finally:
        _ACTIVE.pop()


# ===== GGT1 serialization =====

def write_tensor(f, t: Tensor) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<4I", *t.shape))
    f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_tensor(f) -> Tensor:
    head = f.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE:
        raise ValueError("truncated GGT1 header")
    if head[:4] != MAGIC:
        raise ValueError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    shape = struct.unpack("<4I", head[4:])
    count = int(np.prod(shape, dtype=np.int64))
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"truncated GGT1 payload: wanted {4 * count} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return Tensor(shape, arr.copy())


def save_ggt(path, t: Tensor) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_ggt(path) -> Tensor:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_checkpoint(path, tensors: Iterable[tuple[str, Tensor]] | dict) -> None:
    """Write named tensors as concatenated GGT1 records plus a text manifest.

    Manifest lines are ``name b c h w byte_offset`` in write order.
    """
    if isinstance(tensors, dict):
        tensors = tensors.items()
    lines = []
    with open(path, "wb") as f:
        for name, t in tensors:
            if " " in name:
                raise ValueError(f"tensor name {name!r} may not contain spaces")
            offset = f.tell()
            write_tensor(f, t)
            lines.append("%s %d %d %d %d %d" % (name, *t.shape, offset))
    with open(str(path) + ".manifest", "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict:
    entries = []
    with open(str(path) + ".manifest") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"bad manifest line: {line!r}")
            name, rest = parts[0], [int(v) for v in parts[1:]]
            entries.append((name, tuple(rest[:4]), rest[4]))
    out: dict[str, Tensor] = {}
    with open(path, "rb") as f:
        for name, shape, offset in entries:
            f.seek(offset)
            t = read_tensor(f)
            if t.shape != shape:
                raise ValueError(f"manifest/record shape mismatch for {name}: {shape} vs {t.shape}")
            out[name] = t
    return out

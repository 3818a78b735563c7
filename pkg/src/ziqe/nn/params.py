"""Named parameter storage, the Adam optimizer and the binary checkpoint format.

Checkpoint layout (all integers little-endian ``uint32``)::

    b"ZIQE" | version | record*
    record := name_len | name (utf-8) | rank | dim_0 .. dim_{rank-1} | float32 data

Records run until end of file.  Data is stored as little-endian float32 so a
float32 store round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"ZIQE"
FORMAT_VERSION = 1


class ParamStore:
    """Ordered collection of named parameters, each with its own gradient slot.

    Parameters are leaf :class:`Tensor` objects.  Their ``grad`` arrays are
    allocated once and accumulated into in place, so several graph nodes
    reading the same parameter (weight tying) simply add up.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        t._owns_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        """Switch gradient tracking on or off for every name under ``prefix``."""
        for name in self.names(prefix):
            self._params[name].requires_grad = trainable

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self._params if n not in arrays]
        if strict and missing:
            raise KeyError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, arr in arrays.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r} in checkpoint")
                continue
            target = self._params[name]
            if target.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: {target.shape} vs {arr.shape}")
            target.data[...] = arr

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, t in self._params.items():
            out.add(name, t.data)
            out[name].requires_grad = t.requires_grad
        return out


class Adam:
    """Adam with bias correction; state is kept per parameter name."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, names: Iterable[str] | None = None) -> None:
        """Update every trainable parameter (or only ``names``)."""
        if names is None:
            names = [n for n, p in self.store.items() if p.requires_grad]
        names = list(names)
        for name in names:
            if not np.all(np.isfinite(self.store[name].grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in names:
            p = self.store[name]
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, state: Adam | None = None) -> Adam:
    """One Adam update of ``store``; pass the returned state back in next time."""
    if state is None:
        state = Adam(store, lr, beta1, beta2, eps)
    state.step()
    return state


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read every record into a name -> float32 array dict.

    Raises
    ------
    CheckpointError
        Bad magic, unsupported version, or a truncated record; the message
        names the byte offset where reading failed.
    """
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte offset 0")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header at byte offset {len(buf)}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")

    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(buf):
            raise CheckpointError(f"{path}: truncated {what} at byte offset {offset}")

    out: dict[str, np.ndarray] = {}
    off = 8
    while off < len(buf):
        need(off, 4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, nlen, "name")
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        need(off, 4, "rank")
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, off) if rank else ()
        off += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(off, nbytes, f"data of record {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).astype(np.float32)
        off += nbytes
    return out

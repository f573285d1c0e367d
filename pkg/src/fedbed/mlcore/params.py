"""Ordered named tensors: the unit of aggregation, upload, and checkpointing.

The blob format is a human-inspectable JSON manifest; floats are rendered
with shortest round-trip decimals, so serialization is lossless for float64.
"""

from __future__ import annotations

import json
from typing import Iterable, Sequence

import numpy as np

from ..errors import LayoutMismatch, MalformedBlob

PARAMS_FORMAT_VERSION = "1"


class ParamVector:
    """Immutable ordered list of named float64 tensors.

    Order is significant and preserved through serialization; all values
    must be finite.
    """

    __slots__ = ("_names", "_arrays")

    def __init__(self, tensors: Iterable[tuple]):
        names = []
        arrays = []
        for name, array in tensors:
            if not isinstance(name, str) or not name:
                raise MalformedBlob("tensor names must be non-empty strings")
            arr = np.asarray(array, dtype=np.float64)
            if arr.size and not np.all(np.isfinite(arr)):
                raise MalformedBlob(f"tensor {name!r} contains non-finite values")
            names.append(name)
            arr = arr.copy()
            arr.setflags(write=False)
            arrays.append(arr)
        if len(set(names)) != len(names):
            raise MalformedBlob("tensor names must be unique")
        self._names = tuple(names)
        self._arrays = tuple(arrays)

    @property
    def names(self) -> tuple:
        return self._names

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return iter(zip(self._names, self._arrays))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def layout(self) -> tuple:
        return tuple((n, a.shape) for n, a in zip(self._names, self._arrays))

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout() == other.layout()

    def require_same_layout(self, other: "ParamVector") -> None:
        if not self.same_layout(other):
            raise LayoutMismatch(
                f"layouts differ: {self.layout()} vs {other.layout()}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return (self.layout() == other.layout()
                and all(np.array_equal(a, b)
                        for (_, a), (_, b) in zip(self, other)))

    def __repr__(self) -> str:
        parts = ", ".join(f"{n}{list(a.shape)}" for n, a in self)
        return f"ParamVector({parts})"

    def to_flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([a.reshape(-1) for a in self._arrays])

    @classmethod
    def from_flat(cls, layout: Sequence[tuple], flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(int(np.prod(shape)) for _, shape in layout)
        if flat.size != total:
            raise LayoutMismatch(f"flat size {flat.size} != layout size {total}")
        tensors = []
        offset = 0
        for name, shape in layout:
            size = int(np.prod(shape))
            tensors.append((name, flat[offset:offset + size].reshape(shape)))
            offset += size
        return cls(tensors)

    def map(self, fn) -> "ParamVector":
        return ParamVector((n, fn(a)) for n, a in self)

    def combine(self, other: "ParamVector", fn) -> "ParamVector":
        self.require_same_layout(other)
        return ParamVector((n, fn(a, b))
                           for (n, a), (_, b) in zip(self, other))

    def zeros_like(self) -> "ParamVector":
        return self.map(np.zeros_like)

    def l2_norm(self) -> float:
        flat = self.to_flat()
        return float(np.sqrt(np.dot(flat, flat)))


def serialize_params(params: ParamVector) -> bytes:
    doc = {
        "format_version": PARAMS_FORMAT_VERSION,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in params
        ],
    }
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def deserialize_params(data: bytes) -> ParamVector:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedBlob(f"not a parameter manifest: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != PARAMS_FORMAT_VERSION:
        raise MalformedBlob("missing or unsupported format_version")
    raw = doc.get("tensors")
    if not isinstance(raw, list):
        raise MalformedBlob("tensors must be a list")
    tensors = []
    for entry in raw:
        try:
            name = entry["name"]
            shape = tuple(int(d) for d in entry["shape"])
            data_list = entry["data"]
        except (TypeError, KeyError, ValueError) as exc:
            raise MalformedBlob(f"bad tensor entry: {exc}") from exc
        if any(d < 1 for d in shape):
            raise MalformedBlob(f"tensor {name!r} has non-positive dims")
        expected = int(np.prod(shape)) if shape else 1
        if not isinstance(data_list, list) or len(data_list) != expected:
            raise MalformedBlob(
                f"tensor {name!r}: shape/data length mismatch")
        arr = np.asarray(data_list, dtype=np.float64).reshape(shape)
        tensors.append((name, arr))
    return ParamVector(tensors)

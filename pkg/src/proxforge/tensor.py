"""Vector-space primitives shared by every other module.

Numerical code throughout the package works on plain ``numpy`` arrays.  The
types here add what plain arrays lack: a tag naming the Hilbert space an
element lives in (so that mixing, say, an image with a sinogram of the same
size is caught), product-space elements, reproducible random streams and a
small on-disk format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Space",
    "SpaceElement",
    "ProductElement",
    "RngStream",
    "inner",
    "norm",
    "axpby",
    "gaussian_like",
    "save_element",
    "load_element",
]


class DimensionError(ValueError):
    """Raised when two vectors do not belong to the same space."""


@dataclass(frozen=True)
class Space:
    """Descriptor of a finite-dimensional real Hilbert space."""

    shape: tuple[int, ...]
    space_id: str = "R"

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if not shape or any(n <= 0 for n in shape):
            raise DimensionError(f"degenerate space shape {self.shape!r}")
        object.__setattr__(self, "shape", shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def element(self, data) -> "SpaceElement":
        return SpaceElement(np.asarray(data, dtype=float).reshape(self.shape), self.space_id)

    def zero(self) -> "SpaceElement":
        return SpaceElement(np.zeros(self.shape), self.space_id)


class SpaceElement:
    """An immutable real array tagged with the space it belongs to.

    The wrapped array is copied on construction and marked read-only, so
    operations never modify their inputs.
    """

    __slots__ = ("_data", "space_id")

    def __init__(self, data, space_id: str = "R"):
        arr = np.array(data, dtype=float, copy=True)
        if arr.size == 0:
            raise DimensionError("zero-length spaces are not supported")
        if not np.all(np.isfinite(arr)):
            raise ValueError("SpaceElement entries must be finite")
        arr.setflags(write=False)
        self._data = arr
        self.space_id = str(space_id)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def space(self) -> Space:
        return Space(self.shape, self.space_id)

    def copy_with(self, data) -> "SpaceElement":
        return SpaceElement(np.reshape(data, self.shape), self.space_id)

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __repr__(self):
        return f"SpaceElement(shape={self.shape}, space_id={self.space_id!r})"


@dataclass(frozen=True)
class ProductElement:
    """Element of a product space ``Y_1 x ... x Y_m``."""

    parts: tuple = field(default_factory=tuple)

    def __init__(self, parts: Sequence):
        object.__setattr__(self, "parts", tuple(parts))

    def __len__(self):
        return len(self.parts)

    def __getitem__(self, i):
        return self.parts[i]

    def __iter__(self):
        return iter(self.parts)


def _check_pair(a, b):
    if isinstance(a, ProductElement) or isinstance(b, ProductElement):
        if not (isinstance(a, ProductElement) and isinstance(b, ProductElement)):
            raise DimensionError("cannot combine a product element with a plain element")
        if len(a) != len(b):
            raise DimensionError(f"product lengths differ: {len(a)} != {len(b)}")
        return
    if isinstance(a, SpaceElement) and isinstance(b, SpaceElement):
        if a.space_id != b.space_id:
            raise DimensionError(f"space mismatch: {a.space_id!r} vs {b.space_id!r}")
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def inner(a, b) -> float:
    """Euclidean inner product; sums over the parts of product elements."""
    _check_pair(a, b)
    if isinstance(a, ProductElement):
        return float(sum(inner(u, v) for u, v in zip(a, b)))
    return float(np.vdot(np.asarray(a).ravel(), np.asarray(b).ravel()))


def _flat_parts(a):
    if isinstance(a, ProductElement):
        return [p for u in a for p in _flat_parts(u)]
    return [np.asarray(a, dtype=float).ravel()]


def norm(a) -> float:
    """Euclidean norm, scaled so tiny or huge entries do not under- or overflow."""
    parts = [p for p in _flat_parts(a) if p.size]
    scale = max((float(np.max(np.abs(p))) for p in parts), default=0.0)
    if scale == 0.0 or not np.isfinite(scale):
        return scale
    return scale * float(np.sqrt(sum(np.vdot(p / scale, p / scale) for p in parts)))


def axpby(alpha: float, a, beta: float, b):
    """Return ``alpha * a + beta * b`` without modifying the inputs."""
    _check_pair(a, b)
    if isinstance(a, ProductElement):
        return ProductElement([axpby(alpha, u, beta, v) for u, v in zip(a, b)])
    out = alpha * np.asarray(a) + beta * np.asarray(b)
    if isinstance(a, SpaceElement):
        return a.copy_with(out)
    return out


class RngStream:
    """Counter-based random stream.

    Draws come from a Philox generator keyed by ``(seed, stream)``, so a given
    pair always yields the same sequence no matter which other streams were
    consumed before.  ``counter`` records how many variates were drawn.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & (2**64 - 1)
        self.stream = int(stream) & (2**64 - 1)
        self.counter = 0
        key = self.seed | (self.stream << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, index: int) -> "RngStream":
        """Independent stream derived from this one's seed."""
        return RngStream(self.seed, (self.stream * 1_000_003 + int(index) + 1) & (2**64 - 1))

    def normal(self, mean=0.0, std=1.0, size=None):
        out = self._gen.normal(mean, std, size)
        self.counter += int(np.prod(size)) if size is not None else 1
        return out

    def uniform(self, low=0.0, high=1.0, size=None):
        out = self._gen.uniform(low, high, size)
        self.counter += int(np.prod(size)) if size is not None else 1
        return out

    def integers(self, low, high=None, size=None):
        out = self._gen.integers(low, high, size)
        self.counter += int(np.prod(size)) if size is not None else 1
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)


def gaussian_like(proto, rng: RngStream, mean: float = 0.0, std: float = 1.0):
    """I.i.d. normal draws shaped like ``proto``."""
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    shape = np.shape(proto)
    if std == 0:
        out = np.full(shape, float(mean))
    else:
        out = rng.normal(mean, std, shape)
    if isinstance(proto, SpaceElement):
        return proto.copy_with(out)
    return out


def save_element(path, element: SpaceElement) -> None:
    """Write ``element`` as raw little-endian float64 plus a JSON sidecar."""
    path = Path(path)
    np.asarray(element.data, dtype="<f8").tofile(path)
    sidecar = {"shape": list(element.shape), "space_id": element.space_id}
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_element(path) -> SpaceElement:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    data = np.fromfile(path, dtype="<f8")
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise DimensionError(f"{path}: {data.size} values for shape {shape}")
    return SpaceElement(data.reshape(shape), meta["space_id"])

"""Dense numeric kernels shared by every fusion stage.

Everything here is a pure function over numpy arrays. Working precision is a
process-wide flag: float64 for gradient checks and oracle tests, float32 for
ordinary inference runs.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "FeatureMap",
    "ParamStore",
    "bilinear_sample",
    "bilinear_sample_many",
    "concat_reduce",
    "ffn",
    "get_dtype",
    "init_params",
    "layer_norm",
    "linear",
    "precision",
    "set_precision",
    "softmax",
    "splitmix64",
]

_DTYPE: type = np.float64


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits == 64:
        _DTYPE = np.float64
    elif bits == 32:
        _DTYPE = np.float32
    else:
        raise ValueError(f"unsupported precision: {bits} (expected 32 or 64)")


def get_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the working float width."""
    global _DTYPE
    previous = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        _DTYPE = previous


# ---------------------------------------------------------------------------
# SplitMix64

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = np.asarray(x, dtype=np.uint64).copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


def _splitmix_stream(key: int, n: int) -> np.ndarray:
    """First ``n`` outputs of a SplitMix64 generator started at ``key``."""
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(key & _MASK64) + steps * _GOLDEN
    return splitmix64(state)


def _stream_key(seed: int, name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    name_hash = int.from_bytes(digest, "little")
    mixed = splitmix64(np.array([(seed ^ name_hash) & _MASK64], dtype=np.uint64))
    return int(mixed[0])


# ---------------------------------------------------------------------------
# Containers


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W x C image feature grid.

    ``stride`` is the number of source-image pixels covered by one cell.
    Cell ``(row, col)`` is centred on pixel ``((col + 0.5) * stride, (row + 0.5) * stride)``.
    """

    data: np.ndarray
    stride: float = 1.0

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"feature map must be H x W x C, got shape {data.shape}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


class ParamStore:
    """Named, shape-fixed parameter tensors.

    Tensors are stored as read-only float64 arrays; kernels cast them to the
    working precision on use.
    """

    def __init__(self, tensors: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.seed = int(seed)
        self._tensors: dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self._add(name, value)

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name!r}")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        arr.setflags(write=False)
        self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"uninitialized parameters: {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self._tensors.items()

    def shape(self, name: str) -> tuple[int, ...]:
        return self[name].shape

    def merged(self, other: "ParamStore") -> "ParamStore":
        """Union of two stores; names must not collide."""
        out = ParamStore(dict(self._tensors), seed=self.seed)
        for name, value in other.items():
            out._add(name, value)
        return out

    def replaced(self, updates: dict[str, np.ndarray]) -> "ParamStore":
        """Copy with some tensors swapped for same-shaped replacements."""
        tensors = dict(self._tensors)
        for name, value in updates.items():
            value = np.asarray(value, dtype=np.float64)
            if name not in tensors:
                raise KeyError(f"unknown parameter: {name!r}")
            if value.shape != tensors[name].shape:
                raise ValueError(
                    f"shape of {name!r} is fixed at {tensors[name].shape}, got {value.shape}"
                )
            tensors[name] = value
        return ParamStore(tensors, seed=self.seed)

    def require(self, names: Iterable[str]) -> None:
        missing = [n for n in names if n not in self._tensors]
        if missing:
            raise KeyError(f"uninitialized parameters: {', '.join(missing)}")

    def equals(self, other: "ParamStore") -> bool:
        if self.names() != other.names() or self.seed != other.seed:
            return False
        return all(
            a.shape == other[n].shape and a.tobytes() == other[n].tobytes()
            for n, a in self.items()
        )


def init_params(spec: Sequence[tuple[str, Sequence[int]]], seed: int) -> ParamStore:
    """Xavier-uniform initialization from per-tensor SplitMix64 streams.

    Each tensor draws from its own stream keyed by ``(seed, name)``, so adding
    or reordering entries never changes the values of the others. Names ending
    in ``.offset`` are zero-initialized.
    """
    tensors: dict[str, np.ndarray] = {}
    for name, shape in spec:
        shape = tuple(int(s) for s in shape)
        if name in tensors:
            raise ValueError(f"duplicate parameter name: {name!r}")
        if not shape or any(s <= 0 for s in shape):
            raise ValueError(f"parameter {name!r} needs a positive shape, got {shape}")
        if name.endswith(".offset"):
            tensors[name] = np.zeros(shape)
            continue
        if len(shape) == 1:
            fan_in = fan_out = shape[0]
        else:
            receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
            fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        n = int(np.prod(shape))
        bits = _splitmix_stream(_stream_key(seed, name), n)
        unit = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        tensors[name] = ((2.0 * unit - 1.0) * bound).reshape(shape)
    return ParamStore(tensors, seed=seed)


# ---------------------------------------------------------------------------
# Kernels


def _cell_coords(fm: FeatureMap, u, v):
    return np.asarray(u, dtype=np.float64) / fm.stride - 0.5, np.asarray(v, dtype=np.float64) / fm.stride - 0.5


def bilinear_sample_many(
    fm: FeatureMap, u: np.ndarray, v: np.ndarray, with_grad: bool = False
):
    """Bilinearly sample ``fm`` at pixel coordinates ``(u, v)`` (any matching shapes).

    Cells outside the map read as zero. With ``with_grad`` also returns the
    derivatives of the samples with respect to ``u`` and ``v`` (pixels); on
    lattice lines the right-sided derivative is returned.
    """
    dtype = get_dtype()
    data = fm.data.astype(dtype, copy=False)
    x, y = _cell_coords(fm, u, v)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0).astype(dtype)[..., None]
    fy = (y - y0).astype(dtype)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    h, w, _ = data.shape

    def gather(rows, cols):
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        out = data[np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)]
        return np.where(ok[..., None], out, dtype(0))

    f00 = gather(y0, x0)
    f01 = gather(y0, x0 + 1)
    f10 = gather(y0 + 1, x0)
    f11 = gather(y0 + 1, x0 + 1)
    one = dtype(1)
    top = f00 * (one - fx) + f01 * fx
    bottom = f10 * (one - fx) + f11 * fx
    out = top * (one - fy) + bottom * fy
    if not with_grad:
        return out
    scale = dtype(1.0 / fm.stride)
    du = ((f01 - f00) * (one - fy) + (f11 - f10) * fy) * scale
    dv = (bottom - top) * scale
    return out, du, dv


def bilinear_sample(fm: FeatureMap, u: float, v: float) -> np.ndarray:
    return bilinear_sample_many(fm, np.asarray(u), np.asarray(v))


def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``W @ x + b`` on the last axis of ``x``."""
    dtype = get_dtype()
    x = np.asarray(x, dtype=dtype)
    W = np.asarray(W, dtype=dtype)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"shape mismatch: W {W.shape} vs x {x.shape}")
    out = x @ W.T
    if b is not None:
        b = np.asarray(b, dtype=dtype)
        if b.shape != (W.shape[0],):
            raise ValueError(f"shape mismatch: b {b.shape} vs W {W.shape}")
        out = out + b
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=get_dtype())
    if x.shape[axis] < 1:
        raise ValueError("softmax needs at least one element")
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = np.asarray(x, dtype=get_dtype())
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + x.dtype.type(eps))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def ffn_param_spec(prefix: str, n_in: int, n_out: int, hidden: int | None = None):
    hidden = 2 * n_in if hidden is None else hidden
    return [
        (f"{prefix}.w1", (hidden, n_in)),
        (f"{prefix}.b1", (hidden,)),
        (f"{prefix}.w2", (n_out, hidden)),
        (f"{prefix}.b2", (n_out,)),
    ]


def ffn(x: np.ndarray, params: ParamStore, prefix: str) -> np.ndarray:
    """Two-layer perceptron: linear, ReLU, linear."""
    h = relu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def concat_reduce(a: np.ndarray, b: np.ndarray, params: ParamStore, prefix: str) -> np.ndarray:
    """Concatenate two n-channel features and map the 2n result back to n."""
    a = np.asarray(a, dtype=get_dtype())
    b = np.asarray(b, dtype=get_dtype())
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return ffn(np.concatenate([a, b], axis=-1), params, prefix)

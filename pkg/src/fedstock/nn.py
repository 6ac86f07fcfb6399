"""Dense tensor ops with hand-written reverse passes.

Tensors are plain numpy arrays. Every op accepts either a single vector
(``(n,)``) or a batch of row vectors (``(B, n)``); the backward functions
accumulate into ``ParamTensor.grad`` and return the gradient for the
upstream input. Nothing resets gradients except :func:`sgd_step` and
:meth:`ParamSet.zero_grad`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError, IndexingError, NumericError

DTYPE = np.float64
CHECKPOINT_VERSION = 1

GRU_GATES = ("update", "reset", "cand")


class Part(str, Enum):
    BODY = "BODY"
    HEAD = "HEAD"


@dataclass
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(
                f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.name, self.value.copy(), self.grad.copy())


class ParamSet:
    """Ordered, uniquely named parameters, each tagged BODY or HEAD."""

    def __init__(self, params: Iterable[ParamTensor] = (), partition: Mapping[str, Part] | None = None):
        self._params: dict[str, ParamTensor] = {}
        self._part: dict[str, Part] = {}
        for p in params:
            part = Part.BODY if partition is None else partition.get(p.name, Part.BODY)
            self.add(p, part)

    def add(self, param: ParamTensor, part: Part = Part.BODY) -> None:
        if param.name in self._params:
            raise ArgumentError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        self._part[param.name] = Part(part)

    def __getitem__(self, name: str) -> ParamTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def part(self, name: str) -> Part:
        return self._part[name]

    @property
    def partition(self) -> dict[str, Part]:
        return dict(self._part)

    def select(self, part: Part) -> "ParamSet":
        """View (shared tensors, no copy) of the parameters tagged ``part``."""
        out = ParamSet()
        for name, p in self._params.items():
            if self._part[name] == part:
                out.add(p, part)
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, p in self._params.items():
            out.add(p.copy(), self._part[name])
        return out

    def merged(self, other: "ParamSet") -> "ParamSet":
        """Deep copy of ``self`` followed by deep copies of ``other``'s params."""
        out = self.copy()
        for p in other:
            out.add(p.copy(), other.part(p.name))
        return out

    def load_values(self, other: "ParamSet") -> None:
        """Overwrite values of matching names in place (names must exist here)."""
        for p in other:
            if p.name not in self._params:
                raise ArgumentError(f"unknown parameter {p.name!r}")
            mine = self._params[p.name]
            if mine.shape != p.shape:
                raise DimensionError(f"{p.name}: shape {p.shape} != {mine.shape}")
            mine.value[...] = p.value

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def flat_values(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self._params.values()])

    def max_abs_diff(self, other: "ParamSet") -> float:
        if self.names() != other.names():
            raise ArgumentError("parameter sets differ in structure")
        return max(float(np.max(np.abs(p.value - other[p.name].value))) for p in self)


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}", where=where)
    return arr


def _check_linear(x: np.ndarray, W: ParamTensor, b: ParamTensor) -> None:
    n_out, n_in = W.shape
    if x.shape[-1] != n_in or b.shape != (n_out,):
        raise DimensionError(
            f"linear {W.name}: input shape {x.shape} / bias shape {b.shape} "
            f"do not conform to weight shape {W.shape}"
        )


def linear(x: np.ndarray, W: ParamTensor, b: ParamTensor) -> np.ndarray:
    _check_linear(x, W, b)
    return x @ W.value.T + b.value


def linear_backward(dout: np.ndarray, x: np.ndarray, W: ParamTensor, b: ParamTensor) -> np.ndarray:
    if x.ndim == 1:
        W.grad += np.outer(dout, x)
        b.grad += dout
    else:
        W.grad += dout.T @ x
        b.grad += dout.sum(axis=0)
    return dout @ W.value


def embed_lookup(table: ParamTensor, index, feature: str | None = None) -> np.ndarray:
    """Row ``index`` of ``table``; ``index`` may be an int or an int array."""
    idx = np.asarray(index)
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        bad = idx[(idx < 0) | (idx >= V)].ravel()[0]
        raise IndexingError(
            f"category index {int(bad)} out of range [0, {V}) for feature {feature or table.name!r}"
        )
    return table.value[idx].copy()


def embed_backward(dout: np.ndarray, table: ParamTensor, index) -> None:
    np.add.at(table.grad, np.asarray(index), dout)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def concat(parts: Sequence[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    """Join along the feature (last) axis; also returns the split offsets."""
    if not parts:
        raise ArgumentError("concat needs at least one tensor")
    offsets = list(np.cumsum([p.shape[-1] for p in parts])[:-1])
    return np.concatenate(parts, axis=-1), [int(o) for o in offsets]


def split(x: np.ndarray, offsets: Sequence[int]) -> list[np.ndarray]:
    return np.split(x, offsets, axis=-1)


def gru_param_names(prefix: str = "gru") -> dict[str, str]:
    names = {}
    for gate in GRU_GATES:
        for kind in ("w", "u", "b"):
            names[f"{kind}_{gate}"] = f"{prefix}.{kind}_{gate}"
    return names


@dataclass
class GRUCache:
    z: np.ndarray
    h_prev: np.ndarray
    u: np.ndarray
    r: np.ndarray
    c: np.ndarray


def gru_cell(z: np.ndarray, h_prev: np.ndarray, params: Mapping[str, ParamTensor]) -> tuple[np.ndarray, GRUCache]:
    """One GRU step.

    ``params`` maps ``w_update``, ``u_update``, ``b_update`` (and the same
    for ``reset`` and ``cand``) to ParamTensors. The reset gate multiplies
    the previous state before the candidate's recurrent transform.
    """
    d_h = params["u_update"].shape[0]
    if h_prev.shape[-1] != d_h:
        raise DimensionError(f"gru_cell: h_prev shape {h_prev.shape} but hidden size {d_h}")
    if z.shape[-1] != params["w_update"].shape[1]:
        raise DimensionError(f"gru_cell: z shape {z.shape} vs w_update {params['w_update'].shape}")
    u = sigmoid(z @ params["w_update"].value.T + h_prev @ params["u_update"].value.T + params["b_update"].value)
    check_finite(u, "gru update gate")
    r = sigmoid(z @ params["w_reset"].value.T + h_prev @ params["u_reset"].value.T + params["b_reset"].value)
    check_finite(r, "gru reset gate")
    c = np.tanh(z @ params["w_cand"].value.T + (r * h_prev) @ params["u_cand"].value.T + params["b_cand"].value)
    check_finite(c, "gru candidate")
    h = (1.0 - u) * h_prev + u * c
    return h, GRUCache(z, h_prev, u, r, c)


def gru_cell_backward(
    dh: np.ndarray, cache: GRUCache, params: Mapping[str, ParamTensor]
) -> tuple[np.ndarray, np.ndarray]:
    """Accumulates parameter grads; returns (dz, dh_prev)."""
    z, h_prev, u, r, c = cache.z, cache.h_prev, cache.u, cache.r, cache.c

    def acc(name: str, dpre: np.ndarray, inp: np.ndarray) -> None:
        if inp.ndim == 1:
            params[name].grad += np.outer(dpre, inp)
        else:
            params[name].grad += dpre.T @ inp

    def bias(name: str, dpre: np.ndarray) -> None:
        params[name].grad += dpre if dpre.ndim == 1 else dpre.sum(axis=0)

    dh_prev = dh * (1.0 - u)
    da_c = dh * u * (1.0 - c * c)
    da_u = dh * (c - h_prev) * u * (1.0 - u)
    rh = r * h_prev
    d_rh = da_c @ params["u_cand"].value
    da_r = d_rh * h_prev * r * (1.0 - r)
    dh_prev = dh_prev + d_rh * r

    acc("w_cand", da_c, z)
    acc("u_cand", da_c, rh)
    bias("b_cand", da_c)
    acc("w_update", da_u, z)
    acc("u_update", da_u, h_prev)
    bias("b_update", da_u)
    acc("w_reset", da_r, z)
    acc("u_reset", da_r, h_prev)
    bias("b_reset", da_r)

    dz = da_c @ params["w_cand"].value + da_u @ params["w_update"].value + da_r @ params["w_reset"].value
    dh_prev = dh_prev + da_u @ params["u_update"].value + da_r @ params["u_reset"].value
    return dz, dh_prev


def sgd_step(params: ParamSet | Iterable[ParamTensor], lr: float) -> None:
    """value <- value - lr * grad for every parameter, then zero the grads."""
    for p in params:
        if lr != 0.0:
            p.value -= lr * p.grad
        p.grad[...] = 0.0


class SGD:
    """Stateless wrapper so training loops can swap optimizers."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Iterable[ParamTensor], grad: np.ndarray | None = None) -> None:
        sgd_step(params, self.lr)


class Adam:
    """Adam over the concatenation of all parameters; zeroes grads after the update.

    Moment buffers are flat and keyed to the parameter layout (names and
    shapes) seen on the first step.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.layout: list[tuple[str, tuple[int, ...]]] | None = None
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def step(self, params: Iterable[ParamTensor], grad: np.ndarray | None = None) -> None:
        params = list(params)
        layout = [(p.name, p.shape) for p in params]
        if self.layout is None:
            self.layout = layout
            n = sum(p.value.size for p in params)
            self.m, self.v = np.zeros(n), np.zeros(n)
        elif layout != self.layout:
            raise ArgumentError("parameter layout changed between optimizer steps")
        g = flat_grads(params) if grad is None else grad
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g * g
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        upd = self.lr * (self.m / c1) / (np.sqrt(self.v / c2) + self.eps)
        o = 0
        for p in params:
            k = p.value.size
            p.value -= upd[o:o + k].reshape(p.shape)
            p.grad[...] = 0.0
            o += k


def flat_grads(params: Iterable[ParamTensor]) -> np.ndarray:
    return np.concatenate([p.grad.ravel() for p in params])


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ArgumentError(f"unknown optimizer {name!r}")


def init_weight(rng: np.random.Generator, n_out: int, n_in: int, dtype=DTYPE) -> np.ndarray:
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype, copy=False)


def init_embedding(rng: np.random.Generator, vocab: int, dim: int, dtype=DTYPE) -> np.ndarray:
    return rng.uniform(-0.1, 0.1, size=(vocab, dim)).astype(dtype, copy=False)


# -- checkpoints -------------------------------------------------------------
# header:  <u32 version> <u32 count>
# record:  <u32 name_len> <name utf-8> <u32 rank> <u64 dim>*rank <f64 LE>*prod(dims)

def dumps_params(params: Iterable[ParamTensor]) -> bytes:
    params = list(params)
    chunks = [struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack(f"<I{p.value.ndim}Q", p.value.ndim, *p.value.shape))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads_params(blob: bytes, head_prefix: str = "head.") -> ParamSet:
    view = memoryview(blob)
    version, count = struct.unpack_from("<II", view, 0)
    if version != CHECKPOINT_VERSION:
        raise ArgumentError(f"unsupported checkpoint version {version}")
    pos = 8
    out = ParamSet()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", view, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        value = np.frombuffer(view, dtype="<f8", count=size, offset=pos).astype(DTYPE).reshape(dims)
        pos += 8 * size
        part = Part.HEAD if name.startswith(head_prefix) else Part.BODY
        out.add(ParamTensor(name, value), part)
    if pos != len(blob):
        raise ArgumentError(f"trailing {len(blob) - pos} bytes in checkpoint")
    return out


def save_checkpoint(params: Iterable[ParamTensor], path: str | Path) -> None:
    Path(path).write_bytes(dumps_params(params))


def load_checkpoint(path: str | Path) -> ParamSet:
    return loads_params(Path(path).read_bytes())

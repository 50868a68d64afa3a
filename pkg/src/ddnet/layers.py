"""Parameter storage and the generic layers shared by the model modules."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class ParamStore:
    """Ordered name -> Tensor mapping. Names are dotted paths such as ``dsgl.gc1.w``."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
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

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def tensors(self, prefix: str = "") -> list[Tensor]:
        return [t for n, t in self._params.items() if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for n, t in self._params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def count(self) -> int:
        return sum(t.size for t in self._params.values())


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.standard_normal((d_in, d_out)) * np.sqrt(1.0 / d_in)


def add_linear(store: ParamStore, rng: np.random.Generator, name: str, d_in: int, d_out: int,
               bias: bool = True, scale: float = 1.0) -> None:
    store.add(f"{name}.w", scale * glorot(rng, d_in, d_out))
    if bias:
        store.add(f"{name}.b", np.zeros(d_out))


def linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    if x.ndim == 1:
        return linear(x.reshape(1, -1), store, name).reshape(-1)
    out = tn.matmul(x, store[f"{name}.w"])
    b = f"{name}.b"
    return out + store[b] if b in store else out


def add_layer_norm(store: ParamStore, name: str, d: int) -> None:
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def layer_norm(x: Tensor, store: ParamStore, name: str, eps: float = 1e-5) -> Tensor:
    return tn.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"], eps)


def add_mha(store: ParamStore, rng: np.random.Generator, name: str, d: int) -> None:
    # no key bias: it shifts every score in a row equally, so softmax ignores it
    for proj in ("q", "k", "v", "o"):
        add_linear(store, rng, f"{name}.{proj}", d, d, bias=proj != "k")


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, T, D = x.shape
    return x.reshape(*lead, T, n_heads, D // n_heads).transpose(
        tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, T, dh = x.shape
    n = len(lead)
    return x.transpose(tuple(range(n)) + (n + 1, n, n + 2)).reshape(*lead, T, H * dh)


def mha(query: Tensor, key: Tensor, value: Tensor, store: ParamStore, name: str, n_heads: int,
        return_attn: bool = False):
    """Scaled dot-product multi-head attention over (..., T, D) inputs."""
    D = query.shape[-1]
    if D % n_heads:
        raise ValueError(f"n_heads={n_heads} does not divide D={D}")
    q = _split_heads(linear(query, store, f"{name}.q"), n_heads)
    k = _split_heads(linear(key, store, f"{name}.k"), n_heads)
    v = _split_heads(linear(value, store, f"{name}.v"), n_heads)
    scores = tn.matmul(q, k.transpose()) * (1.0 / np.sqrt(D // n_heads))
    attn = tn.softmax_rows(scores)
    out = linear(_merge_heads(tn.matmul(attn, v)), store, f"{name}.o")
    return (out, attn) if return_attn else out

"""Named parameter collection and initialisers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor

LAYER_SHAPES = (
    ("ln1.gamma", ("D",)),
    ("ln1.beta", ("D",)),
    ("attn.wq", ("D", "D")),
    ("attn.bq", ("D",)),
    ("attn.wk", ("D", "D")),
    ("attn.bk", ("D",)),
    ("attn.wv", ("D", "D")),
    ("attn.bv", ("D",)),
    ("attn.wo", ("D", "D")),
    ("attn.bo", ("D",)),
    ("ln2.gamma", ("D",)),
    ("ln2.beta", ("D",)),
    ("ffn.w1", ("D", "F")),
    ("ffn.b1", ("F",)),
    ("ffn.w2", ("F", "D")),
    ("ffn.b2", ("D",)),
)


class ParamStore:
    """Ordered name -> Tensor mapping that can record which names were read."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = dict(tensors or {})
        self.accessed: set[str] | None = None

    def audit(self) -> set[str]:
        """Start recording reads; returns the live set of names read."""
        self.accessed = set()
        return self.accessed

    def __getitem__(self, name: str) -> Tensor:
        if self.accessed is not None:
            self.accessed.add(name)
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __setitem__(self, name: str, t: Tensor) -> None:
        t.name = name
        self._tensors[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self._tensors if k.startswith(prefix)]

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._tensors.items() if k.startswith(prefix)}

    def numel(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self._tensors.items() if k.startswith(prefix))

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self._tensors.items()})

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: Tensor(v.data.copy(), v.requires_grad, k, dtype=v.dtype) for k, v in self._tensors.items()}
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._tensors.items()}


def layer_weights(store: ParamStore, prefix: str) -> dict[str, Tensor]:
    """Short-name view (``attn.wq`` ...) of one transformer layer."""
    return {short: store[f"{prefix}.{short}"] for short, _ in LAYER_SHAPES}


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within +-bound*std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out.astype(np.float32)


INIT_SCHEMES = ("fan_in", "fixed")


def projection_std(fan_in: int, scheme: str = "fan_in") -> float:
    """1/sqrt(fan_in) keeps unit-scale activations; "fixed" is the 0.02 ViT-Base convention."""
    if scheme == "fixed":
        return 0.02
    if scheme == "fan_in":
        return 1.0 / float(np.sqrt(fan_in))
    raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")


def init_layer(store: ParamStore, prefix: str, dim: int, ffn_dim: int, rng: np.random.Generator,
               scheme: str = "fan_in") -> None:
    sizes = {"D": dim, "F": ffn_dim}
    for short, dims in LAYER_SHAPES:
        shape = tuple(sizes[d] for d in dims)
        if short.endswith("gamma"):
            data = np.ones(shape, np.float32)
        elif len(shape) == 1:
            data = np.zeros(shape, np.float32)
        else:
            data = trunc_normal(rng, shape, projection_std(shape[0], scheme))
        store[f"{prefix}.{short}"] = Tensor(data, requires_grad=True)


def layer_numel(dim: int, ffn_dim: int) -> int:
    sizes = {"D": dim, "F": ffn_dim}
    return sum(int(np.prod([sizes[d] for d in dims])) for _, dims in LAYER_SHAPES)

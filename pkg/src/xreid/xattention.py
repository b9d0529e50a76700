"""X-Layers: self-attention on an evolving stream plus cross-attention to
concatenated key images, both through one shared projection-weight set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, InstanceForward, cls_feature, ffn, ln, mha
from .params import ParamStore, layer_weights
from .tensor import ShapeError, Tensor


@dataclass
class XStream:
    i_x: Tensor
    layer_index: int


@dataclass
class KeyBundle:
    key_tokens: Tensor  # (..., T_k, D)

    @property
    def num_tokens(self) -> int:
        return self.key_tokens.shape[-2]


@dataclass
class XParams:
    layers: list[dict[str, Tensor]]
    norm_gamma: Tensor
    norm_beta: Tensor

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, depth: int) -> "XParams":
        return cls(
            [layer_weights(store, f"{prefix}.layers.{i}") for i in range(depth)],
            store[f"{prefix}.norm.gamma"],
            store[f"{prefix}.norm.beta"],
        )


def attention_x(i_x: Tensor, q_x: Tensor, k_x: KeyBundle, w: dict[str, Tensor], cfg: BackboneConfig,
                return_attn: bool = False):
    """One X-Layer: I + MHA(I, I, I) + MHA(Q, K, K), then the FFN sub-block."""
    if i_x.shape != q_x.shape:
        raise ShapeError(f"attention_x: stream {i_x.shape} and query {q_x.shape} differ")
    if k_x.key_tokens.shape[-1] != i_x.shape[-1]:
        raise ShapeError(f"attention_x: key dim {k_x.key_tokens.shape[-1]} != {i_x.shape[-1]}")
    h_i = ln(i_x, w, "ln1", cfg.ln_eps)
    h_q = ln(q_x, w, "ln1", cfg.ln_eps)
    h_k = ln(k_x.key_tokens, w, "ln1", cfg.ln_eps)
    self_out, self_attn = mha(h_i, h_i, h_i, w, cfg.num_heads, return_attn=True)
    cross_out, cross_attn = mha(h_q, h_k, h_k, w, cfg.num_heads, return_attn=True)
    z = i_x + self_out + cross_out
    out = z + ffn(ln(z, w, "ln2", cfg.ln_eps), w)
    return (out, self_attn, cross_attn) if return_attn else out


def run_x_stack(anchor: InstanceForward, keys_per_layer: list[KeyBundle], x_params: XParams,
                depth: int, cfg: BackboneConfig) -> Tensor:
    """Iterate X-Layers from I_X = Z_0 of the anchor; returns LN(final I_X)[CLS].

    Layer i consumes the anchor's layer-(i-1) tokens as queries and the
    (i-1)-th key bundle.
    """
    if len(keys_per_layer) != depth or len(x_params.layers) < depth:
        raise ValueError(f"depth {depth} needs {depth} key bundles and layers, got "
                         f"{len(keys_per_layer)} bundles and {len(x_params.layers)} layers")
    stream = XStream(anchor.per_layer[0].tokens, 0)
    for i in range(1, depth + 1):
        q_x = anchor.per_layer[i - 1].tokens
        stream = XStream(attention_x(stream.i_x, q_x, keys_per_layer[i - 1], x_params.layers[i - 1], cfg), i)
    return cls_feature(stream.i_x, x_params.norm_gamma, x_params.norm_beta, cfg.ln_eps)


def intrax_key_indices(labels: np.ndarray) -> np.ndarray:
    """(B, K-1) batch indices of every anchor's positives, in batch order."""
    labels = np.asarray(labels)
    rows = []
    for a in range(len(labels)):
        pos = [j for j in range(len(labels)) if j != a and labels[j] == labels[a]]
        if not pos:
            raise ValueError(f"anchor {a} has no positive in the batch")
        rows.append(pos)
    if len({len(r) for r in rows}) != 1:
        raise ValueError("identities must have the same number of instances in the batch")
    return np.asarray(rows, dtype=np.int64)


def interx_key_indices(labels: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """(B, 2) rows of [hard positive, hard negative], validated against labels."""
    labels = np.asarray(labels)
    pos = np.asarray(pos, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64)
    anchors = np.arange(len(pos))
    if np.any(labels[pos] != labels[anchors]) or np.any(pos == anchors):
        raise ValueError("interx positive must share the anchor identity and differ from the anchor")
    if np.any(labels[neg] == labels[anchors]):
        raise ValueError("interx negative must have a different identity from the anchor")
    return np.stack([pos, neg], axis=1)


def gather_keys(tokens: Tensor, index: np.ndarray) -> KeyBundle:
    """Concatenate token sequences along the token axis per row of ``index``.

    tokens: (B, N+1, D); index: (A, k) -> key tokens (A, k*(N+1), D).
    """
    a, k = index.shape
    _, n1, d = tokens.shape
    return KeyBundle(T.take(tokens, index.reshape(-1), axis=0).reshape(a, k * n1, d))


def build_intrax_keys(batch_forwards: InstanceForward, labels, anchor_index: int, layer_i: int) -> KeyBundle:
    idx = intrax_key_indices(labels)[anchor_index : anchor_index + 1]
    bundle = gather_keys(batch_forwards.per_layer[layer_i].tokens, idx)
    return KeyBundle(bundle.key_tokens.reshape(*bundle.key_tokens.shape[1:]))


def build_interx_keys(batch_forwards: InstanceForward, labels, anchor_index: int, pos_index: int,
                      neg_index: int, layer_i: int) -> KeyBundle:
    labels = np.asarray(labels)
    if pos_index == anchor_index or labels[pos_index] != labels[anchor_index]:
        raise ValueError(f"index {pos_index} is not a positive of anchor {anchor_index}")
    if labels[neg_index] == labels[anchor_index]:
        raise ValueError(f"index {neg_index} shares the anchor identity and cannot be the negative")
    idx = np.array([[pos_index, neg_index]], dtype=np.int64)
    bundle = gather_keys(batch_forwards.per_layer[layer_i].tokens, idx)
    return KeyBundle(bundle.key_tokens.reshape(*bundle.key_tokens.shape[1:]))

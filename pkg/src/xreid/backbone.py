"""Patch-token transformer producing per-layer token sequences and f_Ins.

All functions accept an optional leading batch axis: an image is ``(C, H, W)``
or ``(B, C, H, W)`` and token sequences are ``(..., N+1, D)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import INIT_SCHEMES, ParamStore, init_layer, layer_weights, projection_std, trunc_normal
from .tensor import ShapeError, Tensor


@dataclass
class BackboneConfig:
    image_h: int = 32
    image_w: int = 16
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 128
    num_classes: int = 0  # 0: take the number of training identities
    bnneck: bool = True
    init_scheme: str = "fan_in"  # or "fixed" (std 0.02)
    ln_eps: float = 1e-6

    def __post_init__(self):
        p = self.patch_size
        if p <= 0 or self.image_h % p or self.image_w % p:
            raise ValueError(f"image {self.image_h}x{self.image_w} is not divisible into {p}x{p} patches")
        if self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class TokenSequence:
    tokens: Tensor  # (..., N+1, D); row 0 is CLS
    layer_index: int


@dataclass
class InstanceForward:
    per_layer: list[TokenSequence]
    f_ins: Tensor  # (..., D)


def init_backbone(store: ParamStore, cfg: BackboneConfig, rng: np.random.Generator) -> None:
    d = cfg.embed_dim
    patch_std = projection_std(cfg.patch_dim, cfg.init_scheme)
    store["backbone.patch.w"] = Tensor(trunc_normal(rng, (cfg.patch_dim, d), patch_std), requires_grad=True)
    store["backbone.patch.b"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
    # cls and pos are embedding tables: one row is selected per token, so fan_in is 1
    embed_std = projection_std(1, cfg.init_scheme)
    store["backbone.cls"] = Tensor(trunc_normal(rng, (1, d), embed_std), requires_grad=True)
    store["backbone.pos"] = Tensor(trunc_normal(rng, (cfg.num_patches + 1, d), embed_std), requires_grad=True)
    for i in range(cfg.num_layers):
        init_layer(store, f"backbone.layers.{i}", d, cfg.ffn_dim, rng, cfg.init_scheme)
    store["backbone.norm.gamma"] = Tensor(np.ones(d, np.float32), requires_grad=True)
    store["backbone.norm.beta"] = Tensor(np.zeros(d, np.float32), requires_grad=True)


def patch_embed(image: Tensor, cfg: BackboneConfig, params: ParamStore) -> TokenSequence:
    single = image.ndim == 3
    if single:
        image = image.reshape(1, *image.shape)
    b, c, h, w = image.shape
    if (c, h, w) != (cfg.channels, cfg.image_h, cfg.image_w):
        raise ShapeError(f"image shape {(c, h, w)} does not match config {(cfg.channels, cfg.image_h, cfg.image_w)}")
    p = cfg.patch_size
    gh, gw = h // p, w // p
    patches = image.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, cfg.patch_dim)
    emb = patches @ params["backbone.patch.w"] + params["backbone.patch.b"]
    cls = T.take(params["backbone.cls"], np.zeros(b, np.int64), axis=0).reshape(b, 1, cfg.embed_dim)
    tokens = T.concat([cls, emb], axis=1) + params["backbone.pos"]
    if single:
        tokens = tokens.reshape(gh * gw + 1, cfg.embed_dim)
    return TokenSequence(tokens, 0)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2).reshape(*lead, n, h * dk)


def mha(q_in: Tensor, k_in: Tensor, v_in: Tensor, w: dict[str, Tensor], num_heads: int, return_attn: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated and projected."""
    if k_in.shape[-2] != v_in.shape[-2]:
        raise ShapeError(f"mha: key rows {k_in.shape[-2]} != value rows {v_in.shape[-2]}")
    q = _split_heads(q_in @ w["attn.wq"] + w["attn.bq"], num_heads)
    k = _split_heads(k_in @ w["attn.wk"] + w["attn.bk"], num_heads)
    v = _split_heads(v_in @ w["attn.wv"] + w["attn.bv"], num_heads)
    nd = k.ndim
    scores = T.mul_scalar(T.matmul(q, k.transpose(*range(nd - 2), nd - 1, nd - 2), acc64=True), 1.0 / math.sqrt(q.shape[-1]))
    attn = T.softmax(scores, axis=-1)
    out = _merge_heads(T.matmul(attn, v, acc64=True)) @ w["attn.wo"] + w["attn.bo"]
    return (out, attn) if return_attn else out


def ffn(x: Tensor, w: dict[str, Tensor]) -> Tensor:
    return T.gelu(x @ w["ffn.w1"] + w["ffn.b1"]) @ w["ffn.w2"] + w["ffn.b2"]


def ln(x: Tensor, w: dict[str, Tensor], which: str, eps: float) -> Tensor:
    return T.layer_norm(x, w[f"{which}.gamma"], w[f"{which}.beta"], eps)


def instance_layer(z: Tensor, w: dict[str, Tensor], cfg: BackboneConfig) -> Tensor:
    """Pre-norm block: z' = z + MHA(LN z); out = z' + FFN(LN z')."""
    h = ln(z, w, "ln1", cfg.ln_eps)
    z = z + mha(h, h, h, w, cfg.num_heads)
    return z + ffn(ln(z, w, "ln2", cfg.ln_eps), w)


def cls_feature(tokens: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """LayerNorm of the CLS row."""
    return T.layer_norm(tokens[..., 0, :], gamma, beta, eps)


def forward_instance(image: Tensor, cfg: BackboneConfig, params: ParamStore) -> InstanceForward:
    z = patch_embed(image, cfg, params)
    per_layer = [z]
    for i in range(cfg.num_layers):
        w = layer_weights(params, f"backbone.layers.{i}")
        per_layer.append(TokenSequence(instance_layer(per_layer[-1].tokens, w, cfg), i + 1))
    f_ins = cls_feature(per_layer[-1].tokens, params["backbone.norm.gamma"], params["backbone.norm.beta"], cfg.ln_eps)
    return InstanceForward(per_layer, f_ins)


def embed(images: np.ndarray, cfg: BackboneConfig, params: ParamStore, chunk: int = 64) -> np.ndarray:
    """Inference-time f_Ins for a stack of images, (M, C, H, W) -> (M, D)."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), chunk):
            batch = Tensor(images[start : start + chunk])
            out.append(forward_instance(batch, cfg, params).f_ins.data)
    if not out:
        return np.zeros((0, cfg.embed_dim), np.float32)
    return np.concatenate(out, axis=0)

"""Small builders shared by the test modules."""

import numpy as np

from xreid.backbone import BackboneConfig
from xreid.params import LAYER_SHAPES, ParamStore, init_layer
from xreid.tensor import Tensor

MICRO = dict(image_h=8, image_w=8, patch_size=4, channels=1, embed_dim=8, num_layers=1, num_heads=2, ffn_dim=16)


def micro_cfg(**kw) -> BackboneConfig:
    return BackboneConfig(**{**MICRO, **kw})


def random_layer(d, f, rng, scale=0.3, dtype=np.float32) -> dict[str, Tensor]:
    store = ParamStore()
    init_layer(store, "l", d, f, rng)
    out = {}
    for short, _ in LAYER_SHAPES:
        data = store[f"l.{short}"].data
        if short.endswith("gamma"):
            data = 1.0 + rng.normal(scale=0.1, size=data.shape)
        elif data.ndim == 1:
            data = rng.normal(scale=0.1, size=data.shape)
        else:
            data = rng.normal(scale=scale, size=data.shape)
        out[short] = Tensor(data, requires_grad=True, dtype=dtype)
    return out


def zero_layer(d, f) -> dict[str, Tensor]:
    sizes = {"D": d, "F": f}
    out = {}
    for short, dims in LAYER_SHAPES:
        shape = tuple(sizes[x] for x in dims)
        out[short] = Tensor(np.ones(shape) if short.endswith("gamma") else np.zeros(shape))
    return out

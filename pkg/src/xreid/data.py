"""Deterministic synthetic identities and the P x K batch sampler.

Each identity owns a blocky colour prototype. With ``view_flip`` on, odd views
show a "back" variant in which a central rectangle is replaced by an
identity-specific accessory pattern, so one identity looks different from two
sides while remaining closer to itself than to other identities. Views then
get an integer shift, Gaussian noise and an optional grey occluder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BLOCK = 4


@dataclass
class Nuisance:
    noise_std: float = 0.1
    shift_max: int = 2
    occlusion_prob: float = 0.3
    view_flip: bool = True


@dataclass
class SynthSpec:
    num_ids: int = 20
    views_per_id: int = 16
    image_h: int = 32
    image_w: int = 16
    channels: int = 3
    nuisance: Nuisance = field(default_factory=Nuisance)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.nuisance, dict):
            self.nuisance = Nuisance(**self.nuisance)
        if self.num_ids < 2:
            raise ValueError("need ≥2 identities")
        if self.views_per_id < 2:
            raise ValueError("need >=2 views per identity")
        if self.image_h % BLOCK or self.image_w % BLOCK:
            raise ValueError(f"image size must be a multiple of {BLOCK}")


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (C, H, W) in [0, 1]
    identity: int
    view: int


@dataclass
class Dataset:
    images: np.ndarray  # (M, C, H, W) float32
    ids: np.ndarray  # (M,) int64
    views: np.ndarray  # (M,) int64

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.ids[i]), int(self.views[i]))

    def subset(self, mask_or_index) -> "Dataset":
        return Dataset(self.images[mask_or_index], self.ids[mask_or_index], self.views[mask_or_index])

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.ids)


@dataclass
class Batch:
    indices: np.ndarray  # rows of the source dataset
    images: np.ndarray
    labels: np.ndarray
    num_ids: int
    instances_per_id: int

    def positives_of(self, a: int) -> np.ndarray:
        return np.flatnonzero((self.labels == self.labels[a]) & (np.arange(len(self.labels)) != a))


def _blocks(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(c, h // BLOCK, w // BLOCK))
    return np.repeat(np.repeat(coarse, BLOCK, axis=1), BLOCK, axis=2)


def _accessory_window(h: int, w: int) -> tuple[slice, slice]:
    return slice(h // 4, 3 * h // 4), slice(w // 4, 3 * w // 4)


def generate(spec: SynthSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.channels, spec.image_h, spec.image_w
    nz = spec.nuisance
    rows, cols = _accessory_window(h, w)
    images = np.empty((spec.num_ids * spec.views_per_id, c, h, w), np.float32)
    ids = np.repeat(np.arange(spec.num_ids), spec.views_per_id)
    views = np.tile(np.arange(spec.views_per_id), spec.num_ids)
    k = 0
    for _ in range(spec.num_ids):
        front = _blocks(rng, c, h, w)
        back = front.copy()
        back[:, rows, cols] = _blocks(rng, c, h, w)[:, rows, cols]
        for v in range(spec.views_per_id):
            img = back.copy() if (nz.view_flip and v % 2) else front.copy()
            if nz.shift_max:
                dy, dx = rng.integers(-nz.shift_max, nz.shift_max + 1, size=2)
                img = np.roll(img, (int(dy), int(dx)), axis=(1, 2))
            if nz.noise_std:
                img = img + rng.normal(0.0, nz.noise_std, size=img.shape)
            if nz.occlusion_prob and rng.random() < nz.occlusion_prob:
                oh = int(rng.integers(h // 4, h // 2 + 1))
                ow = int(rng.integers(w // 4, w // 2 + 1))
                y0 = int(rng.integers(0, h - oh + 1))
                x0 = int(rng.integers(0, w - ow + 1))
                img[:, y0 : y0 + oh, x0 : x0 + ow] = 0.5
            images[k] = np.clip(img, 0.0, 1.0)
            k += 1
    return Dataset(images, ids.astype(np.int64), views.astype(np.int64))


def pk_sample(dataset: Dataset, num_ids: int, instances_per_id: int, rng: np.random.Generator) -> Batch:
    """P identities without replacement, then K views each without replacement."""
    ids, counts = np.unique(dataset.ids, return_counts=True)
    eligible = ids[counts >= instances_per_id]
    if len(eligible) < num_ids:
        raise ValueError(f"only {len(eligible)} identities have >= {instances_per_id} views; need {num_ids}")
    chosen = rng.choice(eligible, size=num_ids, replace=False)
    rows = []
    for ident in chosen:
        pool = np.flatnonzero(dataset.ids == ident)
        rows.append(rng.choice(pool, size=instances_per_id, replace=False))
    index = np.concatenate(rows)
    return Batch(index, dataset.images[index], dataset.ids[index], num_ids, instances_per_id)


def query_gallery(dataset: Dataset) -> tuple[Dataset, Dataset]:
    """Per identity: lowest view -> query, other views -> gallery."""
    q_rows, g_rows = [], []
    for ident in dataset.identities:
        rows = np.flatnonzero(dataset.ids == ident)
        if len(rows) < 2:
            raise ValueError(f"identity {ident} needs >= 2 views for a query/gallery split")
        rows = rows[np.argsort(dataset.views[rows], kind="stable")]
        q_rows.append(rows[:1])
        g_rows.append(rows[1:])
    return dataset.subset(np.concatenate(q_rows)), dataset.subset(np.concatenate(g_rows))


def split(dataset: Dataset, train_frac: float) -> tuple[Dataset, Dataset, Dataset]:
    """Identity-disjoint (train, query, gallery); the first identities train."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    ids = dataset.identities
    n_train = int(round(len(ids) * train_frac))
    if n_train < 2 or len(ids) - n_train < 1:
        raise ValueError(f"{len(ids)} identities cannot be split {train_frac} into >=2 train and >=1 test ids")
    train_mask = np.isin(dataset.ids, ids[:n_train])
    query, gallery = query_gallery(dataset.subset(~train_mask))
    return dataset.subset(train_mask), query, gallery

"""One optimisation step over a P x K batch and the epoch loop around it.

Ablation modes:

* ``baseline``: instance head only.
* ``ema``: the EMA teacher is maintained and its distillation loss is logged,
  but it contributes no gradient.
* ``intrax``: instance head plus distillation from the EMA teacher.
* ``interx``: instance head plus the hard-positive/negative fusion head.
* ``full``: everything.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, InstanceForward, TokenSequence, embed, forward_instance, init_backbone
from .data import Batch, Dataset, pk_sample
from .metrics import MetricsReport, evaluate_embeddings
from .objectives import (
    LossBreakdown,
    assemble_total,
    batch_hard_mine,
    id_loss,
    intrax_loss,
    triplet_loss,
    xtriplet_loss,
)
from .optim import ParamGroup, make_groups, sgd_step
from .params import ParamStore, init_layer, projection_std, trunc_normal
from .tensor import Tensor
from .xattention import XParams, gather_keys, interx_key_indices, intrax_key_indices, run_x_stack

ABLATIONS = ("baseline", "ema", "intrax", "interx", "full")


class NumericalError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    num_ids_per_batch: int = 4
    instances_per_id: int = 4
    steps_per_epoch: int = 0  # 0: len(train) // batch_size
    lr0: float = 0.002  # 0.008 at batch 64, linearly scaled to batch 16
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambda1: float = 5.0
    lambda2: float = 0.4
    tau: float = 0.05
    ema_base: float = 0.999
    seed: int = 0
    ablation: str = "full"
    normalize_triplet: bool = False
    label_smoothing: float = 0.0
    share_classifier: bool = False
    detach_xtriplet_targets: bool = False
    interx_copy_init: bool = True

    def __post_init__(self):
        if self.instances_per_id < 2:
            raise ValueError("instances_per_id must be >= 2")
        if self.num_ids_per_batch < 2:
            raise ValueError("num_ids_per_batch must be >= 2")
        if self.batch_size != self.num_ids_per_batch * self.instances_per_id:
            raise ValueError(f"batch_size {self.batch_size} != num_ids_per_batch * instances_per_id "
                             f"({self.num_ids_per_batch} * {self.instances_per_id})")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")

    @property
    def uses_teacher(self) -> bool:
        return self.ablation in ("ema", "intrax", "full")

    @property
    def trains_intrax(self) -> bool:
        return self.ablation in ("intrax", "full")

    @property
    def trains_interx(self) -> bool:
        return self.ablation in ("interx", "full")


# ---------------------------------------------------------------------------
# schedules and EMA
# ---------------------------------------------------------------------------


def ema_lambda(step: int, total_steps: int, base: float = 0.999) -> float:
    """Cosine ramp of the EMA momentum from ``base`` at step 0 to 1 at the end."""
    if total_steps == 0:
        return 1.0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 1.0
    return 1.0 - (1.0 - base) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps == 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def teacher_pairs(params: ParamStore) -> list[tuple[str, str]]:
    return [(name, "backbone." + name[len("intrax."):]) for name in params.names("intrax.")]


def ema_update(params: ParamStore, lam: float) -> None:
    """teacher <- lam * teacher + (1 - lam) * student for every mirrored tensor."""
    for t_name, s_name in teacher_pairs(params):
        teacher, student = params[t_name], params[s_name]
        if teacher.shape != student.shape:
            raise ValueError(f"{t_name} {teacher.shape} does not mirror {s_name} {student.shape}")
        mixed = lam * teacher.data.astype(np.float64) + (1.0 - lam) * student.data.astype(np.float64)
        teacher.data = mixed.astype(teacher.dtype)


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------


def init_interx_from_backbone(params: ParamStore) -> None:
    """Overwrite every InterX layer and norm tensor with a copy of its backbone mirror."""
    for name in params.names("interx."):
        src = params["backbone." + name[len("interx."):]]
        params[name] = Tensor(src.data.copy(), requires_grad=True)


def build_model(bcfg: BackboneConfig, tcfg: TrainConfig, num_classes: int,
                rng: np.random.Generator) -> ParamStore:
    """Backbone, EMA teacher, InterX stack and classifier heads.

    Every tensor is created regardless of ablation so that the random draws,
    and hence the backbone initialisation, are identical across ablations.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 training identities")
    d = bcfg.embed_dim
    p = ParamStore()
    init_backbone(p, bcfg, rng)
    for name in list(p.names("backbone.layers.")) + ["backbone.norm.gamma", "backbone.norm.beta"]:
        p["intrax." + name[len("backbone."):]] = Tensor(p[name].data.copy(), requires_grad=False)
    for i in range(bcfg.num_layers):
        init_layer(p, f"interx.layers.{i}", d, bcfg.ffn_dim, rng, bcfg.init_scheme)
    p["interx.norm.gamma"] = Tensor(np.ones(d, np.float32), requires_grad=True)
    p["interx.norm.beta"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
    if tcfg.interx_copy_init:
        init_interx_from_backbone(p)
    std = projection_std(d, bcfg.init_scheme)
    p["head.ins.classifier"] = Tensor(trunc_normal(rng, (d, num_classes), std), requires_grad=True)
    interx_cls = trunc_normal(rng, (d, num_classes), std)
    if not tcfg.share_classifier:
        p["head.interx.classifier"] = Tensor(interx_cls, requires_grad=True)
    if bcfg.bnneck:
        for head in ("ins", "interx"):
            p[f"head.{head}.bn.gamma"] = Tensor(np.ones(d, np.float32), requires_grad=True)
            p[f"head.{head}.bn.beta"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
    return p


def trainable_names(params: ParamStore, tcfg: TrainConfig) -> list[str]:
    names = params.names("backbone.") + params.names("head.ins.")
    if tcfg.trains_interx:
        names += params.names("interx.") + params.names("head.interx.")
    return names


# ---------------------------------------------------------------------------
# forward losses
# ---------------------------------------------------------------------------


def _batch_norm(f: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = T.mean(f, axis=0, keepdims=True)
    c = f - mu
    var = T.mean(c * c, axis=0, keepdims=True)
    return c / T.sqrt(var + eps) * gamma + beta


def _head_input(f: Tensor, params: ParamStore, head: str, bcfg: BackboneConfig) -> Tensor:
    if bcfg.bnneck:
        return _batch_norm(f, params[f"head.{head}.bn.gamma"], params[f"head.{head}.bn.beta"])
    return f


def _classifier(params: ParamStore, head: str, tcfg: TrainConfig) -> Tensor:
    if head == "interx" and not tcfg.share_classifier:
        return params["head.interx.classifier"]
    return params["head.ins.classifier"]


def compute_losses(images: Tensor, labels: np.ndarray, params: ParamStore, bcfg: BackboneConfig,
                   tcfg: TrainConfig, teacher: np.ndarray | None = None) -> LossBreakdown:
    """Forward pass of the whole objective; ``labels`` are class indices.

    ``teacher`` replaces the IntraX teacher's output. Finite-difference checks
    pass the value from an unperturbed forward so that perturbing the backbone
    does not move the (stop-gradient) teacher target.
    """
    labels = np.asarray(labels, dtype=np.int64)
    depth = bcfg.num_layers
    fwd = forward_instance(images, bcfg, params)
    f_ins = fwd.f_ins
    if not np.all(np.isfinite(f_ins.data)):
        raise NumericalError("non-finite instance features")
    sel = batch_hard_mine(f_ins.data, labels)
    f_pos = T.take(f_ins, sel.pos_idx, axis=0)
    f_neg = T.take(f_ins, sel.neg_idx, axis=0)

    l_id = id_loss(_head_input(f_ins, params, "ins", bcfg), labels, _classifier(params, "ins", tcfg),
                   tcfg.label_smoothing)
    l_tri = triplet_loss(f_ins, f_pos, f_neg, normalize=tcfg.normalize_triplet)
    l_ins = l_id + l_tri
    comps = {"id": l_id.item(), "tri": l_tri.item()}

    l_intrax = None
    intrax_value = 0.0
    f_intrax = None
    if tcfg.uses_teacher and teacher is not None:
        f_intrax = Tensor(teacher, dtype=f_ins.dtype)
    elif tcfg.uses_teacher:
        with T.no_grad():
            idx = intrax_key_indices(labels)
            detached = [seq.tokens.detach() for seq in fwd.per_layer]
            keys = [gather_keys(detached[i], idx) for i in range(depth)]
            anchor = InstanceForward([TokenSequence(t, i) for i, t in enumerate(detached)], f_ins.detach())
            f_intrax = run_x_stack(anchor, keys, XParams.from_store(params, "intrax", depth), depth, bcfg)
    if f_intrax is not None:
        if tcfg.trains_intrax:
            l_intrax = intrax_loss(f_intrax, f_ins, tcfg.tau)
            intrax_value = l_intrax.item()
        else:
            with T.no_grad():
                intrax_value = intrax_loss(f_intrax, f_ins.detach(), tcfg.tau).item()

    l_interx = None
    if tcfg.trains_interx:
        idx = interx_key_indices(labels, sel.pos_idx, sel.neg_idx)
        keys = [gather_keys(fwd.per_layer[i].tokens, idx) for i in range(depth)]
        f_interx = run_x_stack(fwd, keys, XParams.from_store(params, "interx", depth), depth, bcfg)
        l_xid = id_loss(_head_input(f_interx, params, "interx", bcfg), labels,
                        _classifier(params, "interx", tcfg), tcfg.label_smoothing)
        l_xtri = xtriplet_loss(f_interx, f_pos, f_neg, normalize=tcfg.normalize_triplet,
                               detach_targets=tcfg.detach_xtriplet_targets)
        l_interx = l_xid + l_xtri
        comps.update(interx_id=l_xid.item(), xtri=l_xtri.item())

    out = assemble_total(l_ins, l_intrax, l_interx, tcfg.lambda1, tcfg.lambda2, comps)
    out.l_intrax = intrax_value
    out.teacher = None if f_intrax is None else f_intrax.data
    return out


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: ParamStore
    groups: list[ParamGroup]
    total_steps: int
    step: int = 0
    class_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def class_index(self, ids: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.class_ids, ids)


def make_state(params: ParamStore, tcfg: TrainConfig, total_steps: int, class_ids=None) -> TrainState:
    groups = make_groups((n, params[n]) for n in trainable_names(params, tcfg))
    ids = np.asarray(class_ids if class_ids is not None else [], dtype=np.int64)
    return TrainState(params, groups, total_steps, 0, ids)


def train_step(batch: Batch, state: TrainState, bcfg: BackboneConfig, tcfg: TrainConfig) -> LossBreakdown:
    """Forward, backward, SGD on trainable tensors, then EMA on the teacher."""
    lr = cosine_lr(state.step, state.total_steps, tcfg.lr0)
    lam = ema_lambda(state.step, state.total_steps, tcfg.ema_base)
    labels = state.class_index(batch.labels) if state.class_ids.size else batch.labels
    losses = compute_losses(Tensor(batch.images), labels, state.params, bcfg, tcfg)
    if not all(math.isfinite(v) for v in losses.as_dict().values()):
        raise NumericalError(f"non-finite loss at step {state.step}: {losses.as_dict()}")
    losses.total.backward()
    sgd_step(state.groups, lr, tcfg.momentum, tcfg.weight_decay)
    for _, t in state.params.items():
        t.grad = None
    if tcfg.uses_teacher:
        ema_update(state.params, lam)
    losses.components.update(lr=lr, ema_lambda=lam)
    state.step += 1
    return losses


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent PCG64 streams for initialisation and batch sampling."""
    init_ss, sample_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(init_ss)), np.random.Generator(np.random.PCG64(sample_ss))


def steps_per_epoch(train: Dataset, tcfg: TrainConfig) -> int:
    return tcfg.steps_per_epoch or max(1, len(train) // tcfg.batch_size)


def fit(train: Dataset, query: Dataset | None, gallery: Dataset | None, bcfg: BackboneConfig,
        tcfg: TrainConfig, on_epoch: Callable[[dict, TrainState], None] | None = None,
        ) -> tuple[TrainState, list[dict]]:
    """Train for ``tcfg.epochs`` epochs; returns the final state and per-epoch records."""
    class_ids = np.unique(train.ids)
    if bcfg.num_classes and bcfg.num_classes != len(class_ids):
        raise ValueError(f"num_classes {bcfg.num_classes} != {len(class_ids)} training identities")
    init_rng, sample_rng = seed_streams(tcfg.seed)
    params = build_model(bcfg, tcfg, len(class_ids), init_rng)
    spe = steps_per_epoch(train, tcfg)
    state = make_state(params, tcfg, tcfg.epochs * spe, class_ids)
    records = []
    for epoch in range(tcfg.epochs):
        sums: dict[str, float] = {}
        for _ in range(spe):
            batch = pk_sample(train, tcfg.num_ids_per_batch, tcfg.instances_per_id, sample_rng)
            lb = train_step(batch, state, bcfg, tcfg)
            for k in ("l_ins", "l_intrax", "l_interx", "l_total"):
                sums[k] = sums.get(k, 0.0) + getattr(lb, k)
        rec = {"epoch": epoch, **{k: v / spe for k, v in sums.items()},
               "lr": lb.components["lr"], "ema_lambda": lb.components["ema_lambda"]}
        if query is not None and gallery is not None:
            rep = evaluate_embeddings_for(state.params, bcfg, query, gallery, epoch)
            rec.update(map=rep.map, cmc1=rep.cmc1, cp=rep.cp, ch=rep.ch)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec, state)
    return state, records


def evaluate_embeddings_for(params: ParamStore, bcfg: BackboneConfig, query: Dataset, gallery: Dataset,
                            epoch: int = 0) -> MetricsReport:
    q = embed(query.images, bcfg, params)
    g = embed(gallery.images, bcfg, params)
    return evaluate_embeddings(q, query.ids, g, gallery.ids, epoch)


def log_line(record: dict) -> str:
    return json.dumps(record, sort_keys=False, allow_nan=False)

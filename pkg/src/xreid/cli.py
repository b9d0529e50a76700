"""xreid command line: gen-data, train, eval, gradcheck, export-embeddings.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 IO.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import container
from .backbone import BackboneConfig, embed, init_backbone
from .config import ConfigError, RunConfig, load_config
from .data import Dataset, generate, split
from .metrics import MetricsReport, evaluate_embeddings
from .optim import grad_check_many
from .params import ParamStore
from .tensor import ShapeError, Tensor
from .training import NumericalError, TrainConfig, build_model, compute_losses, fit, log_line, seed_streams

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 5e-3
SPLITS = ("train", "query", "gallery")


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def save_dataset(path: Path, ds: Dataset) -> None:
    container.save(path, {"images": ds.images, "ids": ds.ids, "views": ds.views})


def load_dataset(path: Path) -> Dataset:
    entries = container.load(path)
    missing = {"images", "ids", "views"} - set(entries)
    if missing:
        raise CLIError(f"{path}: missing entries {sorted(missing)}", EXIT_INVALID)
    return Dataset(entries["images"], entries["ids"], entries["views"])


def save_checkpoint(path: Path, params: ParamStore, cfg: RunConfig) -> None:
    """Write via a temporary file so a crash never leaves a half-written checkpoint."""
    tmp = path.with_suffix(path.suffix + ".tmp")
    container.save(tmp, {n: t.data.astype(np.float32) for n, t in params.items()})
    tmp.replace(path)
    path.with_name("config.json").write_text(cfg.dumps())


def load_checkpoint(path: Path, cfg: RunConfig) -> ParamStore:
    """Backbone-shape-checked parameter store; extra (X-branch, head) tensors ride along."""
    entries = container.load(path)
    expected = ParamStore()
    init_backbone(expected, cfg.backbone, np.random.default_rng(0))
    for name, t in expected.items():
        if name not in entries:
            raise CLIError(f"checkpoint {path} lacks tensor {name!r}", EXIT_INVALID)
        if entries[name].shape != t.shape:
            raise CLIError(f"tensor {name!r}: checkpoint shape {entries[name].shape} != config shape {t.shape}",
                           EXIT_INVALID)
    return ParamStore({n: Tensor(a) for n, a in entries.items()})


def _config_for(checkpoint: Path, config: str | None) -> RunConfig:
    if config is not None:
        return load_config(config)
    sidecar = checkpoint.with_name("config.json")
    if not sidecar.exists():
        raise CLIError(f"no --config given and no {sidecar} next to the checkpoint", EXIT_INVALID)
    return load_config(sidecar)


def _eval_split(data: Path) -> tuple[Dataset, Dataset]:
    return load_dataset(data / "query.xrid"), load_dataset(data / "gallery.xrid")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate(cfg.data)
    parts = dict(zip(SPLITS, split(ds, cfg.eval.train_frac)))
    for name, part in parts.items():
        save_dataset(out / f"{name}.xrid", part)
    manifest = {
        "num_ids": cfg.data.num_ids,
        "views": cfg.data.views_per_id,
        "spec": dataclasses.asdict(cfg.data),
        "seed": cfg.data.seed,
        "train_frac": cfg.eval.train_frac,
        "sizes": {k: len(v) for k, v in parts.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.ablation:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, ablation=args.ablation))
    data = Path(args.data)
    train = load_dataset(data / "train.xrid")
    query, gallery = _eval_split(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.xrid"
    log_path = out / "metrics.jsonl"
    log_path.write_text("")

    def on_epoch(record, state):
        with log_path.open("a") as fh:
            fh.write(log_line(record) + "\n")
        save_checkpoint(ckpt, state.params, cfg)

    try:
        fit(train, query, gallery, cfg.backbone, cfg.train, on_epoch=on_epoch)
    except NumericalError as exc:
        kept = f"; last good checkpoint kept at {ckpt}" if ckpt.exists() else ""
        raise CLIError(f"{exc}{kept}", EXIT_NUMERICAL) from exc
    return EXIT_OK


def evaluate_checkpoint(params: ParamStore, bcfg: BackboneConfig, query: Dataset, gallery: Dataset
                        ) -> tuple[MetricsReport, set[str]]:
    """Metrics from f_Ins only; also returns the parameter names that were read."""
    accessed = params.audit()
    q = embed(query.images, bcfg, params)
    g = embed(gallery.images, bcfg, params)
    params.accessed = None
    return evaluate_embeddings(q, query.ids, g, gallery.ids), set(accessed)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _config_for(ckpt, args.config)
    params = load_checkpoint(ckpt, cfg)
    query, gallery = _eval_split(Path(args.data))
    report, _ = evaluate_checkpoint(params, cfg.backbone, query, gallery)
    print(json.dumps(report.as_dict(), sort_keys=True))
    return EXIT_OK


MICRO_BACKBONE = BackboneConfig(image_h=8, image_w=8, patch_size=4, channels=1, embed_dim=8, num_layers=1,
                                num_heads=2, ffn_dim=16)
MICRO_TRAIN = TrainConfig(batch_size=4, num_ids_per_batch=2, instances_per_id=2)


def gradcheck_report(bcfg: BackboneConfig, tcfg: TrainConfig, h: float = 1e-4) -> dict[str, float]:
    """Max relative error per trainable tensor of the total loss on a 2x2 micro-batch, in float64."""
    init_rng, data_rng = seed_streams(tcfg.seed)
    p, k = tcfg.num_ids_per_batch, tcfg.instances_per_id
    params = build_model(bcfg, tcfg, p, init_rng).astype(np.float64)
    images = Tensor(data_rng.uniform(size=(p * k, bcfg.channels, bcfg.image_h, bcfg.image_w)), dtype=np.float64)
    labels = np.repeat(np.arange(p), k)
    teacher = compute_losses(images, labels, params, bcfg, tcfg).teacher
    tensors = {n: t for n, t in params.items() if t.requires_grad}
    return grad_check_many(lambda: compute_losses(images, labels, params, bcfg, tcfg, teacher=teacher).total,
                           tensors, h)


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        bcfg, tcfg = cfg.backbone, cfg.train
    else:
        bcfg, tcfg = MICRO_BACKBONE, MICRO_TRAIN
    if bcfg.embed_dim > 8 or bcfg.num_layers != 1:
        raise CLIError(f"gradcheck expects a micro config (D<=8, L=1), got D={bcfg.embed_dim} L={bcfg.num_layers}",
                       EXIT_INVALID)
    start = time.perf_counter()
    report = gradcheck_report(bcfg, tcfg)
    worst = max(report, key=report.get)
    summary = {"max_rel_error": report[worst], "worst": worst, "tolerance": GRADCHECK_TOL,
               "seconds": round(time.perf_counter() - start, 3), "params": report}
    print(json.dumps(summary, indent=2))
    if not report[worst] < GRADCHECK_TOL:
        raise CLIError(f"gradcheck failed: {worst} max relative error {report[worst]:.3g} >= {GRADCHECK_TOL}",
                       EXIT_NUMERICAL)
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _config_for(ckpt, args.config)
    params = load_checkpoint(ckpt, cfg)
    data = Path(args.data)
    names = SPLITS[1:] if args.split == "test" else (args.split,)
    parts = [load_dataset(data / f"{n}.xrid") for n in names]
    ds = Dataset(np.concatenate([d.images for d in parts]), np.concatenate([d.ids for d in parts]),
                 np.concatenate([d.views for d in parts]))
    vectors = embed(ds.images, cfg.backbone, params).astype(np.float32)
    out = Path(args.out)
    if args.format == "bin":
        container.save(out, {"embeddings": vectors, "ids": ds.ids, "views": ds.views})
    else:
        with out.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "view"] + [f"d{j}" for j in range(vectors.shape[1])])
            for i in range(len(vectors)):
                w.writerow([int(ds.ids[i]), int(ds.views[i])] + [f"{v:.9g}" for v in vectors[i]])
    return EXIT_OK


def read_embeddings_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(vectors float32, ids, views) from an export-embeddings CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["id", "view"]:
        raise ValueError(f"{path}: header must start with id,view")
    arr = np.array(body, dtype=object)
    if not len(body):
        return np.zeros((0, len(header) - 2), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64)
    return arr[:, 2:].astype(np.float32), arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xreid", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/query/gallery containers and a manifest")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and log one JSON line per epoch")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", choices=("baseline", "ema", "intrax", "interx", "full"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval and cluster metrics of f_Ins on query/gallery")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the total loss on a micro model")
    c.add_argument("--config")
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-embeddings", help="write f_Ins embeddings with ids and views")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--format", choices=("bin", "csv"), default="bin")
    x.add_argument("--split", choices=("train", "query", "gallery", "test"), default="test")
    x.add_argument("--config")
    x.set_defaults(func=cmd_export_embeddings)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        code, msg = exc.code, str(exc)
    except container.ContainerError as exc:
        code, msg = EXIT_IO, str(exc)
    except (ConfigError, ShapeError, ValueError) as exc:
        code, msg = EXIT_INVALID, str(exc)
    except NumericalError as exc:
        code, msg = EXIT_NUMERICAL, str(exc)
    except OSError as exc:
        code, msg = EXIT_IO, f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": ")
    print(f"xreid: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

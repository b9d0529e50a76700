"""The ten acceptance criteria, one test each.

Every test records a one-line verdict in ``RESULTS``; conftest prints them
at the end of the session (and each test prints its own line under ``-s``).
"""

import json
import math
import time

import numpy as np
import pytest

from xreid import container, kernels
from xreid import tensor as T
from xreid.backbone import BackboneConfig, embed, instance_layer
from xreid.cli import GRADCHECK_TOL, main
from xreid.data import SynthSpec, generate, query_gallery, split
from xreid.metrics import EmbeddingSet, calinski_harabasz, compactness, evaluate_embeddings, retrieval_eval
from xreid.objectives import batch_hard_mine, intrax_loss, triplet_loss, xtriplet_loss
from xreid.tensor import Tensor
from xreid.training import ABLATIONS, TrainConfig, build_model, ema_lambda, fit, make_state, teacher_pairs
from xreid.xattention import KeyBundle, attention_x

from . import oracles
from .helpers import random_layer

RESULTS: dict[int, str] = {}


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def test_c01_gradient_correctness(capsys):
    start = time.perf_counter()
    code = main(["gradcheck"])
    seconds = time.perf_counter() - start
    report = json.loads(capsys.readouterr().out)
    ok = code == 0 and report["max_rel_error"] < GRADCHECK_TOL and seconds < 60
    verdict(1, "gradcheck on micro model", ok,
            f"max rel error {report['max_rel_error']:.2e} (< {GRADCHECK_TOL}) at {report['worst']}, "
            f"{seconds:.1f} s (< 60 s), {len(report['params'])} tensors")


def test_c02_attention_rows_normalised(monkeypatch):
    rows = []
    real = T.softmax

    def recording(a, axis=-1):
        out = real(a, axis)
        rows.append(out.data.astype(np.float64).sum(axis=axis))
        return out

    monkeypatch.setattr(T, "softmax", recording)
    rng = np.random.default_rng(2)
    cfg = BackboneConfig(embed_dim=16, num_heads=4, ffn_dim=32)
    calls = {"instance": 0, "x": 0}
    for _ in range(100):
        w = random_layer(16, 32, rng, scale=rng.uniform(0.1, 2.0))
        scale = rng.uniform(0.1, 20.0)
        z = Tensor(rng.normal(size=(9, 16)) * scale)
        n = len(rows)
        instance_layer(z, w, cfg)
        calls["instance"] += len(rows) - n
        n = len(rows)
        keys = KeyBundle(Tensor(rng.normal(size=(9 * int(rng.integers(1, 4)), 16)) * scale))
        attention_x(z, Tensor(rng.normal(size=(9, 16)) * scale), keys, w, cfg)
        calls["x"] += len(rows) - n
    worst = max(float(np.max(np.abs(r - 1.0))) for r in rows)
    ok = worst <= 1e-6 and calls["instance"] == 100 and calls["x"] == 200
    verdict(2, "attention rows sum to 1", ok,
            f"max |row sum - 1| = {worst:.1e} over {sum(r.size for r in rows)} rows "
            f"({calls['instance']} instance-layer and {calls['x']} X-layer softmaxes)")


def test_c03_parameter_sharing(monkeypatch):
    from xreid import xattention

    seen = []
    real = xattention.mha

    def recording(q, k, v, w, heads, return_attn=False):
        seen.append({name: id(t) for name, t in w.items() if name.startswith("attn.")})
        return real(q, k, v, w, heads, return_attn)

    monkeypatch.setattr(xattention, "mha", recording)
    rng = np.random.default_rng(3)
    cfg = BackboneConfig()
    w = random_layer(64, 128, rng)
    x = Tensor(rng.normal(size=(9, 64)))
    attention_x(x, Tensor(rng.normal(size=(9, 64))), KeyBundle(Tensor(rng.normal(size=(27, 64)))), w, cfg)
    same_weights = len(seen) == 2 and seen[0] == seen[1]

    w2 = {k: Tensor(v.data.copy()) for k, v in w.items()}
    _, s0, c0 = attention_x(x, x * 0.5, KeyBundle(x * 2.0), w2, cfg, return_attn=True)
    w2["attn.wk"].data = w2["attn.wk"].data * 1.1
    _, s1, c1 = attention_x(x, x * 0.5, KeyBundle(x * 2.0), w2, cfg, return_attn=True)
    both_move = not np.allclose(s0.data, s1.data) and not np.allclose(c0.data, c1.data)

    params = build_model(cfg, TrainConfig(), 10, np.random.default_rng(0))
    counts = [(params.numel(f"backbone.layers.{i}."), params.numel(f"interx.layers.{i}."),
               params.numel(f"intrax.layers.{i}.")) for i in range(cfg.num_layers)]
    equal = all(a == b == c for a, b, c in counts)
    verdict(3, "X-layer weight sharing and size", same_weights and both_move and equal,
            f"self and cross attention read identical tensors: {same_weights}; perturbing W_k moves both: "
            f"{both_move}; per-layer counts (instance, InterX, IntraX) = {counts[0]}")


def test_c04_ema_schedule():
    endpoints = all(ema_lambda(0, t) == 0.999 and ema_lambda(t, t) == 1.0 for t in (1, 7, 200, 10_000))
    monotone = all(all(b >= a for a, b in zip(v, v[1:]))
                   for v in ([ema_lambda(s, t) for s in range(t + 1)] for t in (1, 7, 200, 1001)))
    cfg = BackboneConfig(num_layers=2)
    leaks = []
    for ablation in ABLATIONS:
        tcfg = TrainConfig(ablation=ablation)
        state = make_state(build_model(cfg, tcfg, 5, np.random.default_rng(0)), tcfg, 10)
        teacher = {t for t, _ in teacher_pairs(state.params)}
        optimised = {g.name for g in state.groups}
        leaks += sorted(teacher & optimised)
        leaks += [n for n in optimised if n.startswith("intrax.")]
    ok = endpoints and monotone and not leaks
    verdict(4, "EMA schedule and teacher isolation", ok,
            f"lambda(0)=0.999 and lambda(T)=1.0 exactly: {endpoints}; monotone: {monotone}; "
            f"teacher tensors in optimizer across {len(ABLATIONS)} ablations: {len(leaks)}")


def test_c05_distillation_minimum():
    rng = np.random.default_rng(5)
    worst_h, gibbs_violations = 0.0, 0
    for _ in range(1000):
        d = int(rng.integers(2, 65))
        f = rng.normal(scale=rng.uniform(0.01, 2.0), size=d).astype(np.float32)  # the stored feature
        h = oracles.entropy(oracles.tempered(f, 0.05))
        self_loss = intrax_loss(Tensor(f), Tensor(f), 0.05).item()
        worst_h = max(worst_h, abs(self_loss - h))
        s = rng.normal(scale=rng.uniform(0.01, 2.0), size=d)
        cross = intrax_loss(Tensor(f, dtype=np.float64), Tensor(s, dtype=np.float64), 0.05).item()
        gibbs_violations += cross < h - 1e-9
    ok = worst_h <= 1e-6 and gibbs_violations == 0
    verdict(5, "distillation minimum and Gibbs inequality", ok,
            f"max |L(f,f) - H(P(f))| = {worst_h:.1e} (<= 1e-6); Gibbs violations {gibbs_violations}/1000")


def test_c06_triplet_and_mining():
    a = Tensor([[0.3, -1.2, 0.7]])
    direction = np.array([[1.0, 2.0, -2.0]]) / 3.0
    balanced = [abs(fn(a, a + Tensor(direction), a - Tensor(direction)).item() - math.log(2.0))
                for fn in (triplet_loss, xtriplet_loss)]
    finite = True
    for gap in np.linspace(-100, 100, 41):
        anchor = Tensor([[0.0]], requires_grad=True)
        pos = Tensor([[math.sqrt(max(gap, 0.0))]])
        neg = Tensor([[math.sqrt(max(-gap, 0.0))]])
        for fn in (triplet_loss, xtriplet_loss):
            anchor.grad = None
            loss = fn(anchor, pos, neg)
            loss.backward()
            finite &= math.isfinite(loss.item()) and bool(np.all(np.isfinite(anchor.grad)))
    rng = np.random.default_rng(6)
    mismatches = 0
    for i in range(1000):
        p, k = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        labels = rng.permutation(np.repeat(np.arange(p), k))
        if i % 2:
            f = rng.integers(0, 3, size=(p * k, 2)).astype(np.float32)  # forces ties
        else:
            f = rng.normal(size=(p * k, int(rng.integers(1, 9)))).astype(np.float32)
        sel = batch_hard_mine(f, labels)
        pos, neg = oracles.batch_hard(f, labels)
        mismatches += int(not (np.array_equal(sel.pos_idx, pos) and np.array_equal(sel.neg_idx, neg)))
    ok = max(balanced) <= 1e-6 and finite and mismatches == 0
    verdict(6, "triplet, X-triplet and batch-hard mining", ok,
            f"|L - ln 2| = {max(balanced):.1e}; finite over gaps in [-100, 100]: {finite}; "
            f"mining mismatches vs brute force {mismatches}/1000 ({kernels.BACKEND} kernels)")


def test_c07_metric_oracles():
    rng = np.random.default_rng(7)
    retrieval_bad, cp_rel, ch_rel = 0, 0.0, 0.0
    for _ in range(100):
        k, d = int(rng.integers(2, 7)), int(rng.integers(1, 9))
        ql = np.arange(k)
        gl = rng.permutation(np.concatenate([np.arange(k), rng.integers(0, k, size=int(rng.integers(0, 20)))]))
        q = rng.normal(size=(k, d)).astype(np.float32)
        g = rng.normal(size=(len(gl), d)).astype(np.float32)
        if rng.random() < 0.3:
            g = np.round(g)  # distance ties
            q = np.round(q)
        m_ap, cmc = retrieval_eval(EmbeddingSet(q, ql, "query"), EmbeddingSet(g, gl))
        ref_ap, ref_cmc = oracles.retrieval(q, ql, g, gl)
        retrieval_bad += int(not (abs(m_ap - ref_ap) <= 1e-12 and cmc == ref_cmc))
        x = rng.normal(size=(int(rng.integers(k + 1, 40)), d)) * rng.uniform(0.1, 10)
        labels = np.concatenate([np.arange(k), rng.integers(0, k, size=len(x) - k)])
        es = EmbeddingSet(x, labels)
        cp_rel = max(cp_rel, abs(compactness(es)[0] / oracles.compactness(x, labels) - 1))
        ch_rel = max(ch_rel, abs(calinski_harabasz(es) / oracles.calinski_harabasz(x, labels) - 1))
    ok = retrieval_bad == 0 and cp_rel < 1e-9 and ch_rel < 1e-9
    verdict(7, "metric oracles", ok,
            f"retrieval mismatches {retrieval_bad}/100; CP max rel diff {cp_rel:.1e}; CH max rel diff {ch_rel:.1e}")


def test_c08_overfit_sanity():
    start = time.perf_counter()
    ds = generate(SynthSpec(num_ids=8, views_per_id=16, seed=0))
    bcfg, tcfg = BackboneConfig(), TrainConfig(ablation="full", epochs=25, seed=0)
    state, _ = fit(ds, None, None, bcfg, tcfg)
    q, g = query_gallery(ds)
    rep = evaluate_embeddings(embed(q.images, bcfg, state.params), q.ids, embed(g.images, bcfg, state.params), g.ids)
    seconds = time.perf_counter() - start
    ok = rep.cmc1 == 1.0 and seconds < 300 and state.step == 200
    verdict(8, "overfit 8 ids x 16 views", ok,
            f"train CMC@1 {rep.cmc1:.3f} (mAP {rep.map:.3f}) after {state.step} steps in {seconds:.1f} s")


def test_c09_ablation_direction():
    table = {a: [] for a in ("baseline", "intrax", "full")}
    for seed in (0, 1, 2):
        train, q, g = split(generate(SynthSpec(num_ids=20, seed=seed)), 0.5)
        for ablation in table:
            _, records = fit(train, q, g, BackboneConfig(), TrainConfig(ablation=ablation, seed=seed))
            table[ablation].append((records[-1]["cp"], records[-1]["ch"]))
    med = {a: np.median(np.array(v), axis=0) for a, v in table.items()}
    cp_ok = med["full"][0] < med["baseline"][0]
    ch_ok = med["full"][1] > med["baseline"][1]
    intrax_ok = med["intrax"][1] > med["baseline"][1]
    verdict(9, "desk ablation direction", cp_ok and ch_ok and intrax_ok,
            "median CP/CH over seeds 0-2: " + ", ".join(f"{a} {m[0]:.3f}/{m[1]:.1f}" for a, m in med.items()))


def test_c10_determinism_and_formats(tmp_path):
    cfg = {"data": {"num_ids": 10, "views_per_id": 8, "seed": 4}, "train": {"epochs": 2, "seed": 4}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    logs = []
    for run in ("a", "b"):
        data, out = tmp_path / f"data_{run}", tmp_path / f"out_{run}"
        assert main(["gen-data", "--config", str(path), "--out", str(data)]) == 0
        assert main(["train", "--config", str(path), "--data", str(data), "--out", str(out)]) == 0
        logs.append((out / "metrics.jsonl").read_bytes())
    identical = logs[0] == logs[1] and len(logs[0].splitlines()) == 2
    blob = (tmp_path / "out_a" / "checkpoint.xrid").read_bytes()
    rng = np.random.default_rng(10)
    special = np.array([np.nan, -0.0, np.inf, -np.inf, 1e-45, 3.4e38], np.float32)
    entries = {"w": rng.normal(size=(3, 4, 5)).astype(np.float32), "special": special,
               "ids": rng.integers(-2**62, 2**62, size=7), "scalar": np.float32(2.5), "empty": np.zeros((0, 3), np.float32)}
    back = container.loads(container.dumps(entries))
    bitwise = container.dumps(container.loads(blob)) == blob and all(
        back[k].tobytes() == np.asarray(v).tobytes() and back[k].shape == np.shape(v) for k, v in entries.items())
    verdict(10, "determinism and container round trip", identical and bitwise,
            f"two seeded CLI runs give byte-identical logs: {identical}; checkpoint and special-value "
            f"container round trips bitwise: {bitwise}")

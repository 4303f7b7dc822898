"""Acceptance gate: ten criteria, each printing one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (or
``python3 tests/test_acceptance.py``). The lines are also repeated in the
terminal summary of a full ``pytest`` run.
"""

from __future__ import annotations

import ast
import inspect
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import attention_loop, bce_scalar, central_difference, gm_scalar, hausdorff_bruteforce
from swin_mil import tensor as T
from swin_mil import training as training_module
from swin_mil.cli import main as cli_main
from swin_mil.data import DatasetManifest, TrainingBag, generate_synthetic
from swin_mil.encoder import (
    EncoderConfig,
    cyclic_shift,
    encode,
    init_encoder_params,
    relative_position_index,
    shift_attention_mask,
    window_attention,
    window_partition,
    window_reverse,
)
from swin_mil.estimator import SwinMILSegmenter
from swin_mil.head import gm_pool, mil_loss, total_loss
from swin_mil.metrics import evaluate, f1_negative, f1_score, hausdorff
from swin_mil.model import ModelConfig, SwinMIL
from swin_mil.tensor import Tensor, no_grad
from swin_mil.training import TrainConfig, load_checkpoint, train

RESULTS: list[str] = []


def record(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}  ({detail})"
    RESULTS.append(line)
    print(line)


# -- 1 -------------------------------------------------------------------------
def test_c1_full_model_gradient_check():
    cfg = ModelConfig(window_size=2)  # window 2 puts a shifted seam on the 4x4 first-stage grid
    model = SwinMIL(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(123)
    image = rng.random((1, 16, 16, 1))
    start = time.perf_counter()

    def loss_value():
        with no_grad():
            return model.loss(image, [1])[0].item()

    model.zero_grad()
    model.loss(image, [1])[0].backward()

    names = list(model.params)
    samples = [(n, tuple(rng.integers(0, s) for s in model.params[n].shape)) for n in names]
    while len(samples) < 300:
        n = names[rng.integers(len(names))]
        samples.append((n, tuple(rng.integers(0, s) for s in model.params[n].shape)))

    errors = []
    for name, idx in samples:
        p = model.params[name]
        num = central_difference(loss_value, p.data, idx, 1e-5)
        ana = float(p.grad[idx])
        errors.append(abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    errors = np.array(errors)
    elapsed = time.perf_counter() - start
    frac = float(np.mean(errors < 1e-4))
    ok = errors.max() < 1e-3 and frac >= 0.95 and elapsed < 600
    modules = {n.split(".")[0] for n, _ in samples}
    record(
        1,
        "full-model finite-difference gradients",
        ok,
        f"{len(samples)} params from {len(modules)} modules, max rel err {errors.max():.2e}, "
        f"{frac:.1%} below 1e-4, {elapsed:.1f}s",
    )
    assert ok


# -- 2 -------------------------------------------------------------------------
def test_c2_generalized_mean_suite():
    rng = np.random.default_rng(2)
    worst_oracle = worst_mean = 0.0
    monotone = bounded = True
    for _ in range(1000):
        h, w = rng.integers(1, 9, size=2)
        m = rng.uniform(0, 1, (h, w))
        r = float(rng.uniform(1, 20))
        got = gm_pool(Tensor(m), r).item()
        worst_oracle = max(worst_oracle, abs(got - gm_scalar(m, r)))
        lo, hi = max(m.min(), 1e-7), m.max()
        bounded &= lo - 1e-12 <= got <= hi + 1e-12
        seq = [gm_pool(Tensor(m), rr).item() for rr in (1, 2, 4, 8, 16, 64)]
        monotone &= all(a <= b + 1e-12 for a, b in zip(seq, seq[1:]))
        clamped = np.clip(m, 1e-7, 1)
        worst_mean = max(worst_mean, abs(gm_pool(Tensor(m), 1).item() - clamped.mean()))
    near_max = abs(gm_pool(Tensor(np.array([[0.1, 0.9]])), 100).item() - 0.9)
    ok = worst_oracle < 1e-6 and monotone and bounded and worst_mean < 1e-9 and near_max < 0.01
    record(
        2,
        "generalized-mean pooling",
        ok,
        f"oracle err {worst_oracle:.1e}, monotone={monotone}, bounded={bounded}, "
        f"r=1 err {worst_mean:.1e}, r=100 gap {near_max:.4f}",
    )
    assert ok


# -- 3 -------------------------------------------------------------------------
def test_c3_loss_suite():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        b = int(rng.integers(1, 6))
        y = rng.integers(0, 2, b)
        sides = [rng.uniform(0, 1, b) for _ in range(3)]
        fused = rng.uniform(0, 1, b)
        total, _ = total_loss([Tensor(s) for s in sides], Tensor(fused), y)
        separate = sum(mil_loss(Tensor(s), y).item() for s in [*sides, fused])
        scalar = sum(bce_scalar(v, lab) for s in [*sides, fused] for v, lab in zip(s, y))
        worst = max(worst, abs(total.item() - separate), abs(total.item() - scalar))
    perfect, _ = total_loss([Tensor([1.0, 0.0])] * 3, Tensor([1.0, 0.0]), [1, 0])
    ln2 = abs(mil_loss(Tensor([0.5]), [1]).item() - math.log(2))
    ok = worst < 1e-6 and perfect.item() == 0.0 and ln2 < 1e-6
    record(3, "MIL loss stack", ok, f"decomposition err {worst:.1e}, perfect loss {perfect.item()}, ln2 err {ln2:.1e}")
    assert ok


# -- 4 -------------------------------------------------------------------------
def test_c4_attention_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    shifted_cases = 0
    for case in range(20):
        ws, shift = [(4, 0), (4, 2), (2, 0), (2, 1)][case % 4]
        heads = 2
        x = rng.standard_normal((8, 8, 4))
        qkv_w, qkv_b = rng.standard_normal((4, 12)) * 0.5, rng.standard_normal(12) * 0.1
        pw, pb = rng.standard_normal((4, 4)) * 0.5, rng.standard_normal(4) * 0.1
        rpb = rng.standard_normal(((2 * ws - 1) ** 2, heads))
        y = Tensor(x[None])
        if shift:
            y = cyclic_shift(y, -shift, -shift)
            shifted_cases += 1
        bias = T.transpose(T.take(Tensor(rpb), relative_position_index(ws)), (2, 0, 1))
        mask = shift_attention_mask(8, 8, ws, shift) if shift else None
        out = window_attention(window_partition(y, ws), *map(Tensor, (qkv_w, qkv_b, pw, pb)), heads, bias, mask)
        out = window_reverse(out, ws, 8, 8)
        if shift:
            out = cyclic_shift(out, shift, shift)
        want = attention_loop(x, qkv_w, qkv_b, pw, pb, heads, ws, shift, rpb)
        worst = max(worst, float(np.abs(out.data[0] - want).max()))
    ok = worst < 1e-5
    record(4, "window attention vs loop oracle", ok, f"20 cases ({shifted_cases} with seam masks), max abs err {worst:.1e}")
    assert ok


# -- 5 -------------------------------------------------------------------------
def test_c5_shape_ladder():
    checks = []
    for size, c in ((64, 24), (256, 24), (256, 96)):
        cfg = EncoderConfig(embed_dim=c)
        params = init_encoder_params(cfg, np.random.default_rng(0))
        with no_grad():
            shapes = encode(Tensor(np.zeros((1, size, size, 1), np.float32)), cfg, params).shapes
        want = [(1, size // 4, size // 4, c), (1, size // 8, size // 8, 2 * c), (1, size // 16, size // 16, 4 * c)]
        checks.append(shapes == want)
    for stages in (2, 4):
        stage_maps, fused, score = SwinMIL(ModelConfig.desk(stages)).predict(np.zeros((1, 64, 64, 1), np.float32))
        checks.append(bool(len(stage_maps) == stages and fused.shape == (1, 64, 64) and np.isfinite(score).all()))
    ok = all(checks)
    record(5, "stage shape ladder", ok, f"64/256 ladders and 2/4-stage builds: {checks}")
    assert ok


# -- 6 and 7 share one desk run ---------------------------------------------------
@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    manifest = generate_synthetic(root / "data", 60, 60, 64, seed=0, test_fraction=1 / 3)
    start = time.perf_counter()
    result = train(manifest.training_bags("train"), ModelConfig(), TrainConfig())
    test_bags = manifest.load_bags("test")
    reports = {side: evaluate(result.model, test_bags, side=side) for side in ("1", "2", "3", "fuse")}
    _, _, scores = result.model.predict(np.stack([b.image for b in test_bags]))
    labels = np.array([b.label for b in test_bags])
    accuracy = float(np.mean((scores >= 0.5) == labels))
    return dict(
        reports=reports,
        accuracy=accuracy,
        elapsed=time.perf_counter() - start,
        n_train=len(manifest.select("train")),
        n_test=len(test_bags),
    )


def test_c6_desk_learning(desk_run):
    fused = desk_run["reports"]["fuse"]
    ok = fused.f1_pos >= 0.70 and fused.f1_neg >= 0.95 and desk_run["accuracy"] >= 0.9 and desk_run["elapsed"] < 1800
    record(
        6,
        "desk-scale learning",
        ok,
        f"train {desk_run['n_train']}, test {desk_run['n_test']}: f1_pos {fused.f1_pos:.3f}, "
        f"f1_neg {fused.f1_neg:.3f}, bag accuracy {desk_run['accuracy']:.3f}, {desk_run['elapsed']:.0f}s",
    )
    assert ok


def test_c7_fusion_not_worse_than_sides(desk_run):
    reps = desk_run["reports"]
    fused = reps["fuse"].f1_pos
    sides = {s: reps[s].f1_pos for s in ("1", "2", "3")}
    ok = all(fused >= v - 0.02 for v in sides.values())
    record(
        7,
        "fusion vs side outputs",
        ok,
        f"fused f1_pos {fused:.3f}; sides " + ", ".join(f"{s}: {v:.3f}" for s, v in sides.items()),
    )
    assert ok


# -- 8 -------------------------------------------------------------------------
def test_c8_metric_oracles():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(500):
        h, w = rng.integers(1, 17, size=2)
        a = rng.random((h, w)) < rng.uniform(0.02, 0.6)
        b = rng.random((h, w)) < rng.uniform(0.02, 0.6)
        got, want = hausdorff(a, b), hausdorff_bruteforce(a, b)
        if not ((math.isnan(got) and math.isnan(want)) or got == want):
            mismatches += 1
    point_a = np.zeros((5, 5), bool)
    point_b = np.zeros((5, 5), bool)
    point_a[0, 0] = point_b[3, 4] = True
    gt = np.array([1, 1, 1, 1, 0, 0], bool)
    half = np.array([1, 1, 0, 0, 0, 0], bool)
    hand = [
        hausdorff(point_a, point_b) == 5.0,
        f1_score(half, gt) == 2 * 2 / (2 + 4),
        f1_score(gt, gt) == 1.0,
        f1_score(gt, ~gt) == 0.0,
        f1_negative(np.array([0, 0, 0, 1], bool)) == 6 / 7,
        f1_negative(np.zeros(4, bool)) == 1.0,
        f1_negative(np.ones(4, bool)) == 0.0,
    ]
    ok = mismatches == 0 and all(hand)
    record(8, "metric oracles", ok, f"hausdorff mismatches {mismatches}/500, hand cases {sum(hand)}/{len(hand)}")
    assert ok


# -- 9 -------------------------------------------------------------------------
def test_c9_determinism_and_resume(tmp_path):
    manifest = generate_synthetic(tmp_path / "data", 20, 20, 64, seed=9)
    bags = manifest.training_bags("train")
    cfg = TrainConfig(epochs=2, seed=11)
    runs = [train(bags, ModelConfig(), cfg.replace(epochs=1), out_dir=tmp_path / f"run{i}") for i in range(2)]
    ck = [r.checkpoints[0].read_bytes() for r in runs]
    identical = ck[0] == ck[1]

    steps_per_epoch = math.ceil(len(bags) / cfg.batch_size)
    full = train(bags, ModelConfig(), cfg, max_steps=steps_per_epoch + 1)
    resumed = train(bags, train_cfg=cfg, resume=load_checkpoint(runs[0].checkpoints[0]), max_steps=1)
    same = all(
        np.array_equal(full.model.params[k].data, resumed.model.params[k].data)
        and np.array_equal(full.optimizer.m[k], resumed.optimizer.m[k])
        and np.array_equal(full.optimizer.v[k], resumed.optimizer.v[k])
        for k in full.model.params
    )
    same &= full.optimizer.step_count == resumed.optimizer.step_count == steps_per_epoch + 1
    ok = identical and same
    record(9, "determinism and resume", ok, f"epoch-1 checkpoints identical={identical} ({len(ck[0])} bytes), resume bitwise={same}")
    assert ok


# -- 10 ------------------------------------------------------------------------
class _Guarded:
    """Bag stand-in that logs attribute reads and refuses anything but image/label."""

    def __init__(self, image, label, seen):
        object.__setattr__(self, "_d", {"image": image, "label": label})
        object.__setattr__(self, "_seen", seen)

    def __getattribute__(self, name):
        if name.startswith("__") or name in ("_d", "_seen"):
            return object.__getattribute__(self, name)
        object.__getattribute__(self, "_seen").add(name)
        d = object.__getattribute__(self, "_d")
        if name in d:
            return d[name]
        raise AssertionError(f"training read forbidden attribute {name!r}")


def _training_source_mentions_masks() -> list[str]:
    tree = ast.parse(Path(training_module.__file__).read_text())
    hits = []
    for node in ast.walk(tree):
        if isinstance(node, ast.Attribute) and "mask" in node.attr:
            hits.append(node.attr)
        elif isinstance(node, ast.Name) and "mask" in node.id:
            hits.append(node.id)
        elif isinstance(node, ast.ImportFrom):
            hits += [a.name for a in node.names if "mask" in a.name or a.name in ("Bag", "load_bags")]
    return hits


def test_c10_weak_supervision_interface(tmp_path, monkeypatch):
    manifest = generate_synthetic(tmp_path / "data", 4, 4, 32, seed=10)
    bags = manifest.training_bags("train")
    seen: set[str] = set()
    guarded = [_Guarded(b.image, b.label, seen) for b in bags]
    train(guarded, ModelConfig.desk(2), TrainConfig(epochs=1))
    only_image_label = seen <= {"image", "label"}

    no_mask_slot = not hasattr(bags[0], "gt_mask") and TrainingBag.__slots__ == ("image", "label")

    # Mask files must never be opened on the training path.
    import swin_mil.data as data_module

    def boom(*_a, **_k):
        raise AssertionError("mask loaded during training")

    monkeypatch.setattr(data_module, "load_mask", boom)
    for e in manifest.entries:
        e.mask.unlink()
    cli_ok = cli_main(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "run"), "--stages", "2", "--epochs", "1"]) == 0
    bags_ok = len(DatasetManifest(manifest.root, manifest.entries).training_bags("train")) == len(bags)

    fit_args = list(inspect.signature(SwinMILSegmenter.fit).parameters)
    train_args = list(inspect.signature(train).parameters)
    signatures_ok = fit_args == ["self", "X", "y"] and not any("mask" in a for a in train_args)
    source_hits = _training_source_mentions_masks()

    ok = only_image_label and no_mask_slot and cli_ok and bags_ok and signatures_ok and not source_hits
    record(
        10,
        "weak-supervision separation",
        ok,
        f"attributes read {sorted(seen)}, masks deleted + loader disabled: cli train ok={cli_ok}, "
        f"signatures ok={signatures_ok}, mask references in trainer source={source_hits}",
    )
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))

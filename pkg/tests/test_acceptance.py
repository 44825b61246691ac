"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``. The end-to-end
and ablation criteria train real networks and take several minutes in total
on one CPU core.
"""

import io
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from gradcheck import check_layer, check_network_layer, rel_error
from oracles import flood_fill_partition, labeling_partition, otsu_exhaustive, random_mask, random_probmap
from polypfcn.augment import REGIONS, extract_training_set, frame_rng, partition_regions, valid_centers
from polypfcn.cli import main
from polypfcn.config import RunConfig
from polypfcn.fcnnet import (
    NetworkSpec,
    build_network,
    predict_probmap,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
    stack_samples,
    train,
)
from polypfcn.imagecore import BinaryMask, ProbMap, rotate
from polypfcn.metrics import confusion, frame_metrics
from polypfcn.postproc import binarize, connected_components, otsu_threshold
from polypfcn.synthdata import SynthConfig, generate_frame

ABLATION_SEEDS = (0, 1, 2)
END_TO_END_SEED = 0
END_TO_END_EPOCHS = 5
ABLATION_COUNT = 90
ABLATION_EPOCHS = 3
OVERFIT_MAX_EPOCHS = 200
OVERFIT_LR = 0.03
NETWORK_STEPS = (1e-3, 1e-4, 1e-5)


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(autouse=True)
def single_thread():
    with threadpool_limits(limits=1):
        yield


# -- 1 ----------------------------------------------------------------------

def test_criterion_01_otsu_oracle(capsys):
    maps = [random_probmap(seed) for seed in range(200)]
    expected = [otsu_exhaustive(m) for m in maps]
    start = time.perf_counter()
    got = [otsu_threshold(ProbMap(m)) for m in maps]
    elapsed = time.perf_counter() - start
    matches = sum(g == e for g, e in zip(got, expected))
    verdict(capsys, 1, matches == 200 and elapsed < 5,
            f"Otsu equals exhaustive search on {matches}/200 maps in {elapsed:.2f} s")


# -- 2 ----------------------------------------------------------------------

def test_criterion_02_components_oracle(capsys):
    masks = [random_mask(seed) for seed in range(200)]
    expected = {c: [flood_fill_partition(m, c) for m in masks] for c in (4, 8)}
    start = time.perf_counter()
    labelings = {c: [connected_components(BinaryMask(m), c) for m in masks] for c in (4, 8)}
    elapsed = time.perf_counter() - start
    matches = {
        c: sum(labeling_partition(lab.labels) == exp for lab, exp in zip(labelings[c], expected[c]))
        for c in (4, 8)
    }
    verdict(capsys, 2, matches[4] == 200 and matches[8] == 200 and elapsed < 5,
            f"partitions match flood fill 4-conn {matches[4]}/200, 8-conn {matches[8]}/200 "
            f"in {elapsed:.2f} s")


# -- 3 ----------------------------------------------------------------------

def _layer_inputs(net, x):
    """Activations entering each layer during a forward pass of ``x``."""
    L = net.layers
    acts = {}
    h = x
    pooled = {}
    for i in range(1, 6):
        acts[f"conv{i}"] = h
        h = L[f"conv{i}"].forward(h)
        acts[f"relu{i}"] = h
        h = L[f"relu{i}"].forward(h)
        acts[f"pool{i}"] = h
        h = L[f"pool{i}"].forward(h)
        pooled[i] = h
    acts["conv7"] = h
    h = L["relu7"].forward(L["conv7"].forward(h))
    acts["score_fr"] = h
    score = L["score_fr"].forward(h)
    acts["score_pool4"] = pooled[4]
    acts["score_pool3"] = pooled[3]
    acts["upscore2"] = score
    up = L["upscore2"].forward(score)
    acts["fuse_pool4"] = (up, L["score_pool4"].forward(pooled[4]))
    fused = L["fuse_pool4"].forward(*acts["fuse_pool4"])
    acts["upscore_pool4"] = fused
    up = L["upscore_pool4"].forward(fused)
    acts["fuse_pool3"] = (up, L["score_pool3"].forward(pooled[3]))
    acts["upscore8"] = L["fuse_pool3"].forward(*acts["fuse_pool3"])
    return acts


def test_criterion_03_gradient_checks(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    x = rng.random((1, 3, 32, 32))
    results = {}
    kinks = 0

    # every layer of FCN-8S in isolation, fed its real activations
    fcn8 = build_network(NetworkSpec("FCN8"), np.random.default_rng(1), np.float64)
    for lname, inp in _layer_inputs(fcn8, x).items():
        layer = fcn8.layers[lname]
        inputs = list(inp) if isinstance(inp, tuple) else [inp]
        worst, checked, available, skipped = check_layer(layer, inputs, rng, n_coords=200)
        results[f"{type(layer).__name__}:{lname}"] = (worst, checked, available)
        kinks += skipped

    # the remaining transposed-conv strides
    for variant, lname in (("FCN16", "upscore16"), ("FCN32", "upscore32")):
        net = build_network(NetworkSpec(variant), np.random.default_rng(1), np.float64)
        layer = net.layers[lname]
        score = rng.standard_normal((1, 2, 32 // layer.stride, 32 // layer.stride))
        worst, checked, available, _ = check_layer(layer, [score], rng, n_coords=200)
        results[f"ConvTranspose2d:{lname}"] = (worst, checked, available)

    # softmax cross-entropy on real logits
    logits = fcn8.forward(x)
    target = (rng.random((1, 32, 32)) < 0.3).astype(np.uint8)
    _, grad = softmax_cross_entropy(logits, target)
    idx = rng.choice(logits.size, 200, replace=False)
    worst = 0.0
    for i in idx:
        old = logits.flat[i]
        logits.flat[i] = old + 1e-5
        up = softmax_cross_entropy(logits, target)[0]
        logits.flat[i] = old - 1e-5
        down = softmax_cross_entropy(logits, target)[0]
        logits.flat[i] = old
        worst = max(worst, rel_error(grad.flat[i], (up - down) / 2e-5))
    results["SoftmaxCE"] = (worst, len(idx), logits.size)

    # end to end through every variant under a random projection of the
    # logits. With all ReLU and max-pool decisions fixed the logits are
    # linear in any single weight, so a wider step has no truncation error
    # and less round-off. Each coordinate takes the widest step that flips no
    # decision; the few that straddle a kink at every step are skipped.
    for variant in ("FCN32", "FCN16", "FCN8"):
        net = build_network(NetworkSpec(variant), np.random.default_rng(3), np.float64)
        proj = rng.standard_normal((1, 2, 32, 32))
        base = net.forward(x)

        def loss(net=net, proj=proj, base=base):
            return float(((net.forward(x) - base) * proj).sum())

        net.forward(x)
        grads = net.backward(proj)
        for lname, layer in net.layers.items():
            if not layer.params:
                continue
            arrays = [(f"{lname}.{k}", v) for k, v in layer.params.items()]
            size = sum(v.size for _, v in arrays)
            worst, checked, skipped = check_network_layer(net, loss, grads, arrays, 200, rng, eps=NETWORK_STEPS)
            kinks += skipped
            results[f"{variant}:{lname}"] = (worst, checked, size)

    elapsed = time.perf_counter() - start
    worst_name = max(results, key=lambda k: results[k][0])
    few = [k for k, (_, n, size) in results.items() if n < min(200, size)]
    layer_types = {k.split(":")[0] for k in results if ":" in k and not k.startswith("FCN")}
    ok = (results[worst_name][0] < 1e-5 and not few and elapsed < 120
          and {"Conv2d", "ReLU", "MaxPool2x2", "ConvTranspose2d", "SkipSum"} <= layer_types)
    verdict(capsys, 3, ok,
            f"{len(results)} checks, max rel error {results[worst_name][0]:.2e} ({worst_name}), "
            f"under-sampled {few or 'none'}, {kinks} kink coordinates skipped, {elapsed:.1f} s")


# -- 4 ----------------------------------------------------------------------

def test_criterion_04_topology(capsys):
    x = np.random.default_rng(0).random((1, 3, 64, 64))
    shapes = {}
    for variant in ("FCN32", "FCN16", "FCN8"):
        net = build_network(NetworkSpec(variant), np.random.default_rng(0))
        shapes[variant] = net.forward(x).shape
    fusions = len(build_network(NetworkSpec("FCN8"), np.random.default_rng(0)).skip_junctions())
    ok = all(s == (1, 2, 64, 64) for s in shapes.values()) and fusions == 2
    verdict(capsys, 4, ok, f"logit shapes {shapes}, FCN-8S skip fusions {fusions}")


# -- 5 ----------------------------------------------------------------------

def test_criterion_05_patch_selection(capsys):
    aug = RunConfig().augment
    synth = SynthConfig()
    violations, images_checked, full_quota = [], 0, 0
    for i in range(100):
        image, mask = generate_frame(synth, i)
        samples = extract_training_set(image, mask, aug, frame_rng(aug.seed, i))
        for angle in aug.angles:
            batch = [s for s in samples if s.angle == angle]
            images_checked += 1
            if len(batch) != aug.patches_per_image:
                violations.append((i, angle, "count", len(batch)))
                continue
            part = partition_regions(rotate(mask, angle, "nearest"), aug.band_radius)
            nonempty = all(valid_centers(part.region(r), aug.patch_size, mask.data.shape).any() for r in REGIONS)
            hist = tuple(sum(s.region == r for s in batch) for r in REGIONS)
            if nonempty:
                full_quota += 1
                if hist != aug.counts:
                    violations.append((i, angle, "histogram", hist))
            for s in batch:
                x, y = s.center
                if not part.region(s.region)[y, x]:
                    violations.append((i, angle, "center", s.center, s.region))
    verdict(capsys, 5, not violations and full_quota > 0,
            f"{images_checked} rotated images, {full_quota} with all regions available, "
            f"{len(violations)} violations")


# -- 6 ----------------------------------------------------------------------

class _Converged(Exception):
    pass


def run_overfit(out_dir: Path) -> dict:
    """Fit the two frames' default patch set with regularisation off, stopping
    at the first epoch whose pooled Dice over the training patches is >= 0.95."""
    config = RunConfig()
    frames = [generate_frame(config.synth, i) for i in range(2)]
    samples = [s for i, (img, msk) in enumerate(frames)
               for s in extract_training_set(img, msk, config.augment, frame_rng(config.augment.seed, i))]
    images, targets = stack_samples(samples, config.train.dtype)
    net = build_network(config.network, np.random.default_rng(config.train.seed), config.train.dtype)
    cfg = replace(config.train, epochs=OVERFIT_MAX_EPOCHS, learning_rate=OVERFIT_LR, weight_decay=0.0)
    trace = []

    def patch_dice(net):
        pred = softmax(net.forward(images))[:, 1] > 0.5
        truth = targets == 1
        tp = int((pred & truth).sum())
        return 2 * tp / (2 * tp + int((pred & ~truth).sum()) + int((~pred & truth).sum()))

    def on_epoch(record, net):
        trace.append((record.epoch, record.loss, patch_dice(net)))
        if trace[-1][2] >= 0.95:
            raise _Converged

    start = time.perf_counter()
    try:
        train(net, images, targets, cfg, on_epoch)
    except _Converged:
        pass
    elapsed = time.perf_counter() - start
    frame_dice = float(np.mean([
        frame_metrics(confusion(binarize(predict_probmap(net, img), 0.5), msk))["dice"] for img, msk in frames
    ]))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out_dir / "overfit.ckpt")
    masks = io.BytesIO()
    for img, _ in frames:
        masks.write(binarize(predict_probmap(net, img), 0.5).data.tobytes())
    (out_dir / "masks.bin").write_bytes(masks.getvalue())
    (out_dir / "trace.txt").write_text("".join(f"{e} {l!r} {d!r}\n" for e, l, d in trace))
    return {"epochs": trace[-1][0], "dice": trace[-1][2], "frame_dice": frame_dice,
            "elapsed": elapsed, "patches": len(images)}


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit")
    return out, run_overfit(out)


def test_criterion_06_overfit(capsys, overfit_run):
    _, r = overfit_run
    ok = r["dice"] >= 0.95 and r["epochs"] <= 200 and r["elapsed"] < 300
    verdict(capsys, 6, ok,
            f"train-patch Dice {r['dice']:.4f} after {r['epochs']} epochs on {r['patches']} patches "
            f"from 2 frames (whole-frame Dice {r['frame_dice']:.4f}), {r['elapsed']:.1f} s")


# -- 7 ----------------------------------------------------------------------

def run_end_to_end(root: Path) -> dict:
    ini = root / "run.ini"
    ini.write_text(f"[train]\nepochs = {END_TO_END_EPOCHS}\n")
    common = ["--config", str(ini), "--seed", str(END_TO_END_SEED), "--threads", "1"]
    data, model, pred = root / "data", root / "model", root / "pred"
    start = time.perf_counter()
    codes = [
        main(["synth", "--out", str(data), "--count", "300", *common]),
        main(["train", "--manifest", str(data / "train.txt"), "--out", str(model), *common]),
        main(["predict", "--ckpt", str(model / "final.ckpt"), "--manifest", str(data / "test.txt"),
              "--out", str(pred), *common]),
        main(["evaluate", "--pred-dir", str(pred), "--manifest", str(data / "test.txt"), *common]),
    ]
    elapsed = time.perf_counter() - start
    records = [json.loads(line) for line in (pred / "report.jsonl").read_text().splitlines()]
    agg = {r["label"]: r for r in records if r["kind"] == "aggregate"}
    return {
        "codes": codes, "elapsed": elapsed,
        "train": len((data / "train.txt").read_text().splitlines()),
        "test": len((data / "test.txt").read_text().splitlines()),
        "raw": agg["fcn_otsu"], "post": agg["postprocessed"],
    }


@pytest.fixture(scope="module")
def end_to_end(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    return root, run_end_to_end(root)


def test_criterion_07_end_to_end(capsys, end_to_end):
    _, r = end_to_end
    post, raw = r["post"]["macro"]["dice"], r["raw"]["macro"]["dice"]
    fppf = r["post"]["fppf"]
    ok = (r["codes"] == [0, 0, 0, 0] and (r["train"], r["test"]) == (200, 100)
          and post >= 0.75 and post >= raw and fppf <= 0.10 and r["elapsed"] < 1800)
    verdict(capsys, 7, ok,
            f"split {r['train']}/{r['test']}, macro Dice post {post:.4f} vs raw {raw:.4f}, "
            f"FPPF post {fppf:.2f} (raw {r['raw']['fppf']:.2f}), {r['elapsed']:.0f} s")


# -- 8 ----------------------------------------------------------------------

def run_ablation(root: Path, seed: int) -> dict:
    out = root / f"seed{seed}"
    code = main(["ablate", "--out", str(out), "--count", str(ABLATION_COUNT), "--epochs", str(ABLATION_EPOCHS),
                 "--seed", str(seed), "--threads", "1"])
    rows = {}
    for line in (out / "ablation.jsonl").read_text().splitlines():
        rec = json.loads(line)
        rows[rec["row"]] = rec["macro"]["dice"]
    return {"code": code, "rows": rows}


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablate")
    start = time.perf_counter()
    runs = {seed: run_ablation(root, seed) for seed in ABLATION_SEEDS}
    return root, runs, time.perf_counter() - start


def test_criterion_08_ablation_direction(capsys, ablation):
    _, runs, elapsed = ablation
    wins = sum(r["rows"]["c_smart_rotation"] >= r["rows"]["b_polyp_only_rotation"] for r in runs.values())
    detail = "; ".join(
        f"seed {s}: a {r['rows']['a_smart_norotation']:.3f} b {r['rows']['b_polyp_only_rotation']:.3f} "
        f"c {r['rows']['c_smart_rotation']:.3f}"
        for s, r in runs.items()
    )
    ok = all(r["code"] == 0 for r in runs.values()) and wins >= 2
    verdict(capsys, 8, ok, f"c >= b in {wins}/3 seeds ({detail}), {elapsed:.0f} s")


# -- 9 ----------------------------------------------------------------------

def test_criterion_09_determinism(capsys, tmp_path, overfit_run, end_to_end, ablation):
    mismatched = []

    first_overfit, _ = overfit_run
    run_overfit(tmp_path / "overfit")
    if tree(first_overfit) != tree(tmp_path / "overfit"):
        mismatched.append("overfit")

    first_e2e, _ = end_to_end
    (tmp_path / "e2e").mkdir()
    run_end_to_end(tmp_path / "e2e")
    if tree(first_e2e) != tree(tmp_path / "e2e"):
        mismatched.append("end-to-end")

    first_abl, _, _ = ablation
    for seed in ABLATION_SEEDS:
        run_ablation(tmp_path / "ablate", seed)
        if tree(first_abl / f"seed{seed}") != tree(tmp_path / "ablate" / f"seed{seed}"):
            mismatched.append(f"ablation seed {seed}")

    compared = sum(len(tree(p)) for p in (first_overfit, first_e2e, first_abl))
    verdict(capsys, 9, not mismatched,
            f"reran criteria 6-8, compared {compared} files byte for byte, mismatches: {mismatched or 'none'}")


# -- 10 ---------------------------------------------------------------------

def test_criterion_10_metrics(capsys):
    hand = frame_metrics(confusion(BinaryMask(np.array([[1, 1], [0, 0]], np.uint8)),
                                   BinaryMask(np.array([[1, 0], [1, 0]], np.uint8))))
    rng = np.random.default_rng(10)
    worst, checked = 0.0, 0
    for _ in range(1000):
        shape = tuple(rng.integers(4, 33, 2))
        p = BinaryMask((rng.random(shape) < rng.uniform(0.05, 0.95)).astype(np.uint8))
        g = BinaryMask((rng.random(shape) < rng.uniform(0.05, 0.95)).astype(np.uint8))
        m = frame_metrics(confusion(p, g))
        ps = m["precision"] + m["sensitivity"]
        hm = 2 * m["precision"] * m["sensitivity"] / ps if ps else 0.0
        worst = max(worst, abs(hm - m["dice"]))
        checked += 1
    ok = hand["dice"] == 0.5 and hand["accuracy"] == 0.5 and worst <= 1e-12 and checked == 1000
    verdict(capsys, 10, ok,
            f"2x2 case dice {hand['dice']}, accuracy {hand['accuracy']}; "
            f"identity on {checked} pairs, max deviation {worst:.1e}")

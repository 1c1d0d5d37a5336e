"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""

import os
import socket
import struct
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from thermnet import cli
from thermnet import netserve as ns
from thermnet.dataset import SynthConfig, generate_synthetic, load_corpus, resize_bilinear
from thermnet.errors import BadMagic, LengthMismatch, ProtocolError, TruncatedPayload, UnknownType
from thermnet.experiments import DESK_TRAIN, cross_condition, desk_xval
from thermnet.gradsuite import run_suite
from thermnet.model import (
    attach_spatial_transformer,
    build_study2_spec,
    init_parameters,
    parameter_count,
    trace_shapes,
)
from thermnet.thermal import ThermalFrame, quantize
from thermnet.training import (
    EvalReport,
    TrainConfig,
    confusion_matrix,
    make_folds,
    predict_gated,
    train,
)


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- quantization -----------------------------------------------------------


def direct_quantize(temps, lo=0, hi=255):
    """Straight per-frame evaluation of the range and the linear map."""
    t1 = temps.min(axis=(1, 2), keepdims=True)
    t2 = temps.max(axis=(1, 2), keepdims=True)
    value = lo + (hi - lo) * (temps - t1) / (t2 - t1)
    return np.floor(value + 0.5).astype(np.int64), (t2 - t1).ravel()


def test_quantization_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(100)
    temps = rng.normal(25, 4, size=(1000, 75, 75)) + rng.uniform(-20, 20, size=(1000, 1, 1))
    expected, spans = direct_quantize(temps)
    images = [quantize(ThermalFrame(t)) for t in temps]
    mismatched = sum(not np.array_equal(im.pixels, e) for im, e in zip(images, expected))
    dyn_ok = all(im.dynamics == s for im, s in zip(images, spans))

    offsets = rng.uniform(-50, 50, size=100)
    variant = 0
    for k, b in enumerate(offsets):
        shifted = quantize(ThermalFrame(temps[k % 10] + b))
        variant += not np.array_equal(shifted.pixels, images[k % 10].pixels)
    elapsed = time.perf_counter() - start
    ok = mismatched == 0 and dyn_ok and variant == 0 and elapsed < 5
    verdict(
        "quantization oracle",
        ok,
        f"{mismatched}/1000 frames differ from direct evaluation, {variant}/100 offsets change pixels, "
        f"{elapsed:.2f}s (limit 5s)",
    )


# --- gradients --------------------------------------------------------------


def test_gradient_suite():
    start = time.perf_counter()
    results = run_suite(instances=10, seed=0, tolerance=1e-6)
    elapsed = time.perf_counter() - start
    for r in results:
        print(r.line())
    required = {"conv2d", "avgpool2d", "maxpool2d", "dense", "softmax_xent", "affine_grid", "grid_sample", "st_block"}
    covered = {r.name for r in results}
    worst = max(r.max_error for r in results)
    ok = required <= covered and all(r.passed and r.instances >= 10 for r in results) and elapsed < 60
    verdict(
        "gradient suite",
        ok,
        f"{len(results)} operators x 10 instances, worst relative error {worst:.2e} (limit 1e-6), "
        f"{elapsed:.1f}s (limit 60s)",
    )


# --- architecture -----------------------------------------------------------


def test_architecture_fidelity():
    spec = build_study2_spec(17)
    shapes = trace_shapes(spec)
    sides = []
    for s in shapes:
        if len(s) == 3 and (not sides or sides[-1] != s[1]):
            sides.append(s[1])
    oracle = 0
    for shape, layer in zip(shapes, spec.layers):
        if layer.kind == "conv":
            oracle += layer.count * shape[0] * layer.size * layer.size + layer.count
        elif layer.kind == "dense":
            oracle += int(np.prod(shape)) * layer.count + layer.count
    dropouts = [layer.rate for layer in spec.layers if layer.kind == "dropout"]
    count = parameter_count(spec)
    ok = sides == [60, 30, 24, 12, 8, 4] and count == oracle and dropouts == [0.3]
    verdict("architecture fidelity", ok,
            f"trace {'->'.join(map(str, sides))}, {count} parameters (oracle {oracle}), dropout {dropouts}")


def test_st_identity():
    rng = np.random.default_rng(5)
    st_model = init_parameters(attach_spatial_transformer(build_study2_spec(17)), seed=1)
    base = init_parameters(build_study2_spec(17), seed=1)
    base.params = {k: v for k, v in st_model.params.items() if not k.startswith("st.")}
    x = rng.uniform(0, 1, size=(100, 1, 60, 60)).astype(np.float32)
    diff = float(np.abs(st_model.forward(x) - base.forward(x)).max())
    verdict("spatial transformer identity", diff <= 1e-5,
            f"max |ST - plain| over 100 inputs = {diff:.2e} (limit 1e-5)")


# --- learning ---------------------------------------------------------------


@pytest.mark.slow
def test_end_to_end_desk_scale(tmp_path):
    start = time.perf_counter()
    generate_synthetic(SynthConfig(), tmp_path / "corpus")
    data = load_corpus(tmp_path / "corpus")
    report = desk_xval(data, k=5, config=DESK_TRAIN, seed=0, jobs=min(5, os.cpu_count() or 1))
    elapsed = time.perf_counter() - start
    per_class = report.per_class_accuracy
    mca = report.mean_class_accuracy
    ok = len(data) == 1000 and mca >= 0.95 and per_class.min() >= 0.90 and elapsed < 600
    detail = ", ".join(f"{n} {a:.3f}" for n, a in zip(report.labels, per_class))
    verdict("end-to-end 5-fold", ok,
            f"mean class accuracy {mca:.4f} (>= 0.95), per class [{detail}] (each >= 0.90), "
            f"{elapsed:.0f}s (limit 600s)")


@pytest.mark.slow
def test_cross_condition(tmp_path):
    result = cross_condition(tmp_path / "corpus", frames_per_class=200, seed=0)
    acc = result.shifted.overall_accuracy
    in_fold = result.in_fold.overall_accuracy
    verdict(
        "cross-condition",
        result.passed and result.shifted.unseen_conditions == ["B"],
        f"shifted-condition accuracy {acc:.3f} over {result.shifted.total} frames, chance {result.chance:.2f}, "
        f"99% chance bound {result.bound:.3f}, in-fold {in_fold:.3f}",
    )


# --- protocol pieces --------------------------------------------------------


def test_kfold_protocol():
    problems = []
    for k, n_test, n_train in ((5, 20, 80), (10, 10, 90)):
        labels = np.repeat(np.arange(5), 20)
        plan = make_folds(labels, k, seed=k)
        for f in range(k):
            if len(plan.test_indices(f)) != n_test or len(plan.train_indices(f)) != n_train:
                problems.append(f"k={k} fold {f} sizes")
    rng = np.random.default_rng(0)
    for trial in range(50):
        labels = rng.integers(0, 6, size=rng.integers(60, 200))
        if np.bincount(labels).min() < 10:
            continue
        for k in (5, 10):
            plan = make_folds(labels, k, seed=trial)
            tests = [plan.test_indices(f) for f in range(k)]
            if sorted(np.concatenate(tests).tolist()) != list(range(len(labels))):
                problems.append(f"trial {trial} k={k} not a partition")
            for c in range(6):
                per = [int((labels[t] == c).sum()) for t in tests]
                if max(per) - min(per) > 1:
                    problems.append(f"trial {trial} k={k} class {c} spread {per}")
    verdict("k-fold protocol", not problems,
            "5-fold 80/20 and 10-fold 90/10 exact on 100 samples; stratification within 1"
            + (f"; problems: {problems[:3]}" if problems else ""))


def test_metrics_oracle():
    rng = np.random.default_rng(42)
    C = 7
    labels = rng.integers(0, C, 10_000)
    preds = np.where(rng.random(10_000) < 0.6, labels, rng.integers(0, C, 10_000))
    report = EvalReport(confusion_matrix(preds, labels, C), tuple("abcdefg"))

    counts = [[0] * C for _ in range(C)]
    for p, y in zip(preds.tolist(), labels.tolist()):
        counts[y][p] += 1
    per_class = [counts[c][c] / sum(counts[c]) for c in range(C)]
    mca = sum(per_class) / C
    ok = (
        report.confusion.tolist() == counts
        and np.allclose(report.per_class_accuracy, per_class, rtol=0, atol=1e-15)
        and abs(report.mean_class_accuracy - mca) <= 1e-15
    )
    verdict("metrics oracle", ok,
            f"confusion and mean class accuracy {report.mean_class_accuracy:.6f} match recount {mca:.6f} on 10^4 pairs")


def random_message(rng):
    kind = rng.integers(0, 6)
    if kind == 0:
        return ns.Hello(int(rng.integers(0, 2**16)), int(rng.integers(0, 2**16)))
    if kind == 1:
        return ns.HelloAck(int(rng.integers(0, 2**16)), int(rng.integers(0, 2**16)))
    if kind == 2:
        side = int(rng.integers(1, 80))
        return ns.Frame(int(rng.integers(0, 2**63)), side, int(rng.integers(0, 256)), int(rng.integers(0, 256)),
                        float(np.float32(rng.normal(0, 5))), rng.integers(0, 256, side * side, dtype=np.uint8).tobytes())
    if kind == 3:
        label = None if rng.random() < 0.3 else "".join(chr(c) for c in rng.integers(32, 0x3000, rng.integers(0, 12)))
        return ns.Prediction(int(rng.integers(0, 2**63)), label, float(np.float32(rng.random())),
                             float(np.float32(rng.random())))
    if kind == 4:
        return ns.Error("".join(chr(c) for c in rng.integers(32, 127, rng.integers(0, 40))))
    return ns.Bye()


def test_wire_protocol(tmp_path):
    rng = np.random.default_rng(9)
    failures = 0
    for _ in range(10_000):
        msg = random_message(rng)
        if ns.decode_message(ns.encode_message(msg)) != msg:
            failures += 1

    good = ns.encode_message(ns.Hello(1, 75))
    corrupt = [
        (bytes([good[0] ^ 1]) + good[1:], BadMagic),
        (good[:4] + bytes([42]) + good[5:], UnknownType),
        (good[:5] + struct.pack("<I", 5) + good[9:] + b"\0", LengthMismatch),
        (good + b"x", LengthMismatch),
        (good[:-2], TruncatedPayload),
    ]
    raised = 0
    for buf, exc in corrupt:
        try:
            ns.decode_message(buf)
        except exc:
            raised += 1
        except ProtocolError:
            pass

    # loopback classification equals in-process gating
    cfg = SynthConfig(frames_per_class=8, seed=6)
    generate_synthetic(cfg, tmp_path / "corpus")
    data = load_corpus(tmp_path / "corpus")
    model = init_parameters(build_study2_spec(len(data.vocabulary)), 0, data.vocabulary)
    model, _ = train(model, data, TrainConfig(0.01, 8, 2, 0.9, 0))
    server = ns.start_server(model, "127.0.0.1:0", threshold=0.3)
    try:
        records = ns.client_stream(tmp_path / "corpus", server.address)
        host, port = ns.parse_address(server.address)
        with socket.create_connection((host, port), timeout=10) as sock, sock.makefile("rb") as r:
            sock.sendall(good + b"not a message")
            ack, err = ns.read_message(r), ns.read_message(r)
            closed = r.read() == b""
    finally:
        server.shutdown()
        server.server_close()
    mismatches = 0
    for rec, img in zip(records, data.samples):
        g = predict_gated(model, resize_bilinear(img, model.input_side), 0.3)
        expected = None if g.abstained else model.class_labels[g.class_index]
        if rec.score != g.score or rec.label != expected:
            mismatches += 1
    server_ok = isinstance(ack, ns.HelloAck) and err == ns.Error("bad magic") and closed
    ok = failures == 0 and raised == len(corrupt) and mismatches == 0 and len(records) == len(data) and server_ok
    verdict("wire protocol", ok,
            f"{failures}/10000 round-trip failures, {mismatches}/{len(records)} loopback score mismatches, "
            f"{raised}/{len(corrupt)} corrupt cases raise the expected error, garbage after HELLO -> ERROR(bad magic) and close")


def test_determinism(tmp_path):
    def pipeline(root):
        corpus, model = root / "corpus", root / "model.dtim"
        steps = [
            ["synth", "--out", str(corpus), "--classes", "3", "--frames-per-class", "10",
             "--condition", "A", "--condition", "B:1.4:0.1", "--seed", "7"],
            ["train", "--corpus", str(corpus), "--out", str(model), "--held-condition", "B",
             "--epochs", "3", "--seed", "7"],
            ["eval", "--model", str(model), "--corpus", str(corpus), "--held-condition", "B",
             "--report", str(root / "eval.json"), "--confusion", str(root / "eval.csv")],
            ["xval", "--corpus", str(corpus), "--k", "5", "--epochs", "2", "--seed", "7",
             "--report", str(root / "xval.json"), "--confusion", str(root / "xval.csv")],
        ]
        for argv in steps:
            assert cli.run(argv) == 0, argv
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differing
    verdict("determinism", ok,
            f"{len(a)} artifacts (corpus, model, eval and xval reports) compared, {len(differing)} differ")

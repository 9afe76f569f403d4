"""Acceptance suite: one verdict line per criterion, printed in the terminal summary.

Criteria 5 and 6 train real models and take tens of minutes on one core.
Set SPECKLE_LAB_ACCEPTANCE_DIR to keep their datasets between runs.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from gradcheck import TOL, check, op_cases
from speckle_lab import formats
from speckle_lab.cli import main as cli_main
from speckle_lab.deform import (DeformationSpec, DeformationSweep, SpeckleSweep, make_dataset,
                                make_pair, regenerate)
from speckle_lab.dic import run_dic
from speckle_lab.fields import DisplacementField, Roi
from speckle_lab.models import (INCEPTION_1, INCEPTION_2, CnnPredictor, ModelCheckpoint,
                                ModelConfig, build_encoder, build_model, encoder_layer_table,
                                forward_batch)
from speckle_lab.pipeline import (TrainConfig, dataset_mae, infer_sequence, learning_rate,
                                  load_pair_data, split_dataset, train,
                                  transfer_efficacy_experiment, zero_baseline_mae)
from speckle_lab.speckle import SpeckleParams, render_reference

RESULTS = {}

# desk-scale learning setup
TOY = ModelConfig(width_scale=0.125)
A_PAIRS, A_SIZE, A_EPOCHS = 2000, 64, 50
A_TRAIN = TrainConfig(epochs=A_EPOCHS, batch_size=16, base_lr=1e-3, warmup_epochs=5,
                      lr_drop_epoch=A_EPOCHS * 220 // 400, seed=0)
# shifted dataset for the transfer experiment
B_PAIRS, B_EPOCHS = 800, 20
B_SPECKLE = SpeckleSweep(density=(0.012, 0.016))
B_DEFORM = DeformationSweep(kinds=("damage_concentration",))
B_TRAIN = TrainConfig(epochs=B_EPOCHS, batch_size=16, base_lr=1e-3, warmup_epochs=2,
                      lr_drop_epoch=B_EPOCHS, seed=0)


def progress(record):
    print(f"  epoch {record.epoch}: train {record.train_loss:.4f} val {record.val_mae:.4f} "
          f"lr {record.lr:.1e}", flush=True)


def verdict(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def summary_lines():
    lines = []
    for n in range(1, 10):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            lines.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            lines.append(f"criterion {n}: FAIL  not evaluated (error or skipped)")
    return lines


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    env = os.environ.get("SPECKLE_LAB_ACCEPTANCE_DIR")
    return formats.ensure_dir(env) if env else tmp_path_factory.mktemp("acceptance")


def _dataset(root, n, speckle, deform, seed):
    if not (root / "manifest.json").exists():
        make_dataset(n, speckle, deform, root, size=A_SIZE, seed=seed)
    data = load_pair_data(root)
    tr, va, _ = split_dataset(len(data), seed=0)
    return data.subset(tr), data.subset(va)


@pytest.fixture(scope="module")
def learned(workdir):
    tr, va = _dataset(workdir / "dataset_a", A_PAIRS, SpeckleSweep(), DeformationSweep(), 0)
    t0 = time.perf_counter()
    ck, log = train(build_model(TOY), tr, va, A_TRAIN, log=progress)
    return ck, log, zero_baseline_mae(va), time.perf_counter() - t0


def test_1_gradient_integrity():
    t0 = time.perf_counter()
    worst, shapes = {}, {}
    for name, fn, arrays in op_cases():
        op = name.split("[")[0]
        worst[op] = max(worst.get(op, 0.0), check(fn, arrays))
        shapes[op] = shapes.get(op, 0) + 1
    elapsed = time.perf_counter() - t0
    op, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < TOL and min(shapes.values()) >= 3 and elapsed < 60
    verdict(1, ok, f"{len(worst)} ops, >= {min(shapes.values())} shapes each, "
                   f"worst rel err {err:.2e} ({op}), {elapsed:.1f}s")


def test_2_oracle_fidelity():
    t0 = time.perf_counter()
    ref = render_reference(SpeckleParams(seed=2), 128, 128)
    exact = True
    for du, dv in ((3, -2), (-1, 3), (2, 2)):
        pair = make_pair(SpeckleParams(seed=2), DeformationSpec(
            kind="translation", amplitude_max=4.0, coefficients=(du, dv)), 128, 128)
        res = run_dic(ref, pair.deformed)
        gy, gx = np.meshgrid(res.ys, res.xs, indexing="ij")
        # subsets whose matched window lies fully inside the deformed frame
        half = 17
        inside = ((gx + du - half >= 0) & (gx + du + half <= 127)
                  & (gy + dv - half >= 0) & (gy + dv + half <= 127))
        sel = inside & res.valid
        exact &= bool(sel.any() and np.all(res.u[sel] == du) and np.all(res.v[sel] == dv))
    rng = np.random.default_rng(20)
    errs = []
    for i in range(20):
        c = rng.uniform(-1, 1, 2)
        pair = make_pair(SpeckleParams(seed=100 + i), DeformationSpec(
            kind="translation", amplitude_max=1.0, coefficients=tuple(c)), 128, 128)
        res = run_dic(pair.reference, pair.deformed)
        m = res.valid
        errs.append(np.concatenate([np.abs(res.u[m] - c[0]), np.abs(res.v[m] - c[1])]))
    mae = float(np.concatenate(errs).mean())
    elapsed = time.perf_counter() - t0
    verdict(2, exact and mae <= 0.05 and elapsed < 120,
            f"integer shifts exact: {exact}; subpixel grid MAE {mae:.4f} px over 20 "
            f"translations, {elapsed:.1f}s")


def test_3_generator_oracle_cross_check():
    t0 = time.perf_counter()
    d_err, s_err = [], []
    for i in range(20):
        spec = DeformationSpec(kind="gaussian_bumps", amplitude_max=1.0, seed=100 + i,
                               width_min=8.0, width_max=16.0)
        pair = make_pair(SpeckleParams(seed=500 + i), spec, 128, 128)
        res = run_dic(pair.reference, pair.deformed)
        # dense fields are compared where the measurement grid spans the image
        win = np.s_[:, res.ys[0]:res.ys[-1] + 1, res.xs[0]:res.xs[-1] + 1]
        d_err.append(np.abs(res.displacement.as_array() - pair.truth_disp.as_array())[win].ravel())
        s_err.append(np.abs(res.strain.as_array() - pair.truth_strain.as_array())[win].ravel())
    d, s = float(np.concatenate(d_err).mean()), float(np.concatenate(s_err).mean())
    elapsed = time.perf_counter() - t0
    verdict(3, d <= 0.05 and s <= 5e-3 and elapsed < 300,
            f"dense displacement MAE {d:.4f} px, strain MAE {s:.2e}, {elapsed:.1f}s")


def test_4_architecture_fidelity():
    t0 = time.perf_counter()
    rows = encoder_layer_table(build_encoder(ModelConfig()))
    expected = [
        ("conv", 64, (7, 7)), ("bn_relu", None, None), ("maxpool", None, (3, 3)),
        ("conv", 192, (3, 3)), ("bn_relu", None, None), ("maxpool", None, (3, 3)),
        ("inception", 480, INCEPTION_1), ("maxpool", None, (3, 3)),
        ("inception", 832, INCEPTION_2), ("maxpool", None, (3, 3)),
    ]
    table_ok = len(rows) == 10
    for row, (kind, ch, size) in zip(rows, expected):
        if kind == "conv":
            table_ok &= row["kernels"] == ch and row["kernel_size"] == size
        elif kind == "maxpool":
            table_ok &= row["pool_size"] == size and row["stride"] == (2, 2)
        elif kind == "inception":
            table_ok &= row["out_channels"] == ch and row["filters"] == size
    shapes_ok = True
    for head, c in (("displacement", 2), ("strain", 3)):
        model = build_model(ModelConfig(head=head))
        model.eval()
        for side in (32, 64, 96, 160, 256):
            shapes_ok &= model(np.zeros((1, 2, side, side), np.float32)).shape == (1, c, side, side)
    elapsed = time.perf_counter() - t0
    verdict(4, table_ok and shapes_ok,
            f"layer table {'matches' if table_ok else 'differs'}; output shapes "
            f"{'ok' if shapes_ok else 'wrong'}; {elapsed:.1f}s")


def test_5_desk_scale_learning(learned):
    ck, log, baseline, elapsed = learned
    best = min(log.val_curve)
    final_third = log.best_epoch > A_EPOCHS - A_EPOCHS // 3
    ratio = baseline / best
    verdict(5, ratio >= 5 and final_third,
            f"best val MAE {best:.4f} px at epoch {log.best_epoch}/{A_EPOCHS}, zero baseline "
            f"{baseline:.4f} px, improvement {ratio:.2f}x (need 5x), {elapsed / 60:.1f} min")


def test_6_transfer_efficacy(learned, workdir):
    ck = learned[0]
    tr, va = _dataset(workdir / "dataset_b", B_PAIRS, B_SPECKLE, B_DEFORM, 1)
    t0 = time.perf_counter()
    report = transfer_efficacy_experiment(ck, tr, va, B_TRAIN, seeds=(0, 1, 2), log=progress)
    (workdir / "efficacy.json").write_text(json.dumps(report, indent=1))
    runs = ", ".join(f"seed {r['seed']}: {r['transfer_epochs_to_threshold']}" for r in report["runs"])
    verdict(6, report["passes"] >= 2,
            f"{report['passes']}/3 seeds reach the scratch final MAE within "
            f"{B_EPOCHS // 2} epochs (transfer epochs: {runs}), "
            f"{(time.perf_counter() - t0) / 60:.1f} min")


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_7_determinism_and_round_trip(tmp_path):
    t0 = time.perf_counter()
    checks = {}
    for name in ("a", "b"):
        make_dataset(24, SpeckleSweep(), DeformationSweep(), tmp_path / name, size=32, seed=9)
    checks["dataset"] = _tree(tmp_path / "a") == _tree(tmp_path / "b")

    data = load_pair_data(tmp_path / "a")
    tr, va, _ = split_dataset(len(data), seed=0)
    tr, va = data.subset(tr), data.subset(va)
    cfg = TrainConfig(epochs=3, base_lr=1e-3, seed=4)
    runs = [train(build_model(TOY), tr, va, cfg) for _ in range(2)]
    checks["training"] = (runs[0][0].to_bytes() == runs[1][0].to_bytes()
                          and runs[0][1].to_dict(timing=False) == runs[1][1].to_dict(timing=False))

    model_a, model_b = runs[0][0].to_model(), runs[1][0].to_model()
    checks["inference"] = (forward_batch(model_a, va.inputs).tobytes()
                           == forward_batch(model_b, va.inputs).tobytes())
    ref = render_reference(SpeckleParams(seed=3), 64, 64)
    seq = [ref, ref, ref]
    seqs = [infer_sequence(CnnPredictor(m), seq, Roi.from_box(16, 16, 32, 32))
            for m in (model_a, model_b)]
    checks["sequence"] = all(a.as_array().tobytes() == b.as_array().tobytes()
                             for a, b in zip(seqs[0].displacements, seqs[1].displacements))

    ck_path = tmp_path / "m.ckpt"
    runs[0][0].save(ck_path)
    again = ModelCheckpoint.load(ck_path)
    checks["checkpoint"] = again.to_bytes() == ck_path.read_bytes()

    fmt = tmp_path / "fmt"
    fmt.mkdir()
    pair = make_pair(SpeckleParams(seed=1), DeformationSpec(seed=2), 32, 32)
    formats.write_pgm(fmt / "r.pgm", pair.reference)
    formats.write_pgm(fmt / "r2.pgm", formats.read_pgm(fmt / "r.pgm"))
    formats.write_field(fmt / "d.f32", pair.truth_disp)
    formats.write_field(fmt / "d2.f32", formats.read_field(fmt / "d.f32"))
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    formats.write_ppm(fmt / "c.ppm", rgb)
    formats.write_ppm(fmt / "c2.ppm", formats.read_ppm(fmt / "c.ppm"))
    manifest = formats.read_json(tmp_path / "a" / "manifest.json")
    regenerate(manifest, tmp_path / "c")
    checks["formats"] = ((fmt / "r.pgm").read_bytes() == (fmt / "r2.pgm").read_bytes()
                         and (fmt / "d.f32").read_bytes() == (fmt / "d2.f32").read_bytes()
                         and (fmt / "d.json").read_bytes() == (fmt / "d2.json").read_bytes()
                         and (fmt / "c.ppm").read_bytes() == (fmt / "c2.ppm").read_bytes()
                         and _tree(tmp_path / "a") == _tree(tmp_path / "c"))
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    verdict(7, not failed and elapsed < 600,
            f"byte-identical: {', '.join(checks)}" + (f"; failed: {failed}" if failed else "")
            + f", {elapsed:.1f}s")


def test_8_schedule():
    bad = []
    for head, base, low in (("displacement", 1e-4, 1e-6), ("strain", 1e-3, 1e-5)):
        cfg = TrainConfig(head=head)
        for e in range(1, cfg.epochs + 1):
            want = base * e / cfg.warmup_epochs if e <= cfg.warmup_epochs else (
                base if e <= 220 else base / 100)
            if learning_rate(e, cfg) != want:
                bad.append((head, e))
        if not np.isclose(learning_rate(221, cfg), low):
            bad.append((head, 221))
    verdict(8, not bad, "closed form matched at every epoch 1-400 for both heads"
            if not bad else f"mismatches at {bad[:5]}")


def test_9_benchmark(tmp_path):
    ck = tmp_path / "toy.ckpt"
    ModelCheckpoint.from_model(build_model(TOY)).save(ck)
    code = cli_main(["bench", "--out", str(tmp_path / "bench"), "--checkpoint", str(ck),
                     "--frames", "100", "--size", "128", "--steps", "4", "7", "14",
                     "--repeats", "3", "--deterministic", "--quiet"])
    rep = formats.read_json(tmp_path / "bench" / "bench.json")
    ok = code == 0 and rep["oracle_ratio"] >= 2 and rep["model_max_rel_dev"] <= 0.10
    verdict(9, ok, f"oracle time max/min {rep['oracle_ratio']:.2f}x (need >= 2), model time "
                   f"max deviation {100 * rep['model_max_rel_dev']:.1f}% (need <= 10%) over "
                   f"{rep['frames']} frames")

"""Training, transfer learning, sequence inference and evaluation."""
from __future__ import annotations

import dataclasses
import io
import math
import time
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import deform
from .dic import run_dic
from .fields import (DisplacementField, GrayImage, Roi, StrainField, field_mae, nearest_multiple,
                     resize_array, resize_image, sample_bicubic)
from .models import (DeformationCNN, ModelCheckpoint, ModelConfig, architecture_diff, build_model,
                     forward_batch)
from .nn import AdamState, Tensor, adam_step, mae_loss

# errors of full-scale networks trained for 400 epochs at 256 px, for context
REFERENCE_ERRORS = {
    "displacement_px": {"validation": 0.03, "test": 0.07},
    "strain_percent": {"validation": 0.06, "test": 0.08},
}
DEFAULT_LR = {"displacement": 1e-4, "strain": 1e-3}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss in epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


class SequenceError(ValueError):
    def __init__(self, frame, message):
        super().__init__(f"frame {frame}: {message}")
        self.frame = frame


@dataclass(frozen=True)
class TrainConfig:
    head: str = "displacement"
    batch_size: int = 16
    epochs: int = 400
    base_lr: float | None = None
    lr_drop_epoch: int = 220
    lr_drop_factor: float = 100.0
    warmup_epochs: int = 5
    l2: float = 0.0005
    weight_decay: float = 0.0
    split: tuple = (0.75, 0.10, 0.15)
    seed: int = 0
    eval_batch: int = 64

    def __post_init__(self):
        if self.head not in DEFAULT_LR:
            raise ValueError(f"head must be one of {sorted(DEFAULT_LR)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalisation)")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.lr_drop_epoch < 0:
            raise ValueError("epoch counts must be non-negative")
        if len(self.split) != 3 or min(self.split) < 0 or not math.isclose(sum(self.split), 1.0):
            raise ValueError("split fractions must be three non-negative numbers summing to 1")
        if self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_factor must be positive")
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))

    @property
    def lr(self) -> float:
        return DEFAULT_LR[self.head] if self.base_lr is None else self.base_lr

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config key(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based ``epoch``: linear warm-up, plateau, then one drop."""
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    base = cfg.lr
    if cfg.warmup_epochs and epoch <= cfg.warmup_epochs:
        return base * epoch / cfg.warmup_epochs
    if epoch > cfg.lr_drop_epoch:
        return base / cfg.lr_drop_factor
    return base


# ---------------------------------------------------------------------------
# data

@dataclass
class PairData:
    """Stacked inputs ``(N, 2, H, W)`` and targets ``(N, C, H, W)`` as float32."""

    inputs: np.ndarray
    targets: np.ndarray
    ids: list
    kind: str = "displacement"

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "PairData":
        idx = np.asarray(idx, dtype=np.int64)
        return PairData(self.inputs[idx], self.targets[idx], [self.ids[i] for i in idx], self.kind)


def load_pair_data(manifest_path, kind="displacement") -> PairData:
    manifest, root = deform.load_manifest(manifest_path)
    entries = manifest["samples"]
    if not entries:
        raise ValueError(f"{manifest_path}: dataset is empty")
    h, w = manifest["height"], manifest["width"]
    c = 2 if kind == "displacement" else 3
    inputs = np.empty((len(entries), 2, h, w), dtype=np.float32)
    targets = np.empty((len(entries), c, h, w), dtype=np.float32)
    for i, entry in enumerate(entries):
        ref, de, disp, strain = deform.load_pair(root, entry)
        inputs[i, 0], inputs[i, 1] = ref.data, de.data
        targets[i] = (disp if kind == "displacement" else strain).as_array()
    return PairData(inputs, targets, [e["id"] for e in entries], kind)


def split_counts(n: int, fractions=(0.75, 0.10, 0.15)) -> tuple[int, int, int]:
    """Validation and test sizes round half-up; training takes the remainder."""
    n_val = int(math.floor(n * fractions[1] + 0.5))
    n_test = int(math.floor(n * fractions[2] + 0.5))
    return n - n_val - n_test, n_val, n_test


def split_dataset(data, fractions=(0.75, 0.10, 0.15), seed=0):
    """Deterministic shuffled partition into train/val/test index arrays.

    ``data`` may be a sample count, a manifest dict or anything with ``len``.
    """
    if not math.isclose(sum(fractions), 1.0):
        raise ValueError("split fractions must sum to 1")
    if isinstance(data, dict):
        n = len(data["samples"])
    elif isinstance(data, (int, np.integer)):
        n = int(data)
    else:
        n = len(data)
    if n < 1:
        raise ValueError("dataset is empty")
    counts = split_counts(n, fractions)
    for name, c, f in zip(("train", "validation", "test"), counts, fractions):
        if c == 0 and f > 0:
            raise ValueError(f"{n} samples leave the {name} split empty; use a larger dataset")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = counts[0], counts[0] + counts[1]
    return perm[:a], perm[a:b], perm[b:]


# ---------------------------------------------------------------------------
# training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    lr: float
    wall_time: float


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    test_mae: float | None = None

    @property
    def best_epoch(self) -> int | None:
        if not self.records:
            return None
        return min(self.records, key=lambda r: (r.val_mae, r.epoch)).epoch

    @property
    def val_curve(self) -> list[float]:
        return [r.val_mae for r in self.records]

    def to_dict(self, timing: bool = True) -> dict:
        rows = []
        for r in self.records:
            d = dataclasses.asdict(r)
            if not timing:
                d.pop("wall_time")
            rows.append(d)
        return {"epochs": rows, "best_epoch": self.best_epoch, "test_mae": self.test_mae}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_mae,lr\n")
        for r in self.records:
            buf.write(f"{r.epoch},{r.train_loss!r},{r.val_mae!r},{r.lr!r}\n")
        return buf.getvalue()


def predict(model: DeformationCNN, data: PairData, batch_size=64) -> np.ndarray:
    return forward_batch(model, data.inputs, batch_size)


def dataset_mae(model: DeformationCNN, data: PairData, batch_size=64) -> float:
    return field_mae(predict(model, data, batch_size).astype(np.float64),
                     data.targets.astype(np.float64))


def zero_baseline_mae(data: PairData) -> float:
    return float(np.abs(data.targets.astype(np.float64)).mean())


def _check_data(model, train_data, val_data):
    if len(train_data) < 2 or len(val_data) < 1:
        raise ValueError("training needs at least 2 training and 1 validation samples")
    for d in (train_data, val_data):
        if d.kind != model.cfg.head:
            raise ValueError(f"model head {model.cfg.head!r} cannot train on {d.kind!r} targets")


def train(model: DeformationCNN, train_data: PairData, val_data: PairData, cfg: TrainConfig,
          optimizer: AdamState | None = None, log=None, start_epoch: int = 0):
    """Minibatch MAE training with Adam; returns the best-validation checkpoint and the log.

    Shuffling and dropout masks for each epoch come from a generator seeded
    with ``(cfg.seed, epoch)``, so a run is a pure function of its inputs.
    """
    _check_data(model, train_data, val_data)
    params = dict(model.named_parameters())
    regularized = {k for k in params if k.endswith("conv.weight") or k.endswith("head.weight")}
    state = optimizer if optimizer is not None else AdamState()
    runlog = RunLog()
    best = ModelCheckpoint.from_model(model, state, start_epoch)
    best_val = math.inf
    n = len(train_data)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = learning_rate(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        perm = rng.permutation(n)
        model.train()
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(perm[start:start + cfg.batch_size])
            if len(idx) < 2:
                continue
            model.zero_grad()
            out = model(Tensor(train_data.inputs[idx]), rng=rng)
            loss = mae_loss(out, train_data.targets[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, b)
            loss.backward()
            adam_step({k: p.data for k, p in params.items()},
                      {k: p.grad for k, p in params.items() if p.grad is not None},
                      state, lr, cfg.l2, regularized, cfg.weight_decay)
            total += value * len(idx)
            count += len(idx)
        val = dataset_mae(model, val_data, cfg.eval_batch)
        rec = EpochRecord(start_epoch + epoch, total / max(count, 1), val, lr,
                          time.perf_counter() - t0)
        runlog.records.append(rec)
        if val < best_val:
            best_val = val
            best = ModelCheckpoint.from_model(model, state, rec.epoch, {"val_mae": val})
        if log is not None:
            log(rec)
    return best, runlog


def fine_tune(checkpoint: ModelCheckpoint, train_data: PairData, val_data: PairData,
              cfg: TrainConfig, lr_multiplier: float = 0.1, expected: ModelConfig | None = None,
              log=None):
    """Continue training every layer from ``checkpoint`` on new data.

    The base rate is ``lr_multiplier`` times the scratch rate of ``cfg``.
    """
    if expected is not None:
        reference = build_model(expected)
        diff = architecture_diff(*reference.state_arrays(), checkpoint.params, checkpoint.buffers)
        if diff:
            raise ValueError("checkpoint architecture differs:\n  " + "\n  ".join(diff))
    model = checkpoint.to_model()
    tuned = cfg.replace(base_lr=cfg.lr * lr_multiplier)
    if cfg.epochs == 0:
        return ModelCheckpoint.from_model(model, None, checkpoint.epoch, checkpoint.extra), RunLog()
    return train(model, train_data, val_data, tuned, log=log)


def epochs_to_threshold(curve, threshold) -> int | None:
    for i, v in enumerate(curve, start=1):
        if v <= threshold:
            return i
    return None


EFFICACY_SCHEMA = {
    "type": "object",
    "required": ["epochs", "seeds", "runs", "passes", "majority_pass"],
    "properties": {
        "epochs": {"type": "integer", "minimum": 1},
        "seeds": {"type": "array", "items": {"type": "integer"}},
        "majority_pass": {"type": "boolean"},
        "passes": {"type": "integer", "minimum": 0},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["seed", "threshold", "scratch_val", "transfer_val",
                             "scratch_epochs_to_threshold", "transfer_epochs_to_threshold", "pass"],
                "properties": {
                    "seed": {"type": "integer"},
                    "threshold": {"type": "number"},
                    "scratch_val": {"type": "array", "items": {"type": "number"}},
                    "transfer_val": {"type": "array", "items": {"type": "number"}},
                    "scratch_train": {"type": "array", "items": {"type": "number"}},
                    "transfer_train": {"type": "array", "items": {"type": "number"}},
                    "scratch_epochs_to_threshold": {"type": ["integer", "null"]},
                    "transfer_epochs_to_threshold": {"type": ["integer", "null"]},
                    "pass": {"type": "boolean"},
                },
            },
        },
    },
}


def transfer_efficacy_experiment(pretrained: ModelCheckpoint, train_b: PairData, val_b: PairData,
                                 cfg: TrainConfig, seeds=(0, 1, 2), log=None) -> dict:
    """Scratch versus transferred training on the same data, schedule and seeds.

    The threshold of each seed is the scratch run's final validation MAE;
    a seed passes when the transferred run reaches it within half the epochs.
    """
    runs = []
    for seed in seeds:
        run_cfg = cfg.replace(seed=int(seed))
        scratch_model = build_model(dataclasses.replace(pretrained.config, seed=int(seed)))
        _, scratch = train(scratch_model, train_b, val_b, run_cfg, log=log)
        _, transfer = fine_tune(pretrained, train_b, val_b, run_cfg, lr_multiplier=1.0, log=log)
        threshold = scratch.val_curve[-1]
        t_epochs = epochs_to_threshold(transfer.val_curve, threshold)
        runs.append({
            "seed": int(seed),
            "threshold": threshold,
            "scratch_val": scratch.val_curve,
            "transfer_val": transfer.val_curve,
            "scratch_train": [r.train_loss for r in scratch.records],
            "transfer_train": [r.train_loss for r in transfer.records],
            "scratch_epochs_to_threshold": epochs_to_threshold(scratch.val_curve, threshold),
            "transfer_epochs_to_threshold": t_epochs,
            "pass": t_epochs is not None and t_epochs <= 0.5 * cfg.epochs,
        })
    passes = sum(r["pass"] for r in runs)
    report = {"epochs": cfg.epochs, "seeds": [int(s) for s in seeds], "runs": runs,
              "passes": passes, "majority_pass": passes * 2 > len(runs)}
    jsonschema.validate(report, EFFICACY_SCHEMA)
    return report


def efficacy_curves_csv(report: dict) -> str:
    buf = io.StringIO()
    buf.write("seed,epoch,scratch_val_mae,transfer_val_mae\n")
    for run in report["runs"]:
        for e, (a, b) in enumerate(zip(run["scratch_val"], run["transfer_val"]), start=1):
            buf.write(f"{run['seed']},{e},{a!r},{b!r}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# inference

def predict_resized(predictor, ref: GrayImage, deformed: GrayImage):
    """Run ``predictor`` at the nearest multiple-of-32 size and map back.

    Displacements are divided by the per-axis scale so they stay in pixels
    of the original frame; strains are dimensionless and only resampled.
    """
    h, w = ref.shape
    nh, nw = nearest_multiple(h), nearest_multiple(w)
    if nh < 32 or nw < 32:
        raise ValueError(f"frames of {h}x{w} are too small to rescale to multiples of 32")
    sx, sy = nw / w, nh / h
    out = predictor(resize_image(ref, nh, nw), resize_image(deformed, nh, nw))
    arr = out.as_array()
    back = np.stack([resize_array(c, h, w) for c in arr])
    if isinstance(out, DisplacementField):
        back[0] /= sx
        back[1] /= sy
    return type(out).from_array(back)


@dataclass
class SequenceResult:
    rois: list
    displacements: list
    strains: list


def _crop(img: GrayImage, box):
    x0, y0, w, h = box
    return GrayImage(img.data[y0:y0 + h, x0:x0 + w])


def infer_sequence(model, frames, initial_roi: Roi, strain_model=None) -> SequenceResult:
    """Cumulative fields over a frame sequence with ROI corner tracking.

    ``model`` predicts displacement between consecutive frames (any callable
    ``(ref, deformed) -> DisplacementField``).  Cumulative fields live on the
    pixel grid of the initial ROI bounding box; the ROI corners are advected
    by the cumulative displacement sampled at their initial positions.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("a sequence needs at least two frames")
    fh, fw = frames[0].shape
    box0 = initial_roi.bounding_box()
    x0, y0, w0, h0 = box0
    if x0 < 0 or y0 < 0 or x0 + w0 > fw or y0 + h0 > fh:
        raise SequenceError(0, f"ROI box {box0} is outside the {fw}x{fh} frame")
    gy, gx = np.mgrid[y0:y0 + h0, x0:x0 + w0].astype(np.float64)
    cu = np.zeros((h0, w0))
    cv = np.zeros((h0, w0))
    cs = np.zeros((3, h0, w0))
    rois, disps, strains = [initial_roi], [], []
    roi = initial_roi
    c0 = initial_roi.corners
    for k in range(1, len(frames)):
        if frames[k].shape != (fh, fw):
            raise SequenceError(k, "frame size changed within the sequence")
        bx, by, bw, bh = roi.bounding_box()
        if bx < 0 or by < 0 or bx + bw > fw or by + bh > fh:
            raise SequenceError(k, f"ROI box {(bx, by, bw, bh)} left the frame")
        if bw < 32 or bh < 32:
            raise SequenceError(k, f"ROI collapsed to {bw}x{bh}, below 32x32")
        ref_c, def_c = _crop(frames[k - 1], (bx, by, bw, bh)), _crop(frames[k], (bx, by, bw, bh))
        inc = predict_resized(model, ref_c, def_c)
        px, py = gx + cu - bx, gy + cv - by
        du = sample_bicubic(inc.u, px, py)
        dv = sample_bicubic(inc.v, px, py)
        if strain_model is not None:
            s_inc = predict_resized(strain_model, ref_c, def_c).as_array()
            cs = cs + np.stack([sample_bicubic(c, px, py) for c in s_inc])
            strains.append(StrainField.from_array(cs))
        cu, cv = cu + du, cv + dv
        disps.append(DisplacementField(cu, cv))
        lx, ly = c0[:, 0] - x0, c0[:, 1] - y0
        moved = c0 + np.stack([sample_bicubic(cu, lx, ly), sample_bicubic(cv, lx, ly)], axis=1)
        try:
            roi = Roi(moved)
        except ValueError as exc:
            raise SequenceError(k, f"ROI degenerated: {exc}") from exc
        rois.append(roi)
    return SequenceResult(rois, disps, strains)


# ---------------------------------------------------------------------------
# evaluation

def evaluate(predictor, samples, oracle=None) -> dict:
    """MAE of ``predictor`` against ground truth, optionally beside an oracle.

    ``samples`` yields ``(reference, deformed, displacement, strain)`` tuples
    (or :class:`~speckle_lab.deform.SamplePair`).  Strain errors are absolute
    and additionally reported in percent.
    """
    def run(pred):
        rows, elapsed = [], 0.0
        for i, s in enumerate(samples):
            if isinstance(s, deform.SamplePair):
                s = (s.reference, s.deformed, s.truth_disp, s.truth_strain)
            ref, de, disp, strain = s
            truth = disp if pred.kind == "displacement" else strain
            if truth is None:
                raise ValueError(f"sample {i} has no {pred.kind} ground truth")
            t0 = time.perf_counter()
            out = predict_resized(pred, ref, de)
            elapsed += time.perf_counter() - t0
            rows.append(field_mae(out, truth))
        return rows, elapsed

    samples = list(samples)
    if not samples:
        raise ValueError("evaluation needs at least one sample")

    def summary(pred):
        rows, elapsed = run(pred)
        mae = float(np.mean(rows))
        d = {"kind": pred.kind, "mae": mae, "per_sample": rows,
             "seconds_per_frame": elapsed / len(rows)}
        if pred.kind == "strain":
            d["mae_percent"] = 100 * mae
        return d

    report = {"model": summary(predictor), "n_samples": len(samples),
              "reference_errors": REFERENCE_ERRORS}
    if oracle is not None:
        report["oracle"] = summary(oracle)
    return report


class TruthEcho:
    """Predictor returning the stored ground truth; a sanity stub for evaluation."""

    def __init__(self, samples, kind="displacement"):
        self.kind = kind
        self._lookup = {}
        for s in samples:
            if isinstance(s, deform.SamplePair):
                s = (s.reference, s.deformed, s.truth_disp, s.truth_strain)
            self._lookup[(s[0].data.tobytes(), s[1].data.tobytes())] = s[2] if kind == "displacement" else s[3]

    def __call__(self, ref, deformed):
        return self._lookup[(ref.data.tobytes(), deformed.data.tobytes())]


def benchmark(model_predictor, oracle_cfg, frames, steps=(4, 7, 14), repeats=3) -> dict:
    """Per-frame wall time of the oracle and the network across DIC step sizes.

    Every frame is correlated against frame 0.  Times are the minimum over
    ``repeats`` passes through the sequence.
    """
    frames = list(frames)
    pairs = [(frames[0], f) for f in frames[1:]]
    rows = []
    for step in steps:
        cfg = dataclasses.replace(oracle_cfg, step=int(step))
        oracle_t = model_t = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            for a, b in pairs:
                run_dic(a, b, cfg)
            oracle_t = min(oracle_t, (time.perf_counter() - t0) / len(pairs))
            t0 = time.perf_counter()
            for a, b in pairs:
                model_predictor(a, b)
            model_t = min(model_t, (time.perf_counter() - t0) / len(pairs))
        rows.append({"step": int(step), "subset_size": cfg.subset_size,
                     "oracle_seconds_per_frame": oracle_t, "model_seconds_per_frame": model_t})
    o = [r["oracle_seconds_per_frame"] for r in rows]
    m = [r["model_seconds_per_frame"] for r in rows]
    mean_m = float(np.mean(m))
    return {"frames": len(pairs), "size": list(frames[0].shape), "rows": rows,
            "oracle_ratio": max(o) / min(o),
            "model_max_rel_dev": max(abs(x - mean_m) / mean_m for x in m)}


def format_benchmark(report: dict) -> str:
    lines = [f"{'step':>5} {'oracle ms/frame':>16} {'model ms/frame':>15}"]
    for r in report["rows"]:
        lines.append(f"{r['step']:>5} {1e3 * r['oracle_seconds_per_frame']:>16.3f} "
                     f"{1e3 * r['model_seconds_per_frame']:>15.3f}")
    lines.append(f"oracle max/min ratio {report['oracle_ratio']:.2f}; "
                 f"model max deviation from mean {100 * report['model_max_rel_dev']:.1f}%")
    return "\n".join(lines)

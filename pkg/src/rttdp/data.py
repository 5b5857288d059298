"""Synthetic shifted-stream datasets, dataset files, and source-model pretraining."""
from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, FormatError, TrainingDivergedError
from .nn import EVAL_STATS, TRAIN_STATS, ModelState, build_model, forward, predict_proba, save_checkpoint
from .tensor import cross_entropy, grad

logger = logging.getLogger(__name__)

CORRUPTIONS = ("gaussian-noise", "blur-proxy", "contrast", "rotation-proxy")

_NOISE_SIGMA = (0.0, 0.04, 0.08, 0.12, 0.16, 0.20)
_BLUR_MIX = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
_CONTRAST = (1.0, 0.75, 0.6, 0.45, 0.3, 0.2)
_SHEAR = (0.0, 0.08, 0.16, 0.24, 0.32, 0.4)


@dataclass
class SyntheticSpec:
    """Class-conditional synthetic data with a sequence of corruption segments."""

    num_classes: int = 10
    form: str = "image"  # "image" or "vector"
    dim: int = 32
    image_shape: tuple = (3, 16, 16)
    separation: float = 1.0
    noise: float = 0.05
    corruptions: list = field(default_factory=lambda: [("gaussian-noise", 5), ("contrast", 5)])
    samples_per_segment: int = 512
    seed: int = 0
    task_seed: int = 0  # fixes the class definitions; ``seed`` only drives the draws

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError("need at least two classes")
        if self.form not in ("image", "vector"):
            raise ContractError(f"input form must be 'image' or 'vector', got {self.form!r}")
        self.image_shape = tuple(self.image_shape)
        self.corruptions = [(str(kind), int(sev)) for kind, sev in self.corruptions]
        for kind, sev in self.corruptions:
            if kind not in CORRUPTIONS:
                raise ContractError(f"unknown corruption {kind!r}; choose from {CORRUPTIONS}")
            if not 0 <= sev <= 5:
                raise ContractError(f"severity must be in 0..5, got {sev}")
        if self.samples_per_segment < 2:
            raise ContractError("samples_per_segment must be at least 2")

    @property
    def input_shape(self) -> tuple:
        return self.image_shape if self.form == "image" else (self.dim,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corruptions"] = [list(c) for c in self.corruptions]
        d["image_shape"] = list(self.image_shape)
        return d


# ---------------------------------------------------------------------------
# class-conditional draws
# ---------------------------------------------------------------------------

def _class_params(spec: SyntheticSpec) -> dict:
    rng = np.random.default_rng([spec.task_seed, 7919])
    k = spec.num_classes
    if spec.form == "vector":
        centers = rng.uniform(-1.0, 1.0, size=(k, spec.dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        return {"centers": 0.5 + 0.2 * spec.separation * centers}
    c = spec.image_shape[0]
    angles = np.pi * np.arange(k) / k + rng.uniform(0, np.pi / (4 * k), size=k)
    freqs = rng.choice([2.0, 3.0], size=k)
    colors = rng.uniform(-1.0, 1.0, size=(k, c))
    colors /= np.abs(colors).max(axis=1, keepdims=True)
    return {"angles": angles, "freqs": freqs, "colors": colors}


def clean_draw(spec: SyntheticSpec, n: int, rng) -> tuple:
    """Uncorrupted samples in [0, 1] with balanced-in-expectation labels."""
    params = _class_params(spec)
    labels = rng.integers(0, spec.num_classes, size=n)
    if spec.form == "vector":
        x = params["centers"][labels] + spec.noise * rng.standard_normal((n, spec.dim))
        return np.clip(x, 0.0, 1.0), labels
    c, h, w = spec.image_shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ang = params["angles"][labels][:, None, None]
    freq = params["freqs"][labels][:, None, None]
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)) / w + phase)
    amp = 0.25 * spec.separation * rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
    x = 0.5 + amp * params["colors"][labels][:, :, None, None] * wave[:, None]
    x = x + spec.noise * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0), labels


def corrupt(x: np.ndarray, kind: str, severity: int, rng) -> np.ndarray:
    """Apply one corruption; severity 0 is the identity."""
    if kind not in CORRUPTIONS:
        raise ContractError(f"unknown corruption {kind!r}")
    if severity == 0:
        return np.array(x, copy=True)
    x = np.asarray(x, dtype=float)
    if kind == "gaussian-noise":
        out = x + _NOISE_SIGMA[severity] * rng.standard_normal(x.shape)
    elif kind == "contrast":
        axes = tuple(range(1, x.ndim))
        m = x.mean(axis=axes, keepdims=True)
        out = m + (x - m) * _CONTRAST[severity]
    elif kind == "blur-proxy":
        out = (1 - _BLUR_MIX[severity]) * x + _BLUR_MIX[severity] * _box_blur(x)
    else:
        out = _shear(x, _SHEAR[severity])
    return np.clip(out, 0.0, 1.0)


def _box_blur(x: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        acc = sum(p[:, :, i:i + x.shape[2], j:j + x.shape[3]] for i in range(3) for j in range(3))
        return acc / 9.0
    p = np.pad(x, ((0, 0), (1, 1)), mode="edge")
    return (p[:, :-2] + p[:, 1:-1] + p[:, 2:]) / 3.0


def _shear(x: np.ndarray, amount: float) -> np.ndarray:
    out = np.empty_like(x)
    if x.ndim == 4:
        h = x.shape[2]
        for r in range(h):
            out[:, :, r, :] = np.roll(x[:, :, r, :], int(round(amount * (r - h / 2))), axis=-1)
        return out
    d = x.shape[1]
    shift = int(round(amount * d))
    return np.roll(x, shift, axis=1)


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    kind: str
    severity: int
    adversary_x: np.ndarray
    adversary_y: np.ndarray
    adversary_idx: np.ndarray
    benign_x: np.ndarray
    benign_y: np.ndarray
    benign_idx: np.ndarray


@dataclass
class Stream:
    spec: Optional[SyntheticSpec]
    segments: list
    classes: int = 0  # used when the stream came from a file rather than a spec

    @property
    def adversary_indices(self) -> set:
        return set(np.concatenate([s.adversary_idx for s in self.segments]).tolist())

    @property
    def benign_indices(self) -> set:
        return set(np.concatenate([s.benign_idx for s in self.segments]).tolist())

    def flat(self) -> tuple:
        """All samples in index order as ``(x, y, segment_ids)``."""
        n = sum(len(s.adversary_y) + len(s.benign_y) for s in self.segments)
        first = self.segments[0]
        x = np.empty((n,) + first.adversary_x.shape[1:])
        y = np.empty(n, dtype=np.int64)
        seg = np.empty(n, dtype=np.int64)
        for s_i, s in enumerate(self.segments):
            x[s.adversary_idx], y[s.adversary_idx] = s.adversary_x, s.adversary_y
            x[s.benign_idx], y[s.benign_idx] = s.benign_x, s.benign_y
            seg[s.adversary_idx] = seg[s.benign_idx] = s_i
        return x, y, seg

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes if self.spec is not None else self.classes


def _split_segment(kind, severity, x, y, offset) -> Segment:
    idx = offset + np.arange(len(y))
    adv = np.arange(len(y)) % 2 == 0
    return Segment(kind, severity, x[adv], y[adv], idx[adv], x[~adv], y[~adv], idx[~adv])


def generate(spec: SyntheticSpec) -> Stream:
    """Draw each segment, corrupt it, and split it into disjoint pools by index parity."""
    segments = []
    for s_i, (kind, severity) in enumerate(spec.corruptions):
        rng = np.random.default_rng([spec.seed, 1, s_i])
        x, y = clean_draw(spec, spec.samples_per_segment, rng)
        x = corrupt(x, kind, severity, rng)
        segments.append(_split_segment(kind, severity, x, y, s_i * spec.samples_per_segment))
    return Stream(spec, segments)


def stream_from_arrays(spec: SyntheticSpec, x: np.ndarray, y: np.ndarray) -> Stream:
    """Rebuild a stream from flat arrays laid out segment by segment."""
    per = spec.samples_per_segment
    if len(y) != per * len(spec.corruptions):
        raise FormatError(f"{len(y)} samples do not fill {len(spec.corruptions)} segments of {per}")
    return Stream(spec, [
        _split_segment(kind, sev, x[i * per:(i + 1) * per], y[i * per:(i + 1) * per], i * per)
        for i, (kind, sev) in enumerate(spec.corruptions)
    ])


def stream_from_dataset(ds: dict) -> Stream:
    """Stream over a loaded dataset file: equal consecutive segments, pools by parity."""
    x, y, segments = ds["x"], ds["y"], max(int(ds.get("segments", 1)), 1)
    if len(y) % segments:
        raise FormatError(f"{len(y)} samples do not split into {segments} equal segments")
    per = len(y) // segments
    stream = Stream(None, [_split_segment("external", 0, x[i * per:(i + 1) * per], y[i * per:(i + 1) * per], i * per)
                           for i in range(segments)], classes=int(ds["num_classes"]))
    return stream


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

DS_MAGIC = b"RTTDPDS1"
DS_VERSION = 1


def save_dataset(path, x: np.ndarray, y: np.ndarray, num_classes: int, segments: int = 1) -> None:
    """Header (magic, version, K, form, shape, count, segments) then (label, float64 values) records."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    shape = x.shape[1:]
    buf = io.BytesIO()
    buf.write(DS_MAGIC)
    buf.write(struct.pack("<HIB", DS_VERSION, num_classes, 1 if len(shape) == 3 else 0))
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(struct.pack("<QI", len(y), segments))
    width = int(np.prod(shape))
    rec = np.zeros(len(y), dtype=np.dtype([("label", "<i4"), ("values", "<f8", (width,))]))
    rec["label"] = y
    rec["values"] = x.reshape(len(y), width)
    buf.write(rec.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> dict:
    raw = Path(path).read_bytes()
    try:
        if raw[:len(DS_MAGIC)] != DS_MAGIC:
            raise FormatError("not a dataset file (bad magic)")
        pos = len(DS_MAGIC)
        version, k, form = struct.unpack_from("<HIB", raw, pos)
        pos += struct.calcsize("<HIB")
        if version != DS_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count, segments = struct.unpack_from("<QI", raw, pos)
        pos += struct.calcsize("<QI")
    except struct.error:
        raise FormatError("truncated dataset header") from None
    width = int(np.prod(shape))
    dt = np.dtype([("label", "<i4"), ("values", "<f8", (width,))])
    if len(raw) - pos != count * dt.itemsize:
        raise FormatError(f"dataset body holds {len(raw) - pos} bytes, expected {count * dt.itemsize}")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=pos)
    y = rec["label"].astype(np.int64)
    if count and (y.min() < 0 or y.max() >= k):
        raise FormatError("label outside 0..K-1")
    return {
        "x": rec["values"].astype(float).reshape((count,) + tuple(shape)),
        "y": y,
        "num_classes": int(k),
        "form": "image" if form == 1 else "vector",
        "segments": int(segments),
    }


def import_csv(path, num_classes: Optional[int] = None) -> dict:
    """Read ``label,f0,f1,...`` rows (one header row) into a vector dataset."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip().lower() != "label":
            raise FormatError("CSV header must start with 'label'")
        labels, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"line {line_no}: expected {len(header)} columns, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"line {line_no}: {exc}") from None
    y = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return {"x": np.asarray(rows, dtype=float), "y": y, "num_classes": k, "form": "vector", "segments": 1}


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def accuracy(model: ModelState, x, y, batch_size: int = 256) -> float:
    correct = 0
    for i in range(0, len(y), batch_size):
        probs = predict_proba(model, x[i:i + batch_size], mode=EVAL_STATS)
        correct += int((probs.argmax(axis=1) == y[i:i + batch_size]).sum())
    return correct / max(len(y), 1)


def recalibrate_bn(model: ModelState, x, batch_size: int = 1024) -> None:
    """Set running statistics to the exact moments of ``x`` (per-chunk averaged)."""
    means, vars_ = {}, {}
    for i in range(0, len(x), batch_size):
        chunk = x[i:i + batch_size]
        if len(chunk) < 2:
            continue
        forward(model, chunk, TRAIN_STATS, update_stats=True, bn_momentum=1.0)
        for layer in model.layers:
            if layer.kind == "batch-norm":
                means.setdefault(layer.name, []).append(model.params[f"{layer.name}.running_mean"].data.copy())
                vars_.setdefault(layer.name, []).append(model.params[f"{layer.name}.running_var"].data.copy())
    for name in means:
        model.params[f"{name}.running_mean"].data = np.mean(means[name], axis=0)
        model.params[f"{name}.running_var"].data = np.mean(vars_[name], axis=0)


def fit_supervised(model: ModelState, x, y, epochs: int = 20, batch_size: int = 64, lr: float = 0.05,
                   momentum: float = 0.9, target_acc: Optional[float] = None, rng=None) -> Optional[float]:
    """Cross-entropy SGD with momentum on every learnable tensor; returns the last train accuracy.

    Running BN statistics are recalibrated on the full training set after
    every epoch and the model is left with ``bn_momentum = 1.0``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    model.bn_momentum = 0.1
    names = model.trainable_names()
    velocity = {k: np.zeros_like(model.params[k].data) for k in names}
    acc = None
    for epoch in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n - 1, batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                continue
            logits, _ = forward(model, x[idx], TRAIN_STATS)
            loss = cross_entropy(logits, y[idx])
            for k, g in zip(names, grad(loss, [model.params[k] for k in names])):
                velocity[k] = momentum * velocity[k] + g
                model.params[k].data = model.params[k].data - lr * velocity[k]
        recalibrate_bn(model, x)
        acc = accuracy(model, x, y)
        logger.info("pretrain epoch %d: train accuracy %.4f", epoch + 1, acc)
        if target_acc is not None and acc >= target_acc:
            break
    model.bn_momentum = 1.0
    return acc


def pretrain_source(spec: SyntheticSpec, architecture: str = "cnn", epochs: int = 20, n_train: int = 4000,
                    batch_size: int = 64, lr: float = 0.05, momentum: float = 0.9, target_acc: Optional[float] = 0.98,
                    min_acc: float = 0.80, seed: Optional[int] = None, checkpoint: Optional[str] = None) -> ModelState:
    """Supervised training on uncorrupted draws until ``target_acc`` or the epoch cap.

    ``target_acc=None`` always trains for the full ``epochs``; a model stopped
    the moment it separates the classes is accurate but far from confident.

    Raises:
        TrainingDivergedError: training accuracy stays below ``min_acc``.
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 2])
    model = build_model(architecture, spec.input_shape, spec.num_classes, seed=seed)
    x, y = clean_draw(spec, n_train, rng)
    acc = fit_supervised(model, x, y, epochs=epochs, batch_size=batch_size, lr=lr, momentum=momentum,
                         target_acc=target_acc, rng=rng)
    if epochs > 0:
        if acc is None or acc < min_acc:
            raise TrainingDivergedError(f"train accuracy {acc} below {min_acc}; the synthetic task is too hard")
    model.bn_momentum = 1.0
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    return model

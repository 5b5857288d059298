"""Small classifiers with an explicit updatable / BN-statistics / frozen partition."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, DegenerateBatchError, FormatError, ShapeError
from .tensor import (
    DTYPE,
    Tensor,
    batch_norm_eval,
    batch_norm_train,
    conv2d,
    flatten,
    global_avg_pool,
    linear,
    relu,
)

ROLE_UPDATABLE = "u"
ROLE_BN_STATS = "b"
ROLE_FROZEN = "f"
ROLES = (ROLE_UPDATABLE, ROLE_BN_STATS, ROLE_FROZEN)

TRAIN_STATS = "train-stats"
EVAL_STATS = "eval-stats"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # linear | conv2d | batch-norm | relu | pool | flatten
    name: str = ""
    shape: tuple = ()
    stride: int = 1
    padding: int = 0


@dataclass
class FeatureTrace:
    """Pre-normalization activations, one (N, C, H, W) tensor per BN layer."""

    layers: list = field(default_factory=list)
    stats: list = field(default_factory=list)  # (mean, var) used by each BN layer, detached

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


class ModelState:
    """Layer list plus named parameters, each tagged with a partition role.

    Roles: ``"u"`` updatable by test-time adaptation, ``"b"`` BN running
    statistics, ``"f"`` frozen.
    """

    def __init__(self, arch: str, layers, params: dict, roles: dict, num_classes: int,
                 input_shape: tuple, bn_momentum: float = 1.0, bn_eps: float = 1e-5):
        self.arch = arch
        self.layers = list(layers)
        self.params = dict(params)
        self.roles = dict(roles)
        self.num_classes = int(num_classes)
        self.input_shape = tuple(input_shape)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)
        self.check_partition()
        for n, t in self.params.items():
            t.requires_grad = self.roles[n] != ROLE_BN_STATS

    def __repr__(self):
        counts = {r: sum(1 for v in self.roles.values() if v == r) for r in ROLES}
        return f"ModelState(arch={self.arch!r}, tensors={len(self.params)}, roles={counts})"

    @property
    def n_bn(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "batch-norm")

    def names(self, role: Optional[str] = None) -> list:
        return [n for n in self.params if role is None or self.roles[n] == role]

    def tensors(self, role: Optional[str] = None) -> list:
        return [self.params[n] for n in self.names(role)]

    def trainable_names(self) -> list:
        """Names of every learnable tensor (roles u and f)."""
        return [n for n in self.params if self.roles[n] != ROLE_BN_STATS]

    def check_partition(self) -> None:
        if set(self.roles) != set(self.params):
            raise ContractError("partition labels do not cover the parameter set exactly")
        bad = {r for r in self.roles.values()} - set(ROLES)
        if bad:
            raise ContractError(f"unknown parameter roles {bad}")
        for layer in self.layers:
            if layer.kind == "batch-norm" and np.any(self.params[f"{layer.name}.running_var"].data <= 0):
                raise ContractError(f"non-positive running variance in {layer.name}")

    def copy(self) -> "ModelState":
        params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return ModelState(self.arch, self.layers, params, self.roles, self.num_classes,
                          self.input_shape, self.bn_momentum, self.bn_eps)

    def set_update_scope(self, scope: str) -> "ModelState":
        """Re-partition learnable tensors: ``"bn-affine"`` or ``"all"``."""
        if scope not in ("bn-affine", "all"):
            raise ContractError(f"unknown update scope {scope!r}")
        for name in self.trainable_names():
            is_affine = any(layer.kind == "batch-norm" and name.startswith(layer.name + ".") for layer in self.layers)
            self.roles[name] = ROLE_UPDATABLE if (scope == "all" or is_affine) else ROLE_FROZEN
        return self

    def state_arrays(self) -> dict:
        return {n: t.data for n, t in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        for n, arr in arrays.items():
            if self.params[n].shape != arr.shape:
                raise ShapeError(f"{n}: expected {self.params[n].shape}, got {arr.shape}")
            self.params[n].data = np.array(arr, dtype=DTYPE, copy=True)

    def same_architecture(self, other: "ModelState") -> bool:
        return (self.arch == other.arch and list(self.params) == list(other.params)
                and all(self.params[n].shape == other.params[n].shape for n in self.params))


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _add_linear(layers, params, roles, name, fan_in, fan_out, rng):
    layers.append(LayerSpec("linear", name, (fan_out, fan_in)))
    params[f"{name}.weight"] = Tensor(_he(rng, (fan_out, fan_in), fan_in))
    params[f"{name}.bias"] = Tensor(np.zeros(fan_out))
    roles[f"{name}.weight"] = roles[f"{name}.bias"] = ROLE_FROZEN


def _add_conv(layers, params, roles, name, c_in, c_out, k, stride, padding, rng):
    layers.append(LayerSpec("conv2d", name, (c_out, c_in, k, k), stride, padding))
    params[f"{name}.weight"] = Tensor(_he(rng, (c_out, c_in, k, k), c_in * k * k))
    params[f"{name}.bias"] = Tensor(np.zeros(c_out))
    roles[f"{name}.weight"] = roles[f"{name}.bias"] = ROLE_FROZEN


def _add_bn(layers, params, roles, name, channels):
    layers.append(LayerSpec("batch-norm", name, (channels,)))
    params[f"{name}.weight"] = Tensor(np.ones(channels))
    params[f"{name}.bias"] = Tensor(np.zeros(channels))
    params[f"{name}.running_mean"] = Tensor(np.zeros(channels))
    params[f"{name}.running_var"] = Tensor(np.ones(channels))
    roles[f"{name}.weight"] = roles[f"{name}.bias"] = ROLE_UPDATABLE
    roles[f"{name}.running_mean"] = roles[f"{name}.running_var"] = ROLE_BN_STATS


def build_mlp(input_dim: int, num_classes: int, hidden: int = 64, seed: int = 0, **kw) -> ModelState:
    """input -> hidden -> hidden -> K, BN + ReLU after each hidden linear."""
    rng = np.random.default_rng(seed)
    layers, params, roles = [], {}, {}
    _add_linear(layers, params, roles, "fc1", input_dim, hidden, rng)
    _add_bn(layers, params, roles, "bn1", hidden)
    layers.append(LayerSpec("relu"))
    _add_linear(layers, params, roles, "fc2", hidden, hidden, rng)
    _add_bn(layers, params, roles, "bn2", hidden)
    layers.append(LayerSpec("relu"))
    _add_linear(layers, params, roles, "head", hidden, num_classes, rng)
    tag = f"mlp:{input_dim}:{hidden}:{num_classes}"
    return ModelState(tag, layers, params, roles, num_classes, (input_dim,), **kw)


def build_cnn(input_shape=(3, 16, 16), num_classes: int = 10, widths=(8, 16), seed: int = 0, **kw) -> ModelState:
    """Two conv-BN-ReLU blocks (second one strided), global pooling, linear head."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers, params, roles = [], {}, {}
    _add_conv(layers, params, roles, "conv1", c, widths[0], 3, 1, 1, rng)
    _add_bn(layers, params, roles, "bn1", widths[0])
    layers.append(LayerSpec("relu"))
    _add_conv(layers, params, roles, "conv2", widths[0], widths[1], 3, 2, 1, rng)
    _add_bn(layers, params, roles, "bn2", widths[1])
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("pool"))
    _add_linear(layers, params, roles, "head", widths[1], num_classes, rng)
    tag = f"cnn:{c}x{h}x{w}:{widths[0]}-{widths[1]}:{num_classes}"
    return ModelState(tag, layers, params, roles, num_classes, tuple(input_shape), **kw)


def build_from_tag(tag: str, seed: int = 0) -> ModelState:
    """Rebuild an architecture from its tag (weights freshly initialized)."""
    try:
        kind, *rest = tag.split(":")
        if kind == "mlp":
            d, hdim, k = (int(v) for v in rest)
            return build_mlp(d, k, hidden=hdim, seed=seed)
        if kind == "cnn":
            shape = tuple(int(v) for v in rest[0].split("x"))
            widths = tuple(int(v) for v in rest[1].split("-"))
            return build_cnn(shape, int(rest[2]), widths=widths, seed=seed)
    except (ValueError, IndexError):
        pass
    raise FormatError(f"unrecognized architecture tag {tag!r}")


def build_model(arch: str, input_shape, num_classes: int, seed: int = 0) -> ModelState:
    if arch == "mlp":
        return build_mlp(int(np.prod(input_shape)), num_classes, seed=seed)
    if arch == "cnn":
        return build_cnn(tuple(input_shape), num_classes, seed=seed)
    raise ContractError(f"unknown architecture {arch!r}; choose 'mlp' or 'cnn'")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def forward(model: ModelState, batch, mode: str = TRAIN_STATS, capture: bool = False,
            update_stats: bool = True, bn_momentum: Optional[float] = None, fixed_stats: Optional[list] = None):
    """Run the classifier.

    Args:
        model: the network.
        batch: inputs shaped ``(N,) + model.input_shape`` (array or Tensor).
        mode: ``"train-stats"`` normalizes with the batch's own moments,
            ``"eval-stats"`` with the stored running statistics.
        capture: also return the pre-normalization feature maps.
        update_stats: in train-stats mode, blend batch moments into the
            running statistics with ``bn_momentum`` (model default if None).
        fixed_stats: per-BN ``(mean, var)`` pairs that replace both the
            batch and the running moments; nothing is updated.

    Returns:
        ``(logits, trace)``; ``trace`` is None unless ``capture``.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=DTYPE))
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input shape {model.input_shape}")
    if mode not in (TRAIN_STATS, EVAL_STATS):
        raise ContractError(f"unknown forward mode {mode!r}")
    if fixed_stats is not None and len(fixed_stats) != model.n_bn:
        raise ContractError(f"{len(fixed_stats)} fixed moment pairs for {model.n_bn} normalization layers")
    if mode == TRAIN_STATS and fixed_stats is None and x.shape[0] < 2:
        raise DegenerateBatchError("train-stats forward needs at least 2 samples")
    momentum = model.bn_momentum if bn_momentum is None else bn_momentum
    p = model.params
    trace = FeatureTrace() if capture else None
    bn_i = 0

    for layer in model.layers:
        if layer.kind == "linear":
            if x.ndim > 2:
                x = flatten(x)
            x = linear(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"])
        elif layer.kind == "conv2d":
            x = conv2d(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], layer.stride, layer.padding)
        elif layer.kind == "batch-norm":
            if trace is not None:
                trace.layers.append(x if x.ndim == 4 else x.reshape(x.shape + (1, 1)))
            gamma, beta = p[f"{layer.name}.weight"], p[f"{layer.name}.bias"]
            rm, rv = p[f"{layer.name}.running_mean"], p[f"{layer.name}.running_var"]
            if fixed_stats is not None:
                mu, var = fixed_stats[bn_i]
                x = batch_norm_eval(x, gamma, beta, mu, var, model.bn_eps)
            elif mode == TRAIN_STATS:
                x, mu, var = batch_norm_train(x, gamma, beta, model.bn_eps)
                if update_stats:
                    rm.data = (1.0 - momentum) * rm.data + momentum * mu
                    rv.data = (1.0 - momentum) * rv.data + momentum * var
            else:
                mu, var = rm.data, rv.data
                x = batch_norm_eval(x, gamma, beta, mu, var, model.bn_eps)
            if trace is not None:
                trace.stats.append((np.array(mu, copy=True), np.array(var, copy=True)))
            bn_i += 1
        elif layer.kind == "relu":
            x = relu(x)
        elif layer.kind == "pool":
            x = global_avg_pool(x)
        elif layer.kind == "flatten":
            x = flatten(x)
        else:
            raise ContractError(f"unknown layer kind {layer.kind}")
    return x, trace


def predict_proba(model: ModelState, batch, mode: str = EVAL_STATS, update_stats: bool = False) -> np.ndarray:
    from .tensor import no_grad, softmax

    with no_grad():
        logits, _ = forward(model, batch, mode=mode, update_stats=update_stats)
        return softmax(logits).data


# ---------------------------------------------------------------------------
# EMA shadow and stochastic restoration
# ---------------------------------------------------------------------------

class EmaModel:
    """Exponential-moving-average shadow of a model."""

    def __init__(self, source: ModelState, momentum: float = 0.999):
        if not 0.0 <= momentum <= 1.0:
            raise ContractError(f"EMA momentum must lie in [0, 1], got {momentum}")
        self.shadow = source.copy()
        self.momentum = float(momentum)

    def __repr__(self):
        return f"EmaModel(arch={self.shadow.arch!r}, momentum={self.momentum})"


def ema_update(ema: EmaModel, online: ModelState) -> None:
    """shadow <- m * shadow + (1 - m) * online, for every tensor."""
    if not ema.shadow.same_architecture(online):
        raise ContractError(f"EMA architecture {ema.shadow.arch} does not match {online.arch}")
    m = ema.momentum
    for name, t in ema.shadow.params.items():
        t.data = m * t.data + (1.0 - m) * online.params[name].data


def stochastic_restore(model: ModelState, source: ModelState, p: float, rng) -> int:
    """Reset each updatable scalar to its source value with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"restore probability must lie in [0, 1], got {p}")
    restored = 0
    for name in model.names(ROLE_UPDATABLE):
        t = model.params[name]
        mask = rng.random(t.shape) < p
        if mask.any():
            t.data = np.where(mask, source.params[name].data, t.data)
            restored += int(mask.sum())
    return restored


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"RTTDPCKP"
CKPT_VERSION = 1


def save_checkpoint(model: ModelState, path) -> None:
    """Versioned little-endian binary: header, then (name, role, shape, float64 values) records."""
    buf = io.BytesIO()
    tag = model.arch.encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HH", CKPT_VERSION, len(tag)))
    buf.write(tag)
    buf.write(struct.pack("<ddI", model.bn_momentum, model.bn_eps, len(model.params)))
    for name, t in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(model.roles[name].encode())
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_arch: Optional[str] = None) -> ModelState:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, tag_len = r.unpack("<HH")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tag = r.take(tag_len).decode()
    if expected_arch is not None and tag != expected_arch:
        raise FormatError(f"checkpoint architecture {tag!r} does not match expected {expected_arch!r}")
    model = build_from_tag(tag)
    momentum, eps, count = r.unpack("<ddI")
    model.bn_momentum, model.bn_eps = momentum, eps
    if count != len(model.params):
        raise FormatError(f"checkpoint holds {count} tensors, architecture needs {len(model.params)}")
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        role = r.take(1).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        if name not in model.params or model.params[name].shape != tuple(shape):
            raise FormatError(f"tensor {name} {shape} does not fit architecture {tag}")
        if role not in ROLES:
            raise FormatError(f"bad role {role!r} for {name}")
        values = np.frombuffer(r.take(8 * int(np.prod(shape))), dtype="<f8").astype(DTYPE).reshape(shape)
        model.params[name].data = values
        model.roles[name] = role
    if r.pos != len(r.raw):
        raise FormatError("trailing bytes after checkpoint payload")
    model.check_partition()
    return model

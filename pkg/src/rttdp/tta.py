"""Test-time adaptation victims and the composable defense stack.

Each call to :func:`adapt_step` (or :meth:`Victim.step`) serves one query:
it produces predictions from the current parameters first and only then
takes a single gradient step, so predictions on a batch are never
influenced by that same batch's update.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .nn import (
    EVAL_STATS,
    ROLE_UPDATABLE,
    TRAIN_STATS,
    EmaModel,
    ModelState,
    ema_update,
    forward,
    stochastic_restore,
)
from .tensor import (
    PROB_FLOOR,
    Tensor,
    grad,
    log_softmax,
    mean,
    mul,
    no_grad,
    power,
    soft_cross_entropy,
    softmax,
    softmax_entropy,
    sum_,
)

METHODS = ("source", "tent-lite", "rpl-lite", "eata-lite", "cotta-lite")


@dataclass
class TtaConfig:
    method: str = "tent-lite"
    entropy_threshold: bool = False
    data_augmentation: bool = False
    ema_update: bool = False
    stochastic_restore: bool = False
    lr: float = 0.01
    threshold_coef: float = 0.05
    ema_momentum: float = 0.999
    restore_prob: float = 0.01
    gce_q: float = 0.8
    n_aug: int = 1
    aug_noise: float = 0.05
    aug_flip: bool = True
    diversity_margin: float = 0.4
    diversity_momentum: float = 0.9
    update_scope: str = "bn-affine"
    log_base: float = math.e
    name: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown TTA method {self.method!r}; choose from {METHODS}")
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 < self.threshold_coef < 1.0:
            raise ContractError(f"threshold coefficient must lie in (0, 1), got {self.threshold_coef}")
        if not 0.0 <= self.restore_prob <= 1.0:
            raise ContractError(f"restore probability must lie in [0, 1], got {self.restore_prob}")
        if not 0.0 < self.gce_q <= 1.0:
            raise ContractError(f"GCE exponent must lie in (0, 1], got {self.gce_q}")
        if self.n_aug < 1:
            raise ContractError("augmentation count must be at least 1")
        if self.update_scope not in ("bn-affine", "all"):
            raise ContractError(f"unknown update scope {self.update_scope!r}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        flags = [f for f, on in (("thresh", self.entropy_threshold), ("aug", self.data_augmentation),
                                 ("ema", self.ema_update), ("restore", self.stochastic_restore)) if on]
        return "+".join([self.method] + flags)

    # method-implied defenses
    @property
    def uses_threshold(self) -> bool:
        return self.entropy_threshold or self.method == "eata-lite"

    @property
    def uses_augmentation(self) -> bool:
        return self.data_augmentation or self.method == "cotta-lite"

    @property
    def uses_ema(self) -> bool:
        return self.ema_update or self.method == "cotta-lite"

    @property
    def uses_restore(self) -> bool:
        return self.stochastic_restore or self.method == "cotta-lite"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptationStep:
    """Telemetry for one served batch."""

    pre_error: Optional[float]
    mask: np.ndarray
    weights: np.ndarray
    loss: float
    update_norm: float
    posteriors: np.ndarray = field(repr=False, default=None)
    predictions: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# losses and filters
# ---------------------------------------------------------------------------

def row_entropy(posteriors: np.ndarray) -> np.ndarray:
    p = np.asarray(posteriors)
    return -(p * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=-1)


def entropy_filter(posteriors, num_classes: int, coefficient: float = 0.05, log_base: float = math.e) -> np.ndarray:
    """Keep rows whose entropy is strictly below ``coefficient * log(K)``."""
    scale = math.log(log_base)
    h = row_entropy(posteriors) / scale
    return h < coefficient * math.log(num_classes) / scale


def gce_loss(posteriors: Tensor, pseudo_labels, q: float = 0.8, reduction: str = "mean") -> Tensor:
    """Generalized cross-entropy ``(1 - p_y^q) / q`` on pseudo-labels."""
    if not 0.0 < q <= 1.0:
        raise ContractError(f"GCE exponent must lie in (0, 1], got {q}")
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    picked = posteriors[np.arange(labels.size), labels]
    per = (1.0 - power(picked, q)) * (1.0 / q)
    return mean(per) if reduction == "mean" else per


def augment(batch: np.ndarray, rng, noise: float = 0.05, flip: bool = True) -> np.ndarray:
    """Additive Gaussian noise plus random horizontal flips for image batches."""
    out = np.array(batch, dtype=float, copy=True)
    if noise > 0:
        out = out + noise * rng.standard_normal(out.shape)
    if flip and out.ndim == 4:
        flips = rng.random(out.shape[0]) < 0.5
        out[flips] = out[flips][..., ::-1]
    return out


def augmentation_consistency(model: ModelState, batch, n_aug: int, rng, target: Optional[np.ndarray] = None,
                             noise: float = 0.05, flip: bool = True, weights: Optional[np.ndarray] = None,
                             reduction: str = "mean") -> Tensor:
    """Mean cross-entropy of augmented-view posteriors against a fixed target.

    The target defaults to the model's own posterior on the unaugmented
    batch. Views are forwarded with batch statistics but do not refresh the
    running statistics.
    """
    if n_aug < 1:
        raise ContractError("augmentation count must be at least 1")
    batch = np.asarray(batch, dtype=float)
    if target is None:
        with no_grad():
            logits, _ = forward(model, batch, TRAIN_STATS, update_stats=False)
            target = softmax(logits).data
    per = None
    for _ in range(n_aug):
        view = augment(batch, rng, noise=noise, flip=flip)
        logits, _ = forward(model, view, TRAIN_STATS, update_stats=False)
        ce = soft_cross_entropy(logits, target)
        per = ce if per is None else per + ce
    per = per * (1.0 / n_aug)
    if reduction == "none":
        return per
    if weights is None:
        return mean(per)
    w = np.asarray(weights, dtype=float)
    return sum_(mul(per, w)) * (1.0 / max(float((w > 0).sum()), 1.0))


# ---------------------------------------------------------------------------
# one adaptation step
# ---------------------------------------------------------------------------

@dataclass
class VictimState:
    """Method-specific running state (EATA's mean posterior)."""

    mean_posterior: Optional[np.ndarray] = None


def _diversity_keep(probs: np.ndarray, mask: np.ndarray, state: VictimState, cfg: TtaConfig) -> np.ndarray:
    keep = mask.copy()
    if state.mean_posterior is not None and keep.any():
        m = state.mean_posterior
        cos = probs @ m / (np.linalg.norm(probs, axis=1) * np.linalg.norm(m) + 1e-12)
        keep &= cos < cfg.diversity_margin
    if keep.any():
        batch_mean = probs[keep].mean(axis=0)
        if state.mean_posterior is None:
            state.mean_posterior = batch_mean
        else:
            mom = cfg.diversity_momentum
            state.mean_posterior = mom * state.mean_posterior + (1.0 - mom) * batch_mean
    return keep


def adapt_step(model: ModelState, batch, cfg: TtaConfig, ema: Optional[EmaModel], source: ModelState, rng,
               labels=None, state: Optional[VictimState] = None):
    """Serve one batch: predict with current parameters, then adapt once.

    Defenses apply in the order entropy filtering, augmentation
    consistency, gradient step, EMA update, stochastic restore.

    Returns:
        ``(predictions, AdaptationStep)``.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.shape[0] == 0:
        raise ContractError("cannot adapt on an empty batch")
    if cfg.uses_ema and ema is None:
        raise ContractError(f"{cfg.label} needs an EMA companion model")
    state = state if state is not None else VictimState()
    k = model.num_classes
    n = batch.shape[0]

    if cfg.method == "source":
        with no_grad():
            logits, _ = forward(model, batch, EVAL_STATS)
            probs = softmax(logits).data
        preds = probs.argmax(axis=1)
        return preds, AdaptationStep(_error(preds, labels), np.zeros(n, bool), np.zeros(n), 0.0, 0.0, probs, preds)

    logits, _ = forward(model, batch, TRAIN_STATS)
    student = softmax(logits)
    if cfg.uses_ema:
        with no_grad():
            t_logits, _ = forward(ema.shadow, batch, TRAIN_STATS)
            teacher = softmax(t_logits).data
        served = teacher
    else:
        teacher = None
        served = student.data
    preds = served.argmax(axis=1)

    # per-sample self-training loss
    if cfg.method == "rpl-lite":
        pseudo = (teacher if teacher is not None else student.data).argmax(axis=1)
        per = gce_loss(student, pseudo, cfg.gce_q, reduction="none")
    elif teacher is not None:
        per = soft_cross_entropy(logits, teacher)
    else:
        per = softmax_entropy(logits)

    # entropy filtering (and EATA's weighting)
    probs = student.data
    mask = entropy_filter(probs, k, cfg.threshold_coef, cfg.log_base) if cfg.uses_threshold else np.ones(n, bool)
    weights = mask.astype(float)
    if cfg.method == "eata-lite":
        mask = _diversity_keep(probs, mask, state, cfg)
        e0 = cfg.threshold_coef * math.log(k)
        weights = np.where(mask, np.exp(e0 - row_entropy(probs)), 0.0)

    selected = int(mask.sum())
    loss = None
    if selected:
        loss = sum_(mul(per, weights)) * (1.0 / selected)
        if cfg.uses_augmentation and n >= 2:
            target = teacher if teacher is not None else probs
            loss = loss + augmentation_consistency(model, batch, cfg.n_aug, rng, target=target,
                                                   noise=cfg.aug_noise, flip=cfg.aug_flip, weights=mask)

    update_norm = 0.0
    if loss is not None:
        names = model.names(ROLE_UPDATABLE)
        grads = grad(loss, [model.params[nm] for nm in names])
        sq = 0.0
        for nm, g in zip(names, grads):
            model.params[nm].data = model.params[nm].data - cfg.lr * g
            sq += float((g * g).sum())
        update_norm = cfg.lr * math.sqrt(sq)

    if cfg.uses_ema:
        ema_update(ema, model)
    if cfg.uses_restore:
        stochastic_restore(model, source, cfg.restore_prob, rng)

    step = AdaptationStep(
        pre_error=_error(preds, labels),
        mask=mask,
        weights=weights,
        loss=float(loss.data) if loss is not None else 0.0,
        update_norm=update_norm,
        posteriors=served,
        predictions=preds,
    )
    return preds, step


def _error(preds: np.ndarray, labels) -> Optional[float]:
    if labels is None:
        return None
    return float(np.mean(preds != np.asarray(labels)))


class Victim:
    """An online TTA model together with its companions and running state."""

    def __init__(self, source: ModelState, cfg: TtaConfig, seed: int = 0):
        self.cfg = cfg
        self.source = source.copy()
        self.model = source.copy().set_update_scope(cfg.update_scope)
        self.model.bn_momentum = 1.0
        self.ema = EmaModel(self.model, cfg.ema_momentum) if cfg.uses_ema else None
        self.state = VictimState()
        self.rng = np.random.default_rng(seed)
        self.history: list = []

    def step(self, batch, labels=None):
        preds, info = adapt_step(self.model, batch, self.cfg, self.ema, self.source, self.rng, labels, self.state)
        self.history.append(info)
        return preds, info

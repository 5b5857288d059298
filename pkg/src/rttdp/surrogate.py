"""Adversary-side replica of the online model, distilled from query feedback."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .nn import TRAIN_STATS, ModelState, forward
from .tensor import PROB_FLOOR, Tensor, as_tensor, grad, log, maximum, mean, mul, softmax, sub, sum_


def symmetric_kld_loss(p, q) -> Tensor:
    """Mean over rows of 0.5 * [KL(p||q) + KL(q||p)], probabilities floored at 1e-12."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ContractError(f"posterior tables differ: {p.shape} vs {q.shape}")
    log_ratio = sub(log(maximum(p, PROB_FLOOR)), log(maximum(q, PROB_FLOOR)))
    # KL(p||q) + KL(q||p) = sum (p - q) (log p - log q)
    per_row = sum_(mul(sub(p, q), log_ratio), axis=-1)
    return mean(per_row) * 0.5


@dataclass
class SurrogateState:
    model: ModelState
    lr: float = 0.1
    iterations: int = 10
    refresh_bn_stats: bool = True
    feedback_log: list = field(default_factory=list)

    @classmethod
    def from_source(cls, source: ModelState, lr: float = 0.1, iterations: int = 10, **kw) -> "SurrogateState":
        model = source.copy()
        model.bn_momentum = 1.0
        return cls(model=model, lr=lr, iterations=iterations, **kw)


def distill(surrogate: SurrogateState, adversary_batch, online_posteriors, tag=None) -> list:
    """Pull the surrogate toward the online model's answers on one adversary query.

    Runs ``surrogate.iterations`` plain gradient steps on every learnable
    surrogate tensor. Online posteriors are constants.

    Returns:
        The divergence before each step followed by the final divergence
        (``iterations + 1`` values).
    """
    batch = np.asarray(adversary_batch, dtype=float)
    target = np.asarray(online_posteriors, dtype=float)
    if batch.shape[0] == 0:
        raise ContractError("distillation needs a nonempty adversary batch")
    if target.shape != (batch.shape[0], surrogate.model.num_classes):
        raise ContractError(f"online posteriors {target.shape} do not match batch of {batch.shape[0]}")
    surrogate.feedback_log.append(tag)
    model = surrogate.model
    names = model.trainable_names()
    tensors = [model.params[n] for n in names]
    trace = []
    for _ in range(surrogate.iterations):
        logits, _ = forward(model, batch, TRAIN_STATS, update_stats=surrogate.refresh_bn_stats)
        loss = symmetric_kld_loss(target, softmax(logits))
        trace.append(float(loss.data))
        for t, g in zip(tensors, grad(loss, tensors)):
            t.data = t.data - surrogate.lr * g
    if surrogate.iterations:
        logits, _ = forward(model, batch, TRAIN_STATS, update_stats=False)
        trace.append(float(symmetric_kld_loss(target, softmax(logits)).data))
    return trace

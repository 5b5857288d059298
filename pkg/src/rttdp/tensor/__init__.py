"""Reverse-mode autodiff tensors and the kernels built on them."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ContractError
from .autograd import (
    DTYPE,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp,
    concat,
    div,
    exp,
    grad,
    is_recording,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    slice_,
    softmax,
    sqrt,
    strict_numerics,
    sub,
    sum_,
    swap_last,
    transpose,
)
from .linalg import JITTER, cho_solve, cholesky, gaussian_kld, logdet_from_cholesky, solve_lower, solve_upper
from .nnops import batch_norm_eval, batch_norm_train, conv2d, flatten, global_avg_pool, linear

PROB_FLOOR = 1e-12

_REGISTRY = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "mean": mean,
    "sum": sum_,
    "reshape": reshape,
    "slice": slice_,
    "clamp": clamp,
    "batch-norm-train": lambda *a, **k: batch_norm_train(*a, **k)[0],
    "batch-norm-eval": batch_norm_eval,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply a registered operation by name.

    Extra keyword arguments are forwarded (``axis`` for reductions, ``shape``
    for reshape, ``index`` for slice, ``lo``/``hi`` for clamp, ``stride`` and
    ``padding`` for conv2d, ``eps`` for the batch norms).
    """
    try:
        fn = _REGISTRY[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}; known: {sorted(_REGISTRY)}") from None
    if kind == "reshape":
        return fn(inputs[0], kwargs["shape"])
    if kind == "slice":
        return fn(inputs[0], kwargs["index"])
    return fn(*inputs, **kwargs)


def op_kinds() -> list:
    return sorted(_REGISTRY)


def entropy(probs: Tensor, axis: int = -1) -> Tensor:
    """Shannon entropy (natural log) of probability rows, floored before the log."""
    probs = as_tensor(probs)
    return neg(sum_(mul(probs, log(maximum(probs, PROB_FLOOR))), axis=axis))


def softmax_entropy(logits: Tensor) -> Tensor:
    """Per-row entropy of ``softmax(logits)`` computed from log-probabilities."""
    logp = log_softmax(logits)
    return neg(sum_(mul(exp(logp), logp), axis=-1))


def soft_cross_entropy(logits: Tensor, target) -> Tensor:
    """Per-row ``-sum_k target_k log softmax(logits)_k``; ``target`` is constant or a Tensor."""
    return neg(sum_(mul(target, log_softmax(logits)), axis=-1))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=DTYPE)
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Standard hard-label cross-entropy."""
    logits = as_tensor(logits)
    per = soft_cross_entropy(logits, one_hot(labels, logits.shape[-1]))
    return mean(per) if reduction == "mean" else per


__all__ = [
    "DTYPE", "JITTER", "PROB_FLOOR", "Tensor", "add", "as_tensor", "backward", "batch_norm_eval",
    "batch_norm_train", "cho_solve", "cholesky", "clamp", "concat", "conv2d", "cross_entropy", "div",
    "entropy", "exp", "flatten", "forward_op", "gaussian_kld", "global_avg_pool", "grad",
    "is_recording", "linear", "log", "log_softmax", "logdet_from_cholesky", "matmul", "maximum",
    "mean", "mul", "neg", "no_grad", "one_hot", "op_kinds", "power", "relu", "reshape", "slice_",
    "soft_cross_entropy", "softmax", "softmax_entropy", "solve_lower", "solve_upper", "sqrt",
    "strict_numerics", "sub", "sum_", "swap_last", "transpose",
]

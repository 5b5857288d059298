"""Attack objectives, all expressed as losses to be minimized by PGD."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..assignment import ConfusionState, blended_confusion, solve_mapping
from ..errors import ContractError
from ..nn import ModelState
from ..tensor import Tensor, as_tensor, cross_entropy, mean, neg, no_grad, soft_cross_entropy, softmax, softmax_entropy

KINDS = ("NHE", "BLE", "MaxCE", "TePA-maxent", "Unlearnable", "AdvPoison", "DIA-adapted")
LEGACY_KINDS = ("MaxCE", "TePA-maxent", "Unlearnable", "AdvPoison", "DIA-adapted")
_ALIASES = {
    "nhe": "NHE", "ble": "BLE", "maxce": "MaxCE", "tepa": "TePA-maxent", "tepa-maxent": "TePA-maxent",
    "unlearnable": "Unlearnable", "advpoison": "AdvPoison", "adv-poison": "AdvPoison",
    "dia": "DIA-adapted", "dia-adapted": "DIA-adapted",
}


def canonical_kind(kind: str) -> str:
    if kind in KINDS:
        return kind
    try:
        return _ALIASES[kind.lower()]
    except KeyError:
        raise ContractError(f"unknown attack objective {kind!r}; choose from {KINDS}") from None


def notch_target(labels, num_classes: int) -> np.ndarray:
    """Uniform over the wrong classes, zero on the true one."""
    if num_classes < 2:
        raise ContractError("the notch target needs at least two classes")
    labels = np.asarray(labels, dtype=np.int64)
    q = np.full((labels.size, num_classes), 1.0 / (num_classes - 1))
    q[np.arange(labels.size), labels] = 0.0
    return q


def nhe_loss(logits, labels, num_classes: Optional[int] = None) -> Tensor:
    """Cross-entropy of the posterior against the notch target, batch mean."""
    logits = as_tensor(logits)
    k = num_classes or logits.shape[-1]
    return mean(soft_cross_entropy(logits, notch_target(labels, k)))


def ble_loss(logits, labels, confusion: ConfusionState) -> Tensor:
    """Cross-entropy toward ``confusion.mapping[y]`` (mapping must be current)."""
    if confusion.mapping is None:
        raise ContractError("confusion state has no label mapping; call refresh() first")
    labels = np.asarray(labels, dtype=np.int64)
    return cross_entropy(logits, confusion.mapping[labels])


def legacy_objectives(kind: str, logits, labels, num_classes: int, reference_model: Optional[ModelState] = None,
                      split: Optional[np.ndarray] = None) -> Tensor:
    """Benchmark objectives, each negated where the original maximizes.

    ``Unlearnable`` needs ``reference_model`` (the randomly initialized
    network whose logits were passed in); ``DIA-adapted`` needs ``split``, a
    boolean mask of the held clean half on which the loss is evaluated.
    """
    kind = canonical_kind(kind)
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if kind == "MaxCE":
        return neg(cross_entropy(logits, labels))
    if kind == "TePA-maxent":
        return neg(mean(softmax_entropy(logits)))
    if kind == "AdvPoison":
        return cross_entropy(logits, (labels + 1) % num_classes)
    if kind == "Unlearnable":
        if reference_model is None:
            raise ContractError("Unlearnable needs the randomly initialized reference model")
        return cross_entropy(logits, labels)
    if kind == "DIA-adapted":
        if split is None:
            raise ContractError("DIA-adapted needs the held-half split mask")
        idx = np.flatnonzero(np.asarray(split, dtype=bool))
        if idx.size == 0:
            raise ContractError("DIA-adapted held half is empty")
        return neg(cross_entropy(logits[idx], labels[idx]))
    raise ContractError(f"{kind} is not a legacy objective")


def dia_split(n: int) -> tuple:
    """Index-parity split: even positions are perturbed, odd positions are held clean."""
    poisoned = np.arange(n) % 2 == 0
    return poisoned, ~poisoned


@dataclass
class AttackObjective:
    """Attack kind plus its options.

    ``feature_reg`` and ``use_distillation`` default to on for NHE/BLE and
    off for the benchmark objectives, which attack the initial surrogate.
    """

    kind: str
    beta: float = 0.9
    solver: str = "greedy"
    feature_reg: Optional[bool] = None
    use_distillation: Optional[bool] = None
    seed: int = 0
    name: str = ""
    confusion: Optional[ConfusionState] = field(default=None, repr=False)
    _pending: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"BLE momentum must lie in [0, 1], got {self.beta}")
        if self.solver not in ("greedy", "exact"):
            raise ContractError(f"unknown solver {self.solver!r}")
        proposed = self.kind in ("NHE", "BLE")
        if self.feature_reg is None:
            self.feature_reg = proposed
        if self.use_distillation is None:
            self.use_distillation = proposed

    @property
    def label(self) -> str:
        return self.name or self.kind

    def reset(self, num_classes: int) -> None:
        if self.kind == "BLE":
            self.confusion = ConfusionState.uniform(num_classes, beta=self.beta, solver=self.solver)
        self._pending = None

    def loss(self, logits: Tensor, labels, split: Optional[np.ndarray] = None,
             reference_model: Optional[ModelState] = None) -> Tensor:
        k = logits.shape[-1]
        if self.kind == "NHE":
            return nhe_loss(logits, labels, k)
        if self.kind == "BLE":
            if self.confusion is None:
                self.reset(k)
            with no_grad():
                probs = softmax(logits).data
            # the candidate confusion is committed once per synthesis round
            self._pending = blended_confusion(self.confusion.C, probs, labels, self.confusion.beta)
            self.confusion.mapping = solve_mapping(self._pending, self.confusion.solver)
            return ble_loss(logits, labels, self.confusion)
        return legacy_objectives(self.kind, logits, labels, k, reference_model=reference_model, split=split)

    def commit(self) -> None:
        """Adopt the confusion estimate from the last loss evaluation."""
        if self.kind == "BLE" and self._pending is not None:
            self.confusion.C = self._pending
            self._pending = None

"""Sign-gradient PGD on the poison with Lagrangian ascent on the feature constraint."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ContractError, NumericsError
from ..nn import TRAIN_STATS, ModelState, forward
from ..tensor import Tensor, add, grad, mul, no_grad, softmax
from .objectives import AttackObjective, dia_split
from .regularizer import feature_consistency

BUDGET_SLACK = 1e-9


@dataclass
class PoisonBatch:
    clean: np.ndarray
    labels: np.ndarray
    budget: float = 0.3
    step_size: float = 0.01
    steps: int = 40
    eps: Optional[np.ndarray] = None
    poisoned: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    history: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.budget < 0 or self.step_size <= 0 or self.steps < 0:
            raise ContractError("budget must be >= 0, step size > 0 and steps >= 0")
        if self.eps is None:
            self.eps = np.zeros_like(self.clean)
        if self.poisoned is None:
            self.poisoned = np.clip(self.clean + self.eps, 0.0, 1.0)

    def check(self) -> None:
        """Raise if the budget or box constraint is broken."""
        check_budget(self.clean, self.poisoned, self.budget)


def check_budget(clean, poisoned, budget: float) -> None:
    delta = np.abs(np.asarray(poisoned) - np.asarray(clean))
    if delta.size and delta.max() > budget + BUDGET_SLACK:
        raise ContractError(f"perturbation {delta.max():.6g} exceeds budget {budget}")
    if np.any(poisoned < 0.0) or np.any(poisoned > 1.0):
        raise ContractError("poisoned values leave the [0, 1] box")


@dataclass
class LagrangeState:
    lam: np.ndarray
    rate: float = 0.001
    pinned: bool = False
    history: list = field(default_factory=list, repr=False)

    @classmethod
    def zeros(cls, layers: int, rate: float = 0.001, pinned: bool = False) -> "LagrangeState":
        return cls(np.zeros(layers), rate=rate, pinned=pinned)

    def ascend(self, reg_values: np.ndarray) -> None:
        """lam_l += rate * dL/dlam_l, where L is linear in lam_l with slope reg_l / n_layers."""
        if self.pinned:
            self.history.append(self.lam.copy())
            return
        slope = np.maximum(np.asarray(reg_values, dtype=float), 0.0) / len(self.lam)
        self.lam = self.lam + self.rate * slope
        if not np.all(np.isfinite(self.lam)):
            raise NumericsError("Lagrange multipliers became non-finite")
        self.history.append(self.lam.copy())


def synthesize(batch: PoisonBatch, objective: AttackObjective, reference: ModelState,
               lagrange: Optional[LagrangeState] = None, rng=None, reg_reduction: str = "sum",
               reverse_kld: bool = False, split: Optional[np.ndarray] = None,
               random_model: Optional[ModelState] = None, clean_norm: str = "poison") -> PoisonBatch:
    """Craft poisons for ``batch`` against a frozen reference model.

    Each iteration forwards the poisoned batch with its own batch statistics
    (running statistics untouched), evaluates the attack loss plus the
    lambda-weighted feature divergences, takes a signed step on the
    perturbation, projects onto the L-inf ball and [0, 1] box, then raises
    each multiplier by ``rate * reg_l / n_layers``.

    Args:
        batch: clean inputs, labels and PGD settings; ``eps`` is reset to 0.
        objective: attack objective; BLE commits its confusion at the end.
        reference: the model attacked (surrogate, or the source for
            benchmark objectives). It is never modified.
        lagrange: multipliers, one per normalization layer; created (zeros)
            when omitted. Ignored unless ``objective.feature_reg``.
        reg_reduction: ``"mean"`` averages per-sample divergences over the
            batch, ``"sum"`` adds them (multipliers then see N times more).
        clean_norm: ``"poison"`` re-extracts the clean features every
            iteration, normalized with the poisoned batch's current moments;
            ``"own"`` extracts them once with the clean batch's moments.
        split: DIA-adapted perturbable mask (defaults to index parity).
        random_model: randomly initialized model for ``Unlearnable``.

    Returns:
        ``batch`` with ``eps``, ``poisoned`` and ``history`` filled in.
    """
    x = batch.clean
    n = x.shape[0]
    labels = batch.labels
    use_reg = bool(objective.feature_reg)
    n_layers = reference.n_bn
    if lagrange is None:
        lagrange = LagrangeState.zeros(n_layers)
    if use_reg and len(lagrange.lam) != n_layers:
        raise ContractError(f"{len(lagrange.lam)} multipliers for {n_layers} feature layers")

    attacked = reference
    perturb_mask = np.ones(n, bool)
    held = None
    if objective.kind == "Unlearnable":
        if random_model is None:
            raise ContractError("Unlearnable needs a randomly initialized reference model")
        attacked = random_model
    elif objective.kind == "DIA-adapted":
        perturb_mask, held = dia_split(n) if split is None else (np.asarray(split, bool), ~np.asarray(split, bool))
    mask_shape = (n,) + (1,) * (x.ndim - 1)
    pmask = perturb_mask.reshape(mask_shape).astype(float)

    if reg_reduction not in ("mean", "sum"):
        raise ContractError(f"unknown regularizer reduction {reg_reduction!r}")
    if clean_norm not in ("poison", "own"):
        raise ContractError(f"unknown clean normalization {clean_norm!r}")
    clean_trace = None
    if use_reg and clean_norm == "own":
        with no_grad():
            _, clean_trace = forward(attacked, x, TRAIN_STATS, capture=True, update_stats=False)

    eps = np.zeros_like(x)
    hist = {"loss": [], "attack_loss": [], "reg": [], "lambda": [], "eps_inf": [], "box_ok": []}
    scale = float(n) if reg_reduction == "sum" else 1.0

    for it in range(batch.steps):
        eps_t = Tensor(eps, requires_grad=True)
        x_adv = add(x, mul(eps_t, pmask))
        logits, trace = forward(attacked, x_adv, TRAIN_STATS, capture=use_reg, update_stats=False)
        attack = objective.loss(logits, labels, split=held, reference_model=random_model)
        total = attack
        reg_vals = np.zeros(n_layers)
        if use_reg:
            if clean_norm == "poison":
                with no_grad():
                    _, clean_trace = forward(attacked, x, TRAIN_STATS, capture=True, fixed_stats=trace.stats)
            regs = feature_consistency(trace, clean_trace, reverse=reverse_kld)
            reg_vals = np.array([float(r.data) for r in regs]) * scale
            for lam_l, r in zip(lagrange.lam, regs):
                if lam_l != 0.0:
                    total = add(total, r * (lam_l * scale / n_layers))
        value = float(total.data)
        if not np.isfinite(value):
            raise NumericsError(f"non-finite attack objective at PGD iteration {it}")
        (g,) = grad(total, [eps_t])
        eps = eps - batch.step_size * np.sign(g) * pmask
        eps = np.clip(eps, -batch.budget, batch.budget)
        eps = np.clip(x + eps, 0.0, 1.0) - x
        if use_reg:
            lagrange.ascend(reg_vals)
        hist["loss"].append(value)
        hist["attack_loss"].append(float(attack.data))
        hist["reg"].append(reg_vals)
        hist["lambda"].append(lagrange.lam.copy())
        hist["eps_inf"].append(float(np.abs(eps).max()) if eps.size else 0.0)
        poisoned_now = x + eps
        hist["box_ok"].append(bool(np.all(poisoned_now >= 0.0) and np.all(poisoned_now <= 1.0)))
        check_budget(x, poisoned_now, batch.budget)

    objective.commit()
    batch.eps = eps
    batch.poisoned = x + eps
    batch.history = hist
    batch.check()
    return batch


def poison_diagnostics(model: ModelState, clean, poisoned, clean_norm: str = "poison") -> dict:
    """How a finished poison looks to ``model``: posterior entropy and feature divergence from its cleans.

    ``layer_kld`` holds one Gaussian divergence per normalization layer, with
    the clean features normalized the same way the synthesis loop did.
    """
    clean = np.asarray(clean, dtype=float)
    poisoned = np.asarray(poisoned, dtype=float)
    with no_grad():  # read-only: the model's running statistics stay untouched
        logits, trace_p = forward(model, poisoned, TRAIN_STATS, capture=True, update_stats=False)
        if clean_norm == "poison":
            _, trace_c = forward(model, clean, TRAIN_STATS, capture=True, fixed_stats=trace_p.stats,
                                 update_stats=False)
        else:
            _, trace_c = forward(model, clean, TRAIN_STATS, capture=True, update_stats=False)
        probs = softmax(logits).data
        kld = np.array([float(r.data) for r in feature_consistency(trace_p, trace_c)])
    entropy = -np.sum(probs * np.log(np.clip(probs, 1e-300, None)), axis=1)
    eps = poisoned - clean
    return {
        "entropy": float(entropy.mean()),
        "layer_kld": kld,
        "mean_kld": float(kld.mean()) if kld.size else 0.0,
        "eps_inf": float(np.abs(eps).max()) if eps.size else 0.0,
        "box_ok": bool(np.all(poisoned >= 0.0) and np.all(poisoned <= 1.0)),
    }

"""Poison synthesis: attack objectives, feature-consistency regularizer, PGD loop."""
from .objectives import (
    KINDS,
    LEGACY_KINDS,
    AttackObjective,
    ble_loss,
    canonical_kind,
    dia_split,
    legacy_objectives,
    nhe_loss,
    notch_target,
)
from .regularizer import batch_gaussian, feature_consistency, layer_kld, spatial_gaussian
from .synthesis import LagrangeState, PoisonBatch, check_budget, poison_diagnostics, synthesize

__all__ = [
    "KINDS", "LEGACY_KINDS", "AttackObjective", "LagrangeState", "PoisonBatch", "batch_gaussian",
    "ble_loss", "canonical_kind", "check_budget", "dia_split", "feature_consistency", "layer_kld",
    "legacy_objectives", "nhe_loss", "notch_target", "poison_diagnostics", "spatial_gaussian", "synthesize",
]

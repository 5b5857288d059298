"""Per-layer Gaussian feature-consistency between poisoned and clean batches."""
from __future__ import annotations

from ..errors import ContractError
from ..nn import FeatureTrace
from ..tensor import Tensor, as_tensor, gaussian_kld, matmul, mean, sub, swap_last


def spatial_gaussian(z) -> tuple:
    """Per-sample mean (N, C) and biased spatial covariance (N, C, C) of an NCHW map."""
    z = as_tensor(z)
    n, c, h, w = z.shape
    flat = z.reshape(n, c, h * w)
    mu = mean(flat, axis=2)
    centered = sub(flat, mu.reshape(n, c, 1))
    cov = matmul(centered, swap_last(centered)) * (1.0 / (h * w))
    return mu, cov


def batch_gaussian(z) -> tuple:
    """Mean (C,) and biased covariance (C, C) across the batch of an (N, C, 1, 1) map."""
    z = as_tensor(z)
    n, c = z.shape[:2]
    flat = z.reshape(n, c)
    mu = mean(flat, axis=0)
    centered = sub(flat, mu.reshape(1, c))
    cov = matmul(swap_last(centered), centered) * (1.0 / n)
    return mu, cov


def layer_kld(z_clean, z_poison, reverse: bool = False, jitter: float = 1e-5) -> Tensor:
    """KL between clean and poisoned feature Gaussians for one layer.

    Spatial maps give one Gaussian per sample and the result is the mean of
    the per-sample divergences; 1x1 maps fall back to batch moments.
    """
    if z_clean.shape != z_poison.shape:
        raise ContractError(f"feature maps differ: {z_clean.shape} vs {z_poison.shape}")
    fit = batch_gaussian if z_clean.shape[2] * z_clean.shape[3] == 1 else spatial_gaussian
    mu_c, cov_c = fit(z_clean)
    mu_p, cov_p = fit(z_poison)
    if reverse:
        kl = gaussian_kld(mu_p, cov_p, mu_c, cov_c, jitter=jitter)
    else:
        kl = gaussian_kld(mu_c, cov_c, mu_p, cov_p, jitter=jitter)
    return mean(kl) if kl.ndim else kl


def feature_consistency(trace_poison: FeatureTrace, trace_clean: FeatureTrace, reverse: bool = False,
                        jitter: float = 1e-5) -> list:
    """One divergence per normalization layer (clean || poisoned unless ``reverse``)."""
    if len(trace_poison) != len(trace_clean):
        raise ContractError(f"traces have {len(trace_poison)} and {len(trace_clean)} layers")
    out = []
    for zp, zc in zip(trace_poison.layers, trace_clean.layers):
        if zp.shape != zc.shape:
            raise ContractError(f"layer misalignment: {zp.shape} vs {zc.shape}")
        out.append(layer_kld(zc.detach() if isinstance(zc, Tensor) else zc, zp, reverse=reverse, jitter=jitter))
    return out

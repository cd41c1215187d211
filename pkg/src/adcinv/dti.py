"""Scalar DTI maps, tortuosity and the Gadobutrol ADC estimate."""

from __future__ import annotations

import warnings

import numpy as np

WATER_SELF_DIFFUSION = 3.0e-3  # mm^2/s at 37 C
GD_DTPA_FREE_DIFFUSION = 3.8e-4  # mm^2/s, surrogate for Gadobutrol


class TortuosityWarning(UserWarning):
    """Tortuosity below one: the apparent coefficient exceeds the free one."""


def _eig(eigenvalues):
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.shape[-1] != 3:
        raise ValueError("expected three eigenvalues along the last axis")
    if np.any(lam < 0):
        raise ValueError("diffusion tensor eigenvalues must be non-negative")
    return lam


def mean_diffusivity(eigenvalues):
    out = _eig(eigenvalues).mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def fractional_anisotropy(eigenvalues):
    """FA in [0, 1]; raises for an all-zero tensor."""
    lam = _eig(eigenvalues)
    norm2 = np.sum(lam**2, axis=-1)
    if np.any(norm2 == 0):
        raise ValueError("fractional anisotropy undefined for an all-zero tensor")
    md = lam.mean(axis=-1, keepdims=True)
    fa = np.sqrt(1.5 * np.sum((lam - md) ** 2, axis=-1) / norm2)
    fa = np.minimum(fa, 1.0)
    return float(fa) if fa.ndim == 0 else fa


def tortuosity(D_free, D_adc):
    """sqrt(D_free / D_adc); values below 1 are returned with a TortuosityWarning."""
    D_free = np.asarray(D_free, dtype=float)
    D_adc = np.asarray(D_adc, dtype=float)
    if np.any(D_free <= 0) or np.any(D_adc <= 0):
        raise ValueError("diffusion coefficients must be positive")
    lam = np.sqrt(D_free / D_adc)
    if np.any(lam < 1):
        warnings.warn("tortuosity below 1", TortuosityWarning, stacklevel=2)
    return float(lam) if lam.ndim == 0 else lam


def gadobutrol_adc(tort, D_free=GD_DTPA_FREE_DIFFUSION):
    tort = np.asarray(tort, dtype=float)
    if np.any(tort <= 0):
        raise ValueError("tortuosity must be positive")
    out = D_free / tort**2
    return float(out) if out.ndim == 0 else out


def region_stats(values, mask) -> tuple[float, float]:
    """Median and median absolute deviation of `values` where `mask` is set."""
    sel = np.asarray(values, dtype=float)[np.asarray(mask, bool)]
    if sel.size == 0:
        raise ValueError("empty region")
    med = float(np.median(sel))
    return med, float(np.median(np.abs(sel - med)))


def region_summary(eigenvalues, mask, D_free_water=WATER_SELF_DIFFUSION, D_free_agent=GD_DTPA_FREE_DIFFUSION) -> dict:
    """Median MD/FA over a region, with tortuosity and agent ADC from the median MD."""
    lam = _eig(eigenvalues)
    md_med, md_mad = region_stats(mean_diffusivity(lam), mask)
    fa_med, fa_mad = region_stats(fractional_anisotropy(lam), mask)
    tort = tortuosity(D_free_water, md_med)
    return {
        "md_median": md_med,
        "md_mad": md_mad,
        "fa_median": fa_med,
        "fa_mad": fa_mad,
        "tortuosity": tort,
        "agent_adc": gadobutrol_adc(tort, D_free_agent),
    }

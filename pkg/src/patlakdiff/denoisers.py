"""Classical reference denoisers: Gaussian smoothing, patch-based nonlocal
means, and composite-ratio (HYPR-LR style) filtering of a dynamic series.

All filters preserve constants, map nonnegative inputs to nonnegative
outputs, and operate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .volume import DynamicSeries, Volume3D

FWHM_TO_SIGMA = 1.0 / 2.3548200450309493  # fwhm = sigma * 2 sqrt(2 ln 2)


@dataclass(frozen=True)
class NlmConfig:
    search_window: int = 7
    patch_size: int = 3
    h: float | None = None      # None: tie to an estimated noise sigma
    h_factor: float = 1.0

    def __post_init__(self):
        for name in ("search_window", "patch_size"):
            w = getattr(self, name)
            if w < 1 or w % 2 == 0:
                raise ConfigError(f"{name} must be odd and positive, got {w}")
        if self.h is not None and self.h <= 0:
            raise ConfigError("h must be positive")


@dataclass(frozen=True)
class FilterConfig:
    gaussian_fwhm_voxels: float = 3.0
    nlm: NlmConfig = NlmConfig()
    hypr_kernel_size: int = 3

    def __post_init__(self):
        if self.hypr_kernel_size < 1 or self.hypr_kernel_size % 2 == 0:
            raise ConfigError("hypr kernel size must be odd and positive")


def gaussian_filter_array(a: np.ndarray, fwhm_voxels: float) -> np.ndarray:
    """Separable Gaussian with sigma = fwhm/2.3548, truncated at 4 sigma.

    fwhm below 0.1 voxel degenerates to the identity.
    """
    if fwhm_voxels < 0:
        raise ValueError("fwhm must be nonnegative")
    a = np.asarray(a, dtype=np.float64)
    if fwhm_voxels < 0.1:
        return a.copy()
    sigma = fwhm_voxels * FWHM_TO_SIGMA
    return ndimage.gaussian_filter(a, sigma=sigma, mode="reflect",
                                   truncate=4.0)


def gaussian_filter_volume(vol: Volume3D, fwhm_voxels: float) -> Volume3D:
    return Volume3D(gaussian_filter_array(vol.data, fwhm_voxels),
                    vol.voxel_size_mm)


def estimate_noise_sigma(a: np.ndarray) -> float:
    """Noise scale from the median absolute deviation of the Laplacian.

    The MAD is taken over the active region (voxels above 2% of the peak
    magnitude); a mostly-empty field of view would otherwise pull the median
    into the signal-free background and bias the estimate low.  Falls back to
    the full volume when almost nothing is active.
    """
    a = np.asarray(a, dtype=np.float64)
    lap = ndimage.laplace(a, mode="reflect")
    # Threshold on a smoothed magnitude so the cut reflects local signal
    # presence, not the voxel's own noise (which would bias the MAD), and on
    # a percentile so single hot voxels cannot swing it.
    mag = gaussian_filter_array(np.abs(a), 2.0)
    active = mag > 0.1 * np.percentile(mag, 99)
    vals = lap[active] if active.mean() > 0.01 else lap
    if vals.size == 0:
        return 0.0
    mad = np.median(np.abs(vals - np.median(vals)))
    # robust std of the Laplacian response, whitened by its coefficient norm
    return 1.4826 * mad / np.sqrt(42.0)


def _box_sum(a: np.ndarray, size: int) -> np.ndarray:
    return ndimage.uniform_filter(a, size=size, mode="constant") * size ** 3


def nlm_filter_array(a: np.ndarray, cfg: NlmConfig = NlmConfig(),
                     guide: np.ndarray | None = None) -> np.ndarray:
    """Nonlocal means: weighted average over a search window with weights
    exp(-||P_i - P_j||^2 / h^2) on 3-d patches, mirror-padded boundaries.

    When ``guide`` is given, patch distances are computed on the guide image
    while values are averaged from ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    g = a if guide is None else np.asarray(guide, dtype=np.float64)
    if g.shape != a.shape:
        raise ValueError("guide shape must match the image")
    sr = cfg.search_window // 2
    pr = cfg.patch_size // 2
    h = cfg.h
    if h is None:
        sigma = estimate_noise_sigma(g)
        if sigma <= 0:
            h = 1.0  # noise-free input: weights saturate, plain patch match
        else:
            h = cfg.h_factor * sigma * cfg.patch_size ** 1.5
    inv_h2 = 1.0 / (h * h)

    gp = np.pad(g, sr + pr, mode="reflect")
    ap = np.pad(a, sr, mode="reflect")
    n = a.shape
    num = np.zeros_like(a)
    den = np.zeros_like(a)
    core = tuple(slice(sr, sr + n[i] + 2 * pr) for i in range(3))
    g_ref = gp[core]  # reference patches neighborhood, shape n + 2 pr
    for dx in range(-sr, sr + 1):
        for dy in range(-sr, sr + 1):
            for dz in range(-sr, sr + 1):
                sh = tuple(slice(sr + d, sr + d + n[i] + 2 * pr)
                           for i, d in enumerate((dx, dy, dz)))
                diff2 = (g_ref - gp[sh]) ** 2
                d2 = _box_sum(diff2, cfg.patch_size)[pr:pr + n[0],
                                                     pr:pr + n[1],
                                                     pr:pr + n[2]] \
                    if pr else diff2
                w = np.exp(-d2 * inv_h2)
                vs = tuple(slice(sr + d, sr + d + n[i])
                           for i, d in enumerate((dx, dy, dz)))
                num += w * ap[vs]
                den += w
    return num / den


def nlm_filter(vol: Volume3D, cfg: NlmConfig = NlmConfig(),
               guide: Volume3D | None = None) -> Volume3D:
    out = nlm_filter_array(vol.data, cfg,
                           None if guide is None else guide.data)
    return Volume3D(out, vol.voxel_size_mm)


def hypr_filter(series: DynamicSeries, kernel_size: int = 3) -> DynamicSeries:
    """Composite-ratio denoising of a frame series.

    The composite C is the duration-weighted mean of all frames; each frame
    becomes C * (F * y_m) / (F * C) with F a box kernel.  The ratio is forced
    to zero wherever the smoothed composite is below a small fraction of its
    peak: such voxels carry no signal, only noise, and the ratio there is
    unbounded.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError("kernel size must be odd and positive")
    frames = np.asarray(series.frames, dtype=np.float64)
    durations = np.array([b - a for a, b in series.windows_s])
    weights = durations / durations.sum()
    composite = np.tensordot(weights, frames, axes=1)

    def box(a):
        return ndimage.uniform_filter(a, size=kernel_size, mode="reflect")

    denom = box(composite)
    eps = 1e-3 * np.abs(denom).max()
    ok = denom > eps
    safe = np.where(ok, denom, 1.0)
    out = np.empty_like(frames)
    for m in range(frames.shape[0]):
        out[m] = composite * np.where(ok, box(frames[m]) / safe, 0.0)
    return DynamicSeries(out, series.windows_s, series.voxel_size_mm,
                         series.dose_fraction)

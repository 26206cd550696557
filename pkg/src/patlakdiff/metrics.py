"""Image-quality and region-of-interest metrics.

PSNR, SSIM, lesion CNR against a sphere-sampled reference region, CNR
improvement ratios, Welch's t-test, ROI time-activity curves, and the
graphical (normalized-time) plot used to check model linearity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .errors import ConfigError
from .kinetics import InputFunction, cp_integral, cp_value
from .volume import DynamicSeries

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11-voxel window at sigma 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _data(img) -> np.ndarray:
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


def _check_mask(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ConfigError(f"mask shape {mask.shape} does not match {shape}")
    if not mask.any():
        raise ConfigError("evaluation mask is empty")
    return mask


def psnr(test, ref, mask=None) -> float:
    """10 log10(M^2 / MSE) with M = max(ref); +inf for identical images.

    With ``mask``, the MSE and the peak are taken over the masked voxels
    only (e.g. the support of a phantom, ignoring empty field of view).
    """
    a = _data(test)
    b = _data(ref)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    mask = _check_mask(mask, a.shape)
    if mask is not None:
        a, b = a[mask], b[mask]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    peak = float(b.max())
    return 10.0 * np.log10(peak * peak / mse)


def ssim(test, ref, mask=None) -> float:
    """Mean structural similarity with a 3-d Gaussian window.

    sigma 1.5 truncated at 3.5 sigma (11-wide window), K1=0.01, K2=0.03,
    dynamic range taken from ref; local moments use reflect padding.  The
    similarity map is averaged over all voxels, or over ``mask`` when given
    (windows centered in the mask may still draw on voxels outside it);
    the dynamic range is then taken from the masked reference.
    """
    a = _data(test)
    b = _data(ref)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    mask = _check_mask(mask, a.shape)
    b_eval = b if mask is None else b[mask]
    rng_ = float(b_eval.max() - b_eval.min())
    if rng_ == 0.0:
        raise ConfigError("reference image has zero dynamic range")
    c1 = (SSIM_K1 * rng_) ** 2
    c2 = (SSIM_K2 * rng_) ** 2

    def g(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect",
                                       truncate=SSIM_TRUNCATE)

    mu_a = g(a)
    mu_b = g(b)
    var_a = g(a * a) - mu_a * mu_a
    var_b = g(b * b) - mu_b * mu_b
    cov = g(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    smap = num / den
    return float(np.mean(smap) if mask is None else np.mean(smap[mask]))


# ---------------------------------------------------------------------------
# Regions of interest

def sphere_mask(dims, center, radius: float) -> np.ndarray:
    x, y, z = np.ogrid[:dims[0], :dims[1], :dims[2]]
    return ((x - center[0]) ** 2 + (y - center[1]) ** 2
            + (z - center[2]) ** 2) <= radius * radius


@dataclass
class RoiSet:
    """Lesion masks plus a reference region pooled from sampled spheres."""

    lesion_masks: list
    reference_mask: np.ndarray
    sphere_centers: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lesion_masks:
            raise ConfigError("need at least one lesion ROI")
        for i, m in enumerate(self.lesion_masks):
            if not np.any(m):
                raise ConfigError(f"lesion ROI {i} is empty")
        if not np.any(self.reference_mask):
            raise ConfigError("reference region is empty")

    @property
    def n_lesions(self) -> int:
        return len(self.lesion_masks)


def build_roi_set(labels: np.ndarray, lesion_ids, reference_id: int,
                  n_spheres: int = 20, radius: float = 5.0, seed: int = 0,
                  max_tries: int = 20000) -> RoiSet:
    """Sample reference spheres entirely inside the reference-label region.

    Centers are drawn uniformly from the region with rejection; fails if the
    requested number of spheres cannot be placed.
    """
    labels = np.asarray(getattr(labels, "data", labels))
    lesion_masks = []
    for lid in lesion_ids:
        m = labels == lid
        if not m.any():
            raise ConfigError(f"lesion label {lid} not present")
        lesion_masks.append(m)
    ref_region = labels == reference_id
    if not ref_region.any():
        raise ConfigError(f"reference label {reference_id} not present")
    r_int = int(np.floor(radius))
    grid = np.mgrid[-r_int:r_int + 1, -r_int:r_int + 1, -r_int:r_int + 1]
    ball = grid[:, (grid ** 2).sum(axis=0) <= radius * radius].T  # (K, 3)
    candidates = np.argwhere(ref_region)
    rng = np.random.default_rng(seed)
    centers = []
    union = np.zeros(labels.shape, dtype=bool)
    tries = 0
    while len(centers) < n_spheres and tries < max_tries:
        tries += 1
        c = candidates[rng.integers(len(candidates))]
        vox = ball + c
        if (vox < 0).any() or (vox >= labels.shape).any():
            continue
        ix = tuple(vox.T)
        if not ref_region[ix].all():
            continue
        centers.append(tuple(int(v) for v in c))
        union[ix] = True
    if len(centers) < n_spheres:
        raise ConfigError(
            f"placed only {len(centers)}/{n_spheres} reference spheres of "
            f"radius {radius} after {max_tries} tries")
    return RoiSet(lesion_masks, union, centers)


def cnr(img, rois: RoiSet) -> np.ndarray:
    """Per-lesion (mu_lesion - mu_ref) / sigma_ref.

    mu_ref and sigma_ref pool all reference-sphere voxels; sigma is the
    population standard deviation.
    """
    data = _data(img)
    ref_vals = data[rois.reference_mask]
    mu_ref = float(ref_vals.mean())
    sd_ref = float(ref_vals.std())
    if sd_ref == 0.0:
        raise ConfigError("reference region has zero standard deviation")
    return np.array([(float(data[m].mean()) - mu_ref) / sd_ref
                     for m in rois.lesion_masks])


def cnr_improvement(method_img, baseline_img, rois: RoiSet) -> np.ndarray:
    """Per-lesion CNR ratio of a method against the baseline image."""
    c_m = cnr(method_img, rois)
    c_b = cnr(baseline_img, rois)
    if np.any(c_b == 0.0) or not np.isfinite(c_b).all():
        raise ConfigError("baseline CNR is zero or non-finite")
    return c_m / c_b


def ttest_independent(a, b) -> tuple[float, float]:
    """Welch's two-sided t-test (unequal variances)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ConfigError("each group needs at least two samples")
    if a.std() == 0.0 and b.std() == 0.0:
        raise ConfigError("both groups have zero variance")
    t, p = stats.ttest_ind(a, b, equal_var=False)
    return float(t), float(p)


# ---------------------------------------------------------------------------
# Time-activity curves and the graphical linearity check

def roi_tac(series: DynamicSeries, roi: np.ndarray):
    """Per-frame ROI mean and frame mid-times (seconds)."""
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != series.dims:
        raise ConfigError(f"ROI shape {roi.shape} != series dims {series.dims}")
    if not roi.any():
        raise ConfigError("ROI is empty")
    times = np.array([(a + b) / 2.0 for a, b in series.windows_s])
    values = np.array([float(series.frames[m][roi].mean())
                       for m in range(series.n_frames)])
    return times, values


@dataclass(frozen=True)
class GraphicalFit:
    """OLS line through the normalized-time transform of a late TAC."""

    x: np.ndarray
    y: np.ndarray
    slope: float
    intercept: float
    r2: float


def patlak_plot(times_s, values, f: InputFunction,
                t_star_s: float) -> GraphicalFit:
    """Transform an instantaneous TAC to (int Cp / Cp, c / Cp) and fit a line.

    Only samples after t_star enter the fit; the slope estimates the uptake
    rate (per minute) and the intercept the blood fraction.  Needs at least
    two late samples.
    """
    times_s = np.asarray(times_s, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times_s.shape != values.shape:
        raise ConfigError("times and values must align")
    late = times_s > t_star_s
    if late.sum() < 2:
        raise ConfigError("need at least two samples after t_star")
    t = times_s[late]
    c = values[late]
    cp = cp_value(f, t)
    if np.any(cp <= 0):
        raise ConfigError("input function vanishes at a sample time")
    x = cp_integral(f, t) / cp
    y = c / cp
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res < 1e-24 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return GraphicalFit(x, y, float(slope), float(intercept), r2)

"""Synthetic ground truth: ellipsoid-based (slope, intercept) maps with a
label volume, plus dose-dependent Gaussian frame noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .kinetics import ParametricImage, PatlakBasis, forward_project
from .volume import DynamicSeries, Volume3D

LABEL_BACKGROUND = 0


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned ellipsoid in voxel coordinates with its tissue values."""

    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    kappa: float
    b: float
    label: str = "organ"  # organ | lesion | reference

    def __post_init__(self):
        if self.label not in ("organ", "lesion", "reference"):
            raise ConfigError(f"unknown ellipsoid label {self.label!r}")
        if min(self.radii) < 0:
            raise ConfigError("radii must be nonnegative")
        if self.kappa < 0 or self.b < 0:
            raise ConfigError("tissue values must be nonnegative")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    background: tuple[float, float] = (0.0, 0.0)
    ellipsoids: tuple[Ellipsoid, ...] = ()
    voxel_size_mm: tuple[float, float, float] = (4.0, 4.0, 4.0)
    seed: int = 0

    def region_ids(self, label: str) -> list[int]:
        """Region ids (1-based, in override order) carrying a given label."""
        return [i + 1 for i, e in enumerate(self.ellipsoids) if e.label == label]


def build_phantom(spec: PhantomSpec):
    """Paint ellipsoids over the background; later entries override earlier.

    Returns the parametric image and an integer label volume (0 background,
    i+1 for the i-th ellipsoid).
    """
    nx, ny, nz = spec.dims
    if min(spec.dims) <= 0:
        raise ConfigError("phantom dims must be positive")
    kap = np.full(spec.dims, float(spec.background[0]))
    off = np.full(spec.dims, float(spec.background[1]))
    labels = np.full(spec.dims, LABEL_BACKGROUND, dtype=np.int32)
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    for i, e in enumerate(spec.ellipsoids):
        for a, (c, r, n) in enumerate(zip(e.center, e.radii, spec.dims)):
            if c - r < -0.5 or c + r > n - 0.5:
                raise ConfigError(
                    f"ellipsoid {i} exceeds bounds along axis {a}")
        if min(e.radii) == 0:
            continue  # degenerate: contains no voxel centers
        d2 = (((ix - e.center[0]) / e.radii[0]) ** 2
              + ((iy - e.center[1]) / e.radii[1]) ** 2
              + ((iz - e.center[2]) / e.radii[2]) ** 2)
        inside = d2 <= 1.0
        kap[inside] = e.kappa
        off[inside] = e.b
        labels[inside] = i + 1
    img = ParametricImage(Volume3D(kap, spec.voxel_size_mm),
                          Volume3D(off, spec.voxel_size_mm))
    return img, Volume3D(labels, spec.voxel_size_mm)


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian frame noise whose variance follows count statistics.

    sigma_m = base_sigma / sqrt(dose_fraction * dt_m / dt_ref): halving the
    dose or the frame duration raises the noise by sqrt(2).
    """

    base_sigma: float
    dose_fraction: float = 1.0
    duration_scaling: bool = True
    dt_ref_s: float = 300.0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ConfigError(f"unsupported noise kind {self.kind!r}")
        if self.base_sigma < 0:
            raise ConfigError("base_sigma must be nonnegative")
        if not 0 < self.dose_fraction <= 1:
            raise ConfigError("dose_fraction must be in (0, 1]")

    def frame_sigma(self, dt_s: float) -> float:
        scale = self.dose_fraction
        if self.duration_scaling:
            scale *= dt_s / self.dt_ref_s
        return self.base_sigma / np.sqrt(scale)


def synthesize_series(x: ParametricImage, basis: PatlakBasis,
                      noise: NoiseModel, seed: int) -> DynamicSeries:
    """Forward-project and add per-frame Gaussian noise.

    Each frame draws from its own RNG stream (seed, frame index), so
    generation is reproducible regardless of frame evaluation order.
    """
    series = forward_project(x, basis)
    frames = series.frames.copy()
    for m, (a_s, b_s) in enumerate(series.windows_s):
        sigma = noise.frame_sigma(b_s - a_s)
        if sigma > 0:
            rng = np.random.default_rng((seed, m))
            frames[m] += sigma * rng.standard_normal(frames[m].shape)
    return DynamicSeries(frames, series.windows_s, x.voxel_size_mm,
                         dose_fraction=noise.dose_fraction)


def desk_phantom() -> PhantomSpec:
    """Desk-scale torso analogue on a 64 x 64 x 96 grid: body, lungs,
    liver-like reference organ, and three hot lesions with slope contrast
    3-8x background."""
    return PhantomSpec(
        dims=(64, 64, 96),
        background=(0.0, 0.0),
        ellipsoids=(
            # body envelope (soft tissue)
            Ellipsoid((31.5, 31.5, 47.5), (28.0, 26.0, 45.0), 0.004, 0.30),
            # lung-like low-uptake organ
            Ellipsoid((22.0, 36.0, 66.0), (10.0, 9.0, 13.0), 0.0015, 0.12),
            # liver-like reference organ
            Ellipsoid((36.0, 30.0, 34.0), (18.0, 14.0, 20.0), 0.008, 0.60,
                      label="reference"),
            # lesions: slope 3x / 5x / 8x background
            Ellipsoid((42.0, 34.0, 40.0), (5.0, 5.0, 5.0), 0.012, 0.60,
                      label="lesion"),
            Ellipsoid((30.0, 26.0, 28.0), (4.0, 4.0, 4.0), 0.020, 0.60,
                      label="lesion"),
            Ellipsoid((32.0, 40.0, 74.0), (4.5, 4.5, 4.5), 0.032, 0.40,
                      label="lesion"),
        ),
        voxel_size_mm=(4.0, 4.0, 4.0),
    )

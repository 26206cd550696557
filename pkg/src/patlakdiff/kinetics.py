"""Irreversible-uptake graphical kinetics: input function, temporal basis,
and the linear operator from (slope, intercept) maps to frame values.

Unit convention (documented once, here): all times crossing an interface are
in seconds; integrals over the input function are evaluated on the minute
scale.  Consequently the slope channel is per-minute, the basis first column
is activity-concentration x min^2, the second column activity x min, and
frame values are frame-integrated concentration in activity x min.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .errors import ConfigError
from .volume import DynamicSeries, Volume3D

SECONDS_PER_MINUTE = 60.0
T_STAR_DEFAULT_S = 1200.0

# Classic tri-exponential FDG arterial input parameters (concentration in
# kBq/mL, rates per minute).
FENG_DEFAULTS = dict(A1=851.1225, A2=21.8798, A3=20.8113,
                     l1=4.133859, l2=0.01043449, l3=0.1190996, t0_min=0.0)


@dataclass(frozen=True, eq=False)
class InputFunction:
    """Blood input C_p(t): tri-exponential model or sampled table."""

    model: str
    params: dict | None = None
    table_t_min: np.ndarray | None = None
    table_cp: np.ndarray | None = None


def feng_input(**overrides) -> InputFunction:
    """Tri-exponential input C_p(tau) = (A1 tau - A2 - A3) e^{-l1 tau}
    + A2 e^{-l2 tau} + A3 e^{-l3 tau}, tau = t - t0, zero before t0."""
    params = dict(FENG_DEFAULTS)
    unknown = set(overrides) - set(params)
    if unknown:
        raise ConfigError(f"unknown input-function parameters {sorted(unknown)}")
    params.update(overrides)
    if min(params["l1"], params["l2"], params["l3"]) <= 0:
        raise ConfigError("decay rates must be positive")
    return InputFunction("feng", params=params)


def tabulated_input(t_min, cp) -> InputFunction:
    """Piecewise-linear input from samples (t in minutes, C_p values).

    Values are clamped to the last sample beyond the table's end.
    """
    t = np.asarray(t_min, dtype=float)
    c = np.asarray(cp, dtype=float)
    if t.ndim != 1 or t.shape != c.shape or t.size < 2:
        raise ConfigError("need matching 1-d arrays with at least 2 samples")
    if np.any(np.diff(t) <= 0):
        raise ConfigError("table times must be strictly increasing")
    if t[0] < 0 or np.any(c < 0):
        raise ConfigError("table must have t >= 0 and C_p >= 0")
    return InputFunction("tabulated", table_t_min=t, table_cp=c)


def cp_value(f: InputFunction, t_s):
    """C_p at time t (seconds).  Accepts scalars or arrays."""
    t_s = np.asarray(t_s, dtype=float)
    if np.any(t_s < 0):
        raise ValueError("negative time")
    t = t_s / SECONDS_PER_MINUTE
    if f.model == "feng":
        p = f.params
        tau = t - p["t0_min"]
        tau = np.maximum(tau, 0.0)
        val = ((p["A1"] * tau - p["A2"] - p["A3"]) * np.exp(-p["l1"] * tau)
               + p["A2"] * np.exp(-p["l2"] * tau)
               + p["A3"] * np.exp(-p["l3"] * tau))
        out = np.where(t >= p["t0_min"], val, 0.0)
    else:
        tt = np.clip(t, f.table_t_min[0], f.table_t_min[-1])
        out = np.interp(tt, f.table_t_min, f.table_cp)
    return out if out.ndim else float(out)


def cp_integral(f: InputFunction, t_s):
    """Running integral of C_p from 0 to t, on the minute scale."""
    t_s = np.asarray(t_s, dtype=float)
    if np.any(t_s < 0):
        raise ValueError("negative time")
    t = t_s / SECONDS_PER_MINUTE
    if f.model == "feng":
        p = f.params
        tau = np.maximum(t - p["t0_min"], 0.0)
        e1 = np.exp(-p["l1"] * tau)
        s = p["A1"] * (1.0 - e1 * (1.0 + p["l1"] * tau)) / p["l1"] ** 2
        s -= (p["A2"] + p["A3"]) * (1.0 - e1) / p["l1"]
        s += p["A2"] * (1.0 - np.exp(-p["l2"] * tau)) / p["l2"]
        s += p["A3"] * (1.0 - np.exp(-p["l3"] * tau)) / p["l3"]
        out = s
    else:
        knots = f.table_t_min
        vals = f.table_cp
        cum = np.concatenate(
            [[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(knots))])
        inside = np.minimum(t, knots[-1])
        idx = np.clip(np.searchsorted(knots, inside, side="right") - 1,
                      0, knots.size - 2)
        t0, t1 = knots[idx], knots[idx + 1]
        c0, c1 = vals[idx], vals[idx + 1]
        frac = np.where(t1 > t0, (inside - t0) / (t1 - t0), 0.0)
        cmid = c0 + frac * (c1 - c0)
        out = cum[idx] + 0.5 * (c0 + cmid) * (inside - t0)
        out = out + np.maximum(t - knots[-1], 0.0) * vals[-1]
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FrameTiming:
    """Per-frame acquisition windows (t_start_s, t_end_s), contiguous order."""

    windows_s: tuple

    def __post_init__(self):
        wins = tuple((float(a), float(b)) for a, b in self.windows_s)
        object.__setattr__(self, "windows_s", wins)
        prev_end = -np.inf
        for a, b in wins:
            if b <= a:
                raise ConfigError(f"frame window ({a}, {b}) has no duration")
            if a < prev_end:
                raise ConfigError("frame windows overlap or are out of order")
            prev_end = b

    @property
    def n_frames(self) -> int:
        return len(self.windows_s)

    @property
    def durations_s(self) -> np.ndarray:
        return np.array([b - a for a, b in self.windows_s])

    @property
    def mid_times_s(self) -> np.ndarray:
        return np.array([0.5 * (a + b) for a, b in self.windows_s])

    def last(self, n: int) -> "FrameTiming":
        return FrameTiming(self.windows_s[-n:])


def clinical_timing() -> FrameTiming:
    """One-hour 29-frame protocol: 6x10 s, 2x30 s, 6x60 s, 5x120 s,
    4x180 s, 6x300 s."""
    durations = [10.0] * 6 + [30.0] * 2 + [60.0] * 6 + [120.0] * 5 \
        + [180.0] * 4 + [300.0] * 6
    windows, t = [], 0.0
    for d in durations:
        windows.append((t, t + d))
        t += d
    return FrameTiming(tuple(windows))


@dataclass(frozen=True, eq=False)
class PatlakBasis:
    """M x 2 temporal basis [Sbar_p(m), Cbar_p(m)] for frames after t*."""

    B: np.ndarray
    t_star_s: float
    windows_s: tuple

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        object.__setattr__(self, "B", B)
        if B.ndim != 2 or B.shape[1] != 2:
            raise ConfigError("basis must be M x 2")
        if np.any(B <= 0):
            raise ConfigError("basis entries must be strictly positive")
        if np.any(np.diff(B[:, 0]) <= 0):
            raise ConfigError("running-integral column must be increasing")

    @property
    def n_frames(self) -> int:
        return self.B.shape[0]


def patlak_basis(f: InputFunction, timing: FrameTiming,
                 t_star_s: float = T_STAR_DEFAULT_S) -> PatlakBasis:
    """Integrate the input over each frame window.

    Column 1 is the double integral of C_p (outer integral over the frame),
    column 2 the frame integral of C_p, both on the minute scale, computed by
    adaptive quadrature to 1e-8 relative tolerance.
    """
    rows = []
    for a_s, b_s in timing.windows_s:
        if a_s < t_star_s:
            raise ConfigError(
                f"frame starting at {a_s} s precedes steady state t*={t_star_s} s")
        a, b = a_s / SECONDS_PER_MINUTE, b_s / SECONDS_PER_MINUTE
        cbar = cp_integral(f, b_s) - cp_integral(f, a_s)
        sbar, _ = quad(lambda tm: cp_integral(f, tm * SECONDS_PER_MINUTE),
                       a, b, epsabs=0.0, epsrel=1e-8, limit=200)
        rows.append((sbar, cbar))
    return PatlakBasis(np.array(rows), float(t_star_s), timing.windows_s)


# ---------------------------------------------------------------------------
# Parametric images and the forward/adjoint pair

@dataclass
class ParametricImage:
    """Slope (kappa, per-minute) and intercept (b) volumes."""

    kappa: Volume3D
    b: Volume3D

    def __post_init__(self):
        if self.kappa.dims != self.b.dims:
            raise ValueError("slope/intercept dims differ")

    @property
    def dims(self):
        return self.kappa.dims

    @property
    def voxel_size_mm(self):
        return self.kappa.voxel_size_mm

    def stack(self) -> np.ndarray:
        """Channels as a (2, J) float64 array (kappa first)."""
        return np.stack([self.kappa.data.ravel(), self.b.data.ravel()]) \
            .astype(np.float64, copy=False)

    @classmethod
    def from_stack(cls, xs: np.ndarray, dims, voxel_size_mm=(1.0, 1.0, 1.0)):
        k = Volume3D(np.asarray(xs[0]).reshape(dims), voxel_size_mm)
        b = Volume3D(np.asarray(xs[1]).reshape(dims), voxel_size_mm)
        return cls(k, b)


def project_flat(B: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """(M,2) basis applied to (2,J) channels -> (M,J) frame values."""
    return B @ xs


def backproject_flat(B: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`project_flat`: (M,J) frames -> (2,J) channels."""
    return B.T @ ys


def forward_project(x: ParametricImage, basis: PatlakBasis) -> DynamicSeries:
    """Noiseless frame values S_m * kappa + C_m * b, as a series."""
    xs = x.stack()
    ys = project_flat(basis.B, xs)
    frames = ys.reshape((basis.n_frames,) + x.dims)
    return DynamicSeries(frames, list(basis.windows_s), x.voxel_size_mm)


def adjoint_project(series: DynamicSeries, basis: PatlakBasis) -> ParametricImage:
    """Transpose of :func:`forward_project` (no constraint applied)."""
    if series.n_frames != basis.n_frames:
        raise ValueError(
            f"series has {series.n_frames} frames, basis {basis.n_frames}")
    ys = series.frames.reshape(series.n_frames, -1).astype(np.float64)
    xs = backproject_flat(basis.B, ys)
    return ParametricImage.from_stack(xs, series.dims, series.voxel_size_mm)


def tracer_concentration(x: ParametricImage, f: InputFunction, t_s: float,
                         t_star_s: float = T_STAR_DEFAULT_S) -> Volume3D:
    """Voxel-wise concentration kappa * int C_p + b * C_p at one time."""
    if t_s <= t_star_s:
        raise ConfigError(
            f"t={t_s} s is before steady state t*={t_star_s} s")
    c = x.kappa.data * cp_integral(f, t_s) + x.b.data * cp_value(f, t_s)
    return Volume3D(c, x.voxel_size_mm)

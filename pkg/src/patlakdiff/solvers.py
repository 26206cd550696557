"""Parametric reconstruction solvers.

Four estimators for the slope/intercept pair from a late-frame series:

* :func:`ls_fit` — unconstrained per-voxel least squares (the closed form);
* :func:`baseline_fit` — nonnegative multiplicative (ISRA-style) descent on
  the same objective, followed by light Gaussian smoothing;
* :func:`dps_sample` — posterior-guided reverse diffusion: each denoising
  step is corrected by the scaled data-consistency gradient;
* :func:`hqs_solve` — half-quadratic splitting that alternates multiplicative
  data-term updates on x with stochastic regularization-by-denoising steps
  on the split variable v.

All solvers flatten frames to an (M, J) matrix and apply the M x 2 temporal
basis per voxel; the Kronecker system matrix is never materialized.  The
basis argument accepts either a :class:`~patlakdiff.kinetics.PatlakBasis`
or a plain (M, 2) array, which additionally permits bases with zero entries
(the multiplicative update only needs elementwise nonnegativity).
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .denoisers import gaussian_filter_array
from .diffusion import NoiseSchedule, ScoreModel, reverse_step
from .errors import ConfigError, DivergenceError
from .kinetics import ParametricImage
from .volume import DynamicSeries, PatchLayout, Volume3D, merge

log = logging.getLogger(__name__)

FLOOR = 1e-12
DIVERGENCE_NORM = 1e6


@dataclass(frozen=True)
class SolverConfig:
    """Knobs shared by the splitting solver (and partly by the sampler).

    ``channel_scale`` balances the slope/intercept channels so a unit-scale
    diffusion prior model sees O(1) values: "none", "auto" (robust magnitude
    of the initializer, per channel), or an explicit (scale_k, scale_b) pair.
    """

    lam: float = 0.2
    max_it: int = 20
    sub_it1: int = 5
    sub_it2: int = 10
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma2: float | None = None
    init_fwhm_voxels: float = 3.0
    init_iters: int = 200
    t_start_frac: float = 0.3
    channel_scale: object = "auto"
    floor: float = FLOOR

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        for name in ("max_it", "sub_it1", "sub_it2", "init_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.adam_eps <= 0 or self.floor <= 0:
            raise ConfigError("adam_eps and floor must be positive")
        if self.sigma2 is not None and self.sigma2 <= 0:
            raise ConfigError("sigma2 must be positive")
        if not 0.0 < self.t_start_frac <= 1.0:
            raise ConfigError("t_start_frac must lie in (0, 1]")
        if self.init_fwhm_voxels < 0:
            raise ConfigError("init_fwhm_voxels must be nonnegative")


@dataclass
class SolveTrace:
    """Per-outer-iteration diagnostics appended by the iterative solvers."""

    data_fidelity: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    red_value: list = field(default_factory=list)
    wall_time_s: list = field(default_factory=list)
    floor_hits: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def n_iterations(self) -> int:
        return len(self.data_fidelity)


def _basis_matrix(basis) -> np.ndarray:
    B = np.asarray(getattr(basis, "B", basis), dtype=np.float64)
    if B.ndim != 2 or B.shape[1] != 2:
        raise ConfigError(f"basis must be M x 2, got shape {B.shape}")
    return B


def _frame_matrix(series: DynamicSeries, B: np.ndarray) -> np.ndarray:
    if series.n_frames != B.shape[0]:
        raise ConfigError(f"series has {series.n_frames} frames but the "
                          f"basis has {B.shape[0]} rows")
    return series.frames.reshape(series.n_frames, -1).astype(np.float64)


def estimate_sigma2(series: DynamicSeries) -> float:
    """Noise variance from the eight corner blocks of the last frame.

    The phantom background carries no tracer, so corner voxels of a late
    frame are noise-only; their empirical variance estimates sigma^2.
    """
    last = np.asarray(series.frames[-1], dtype=np.float64)
    side = max(2, min(last.shape) // 8)
    ends = (slice(0, side), slice(-side, None))
    blocks = [last[sx, sy, sz].ravel()
              for sx in ends for sy in ends for sz in ends]
    return max(float(np.var(np.concatenate(blocks))), 1e-12)


def _resolve_scale(spec, init: ParametricImage | None) -> np.ndarray:
    if isinstance(spec, str):
        if spec == "none":
            return np.ones(2)
        if spec == "auto":
            if init is None:
                raise ConfigError(
                    "channel_scale='auto' needs an initial image")
            scale = np.ones(2)
            for c, chan in enumerate((init.kappa.data, init.b.data)):
                mag = np.abs(chan.ravel())
                pos = mag[mag > 1e3 * FLOOR]
                if pos.size:
                    med = float(np.median(pos))
                    if np.isfinite(med) and med > 0:
                        scale[c] = med
            return scale
        raise ConfigError(f"unknown channel_scale {spec!r}")
    scale = np.asarray(spec, dtype=np.float64)
    if scale.shape != (2,) or np.any(scale <= 0) or not np.isfinite(scale).all():
        raise ConfigError("channel_scale must be two positive numbers")
    return scale


# ---------------------------------------------------------------------------
# Closed-form and multiplicative fits

def ls_fit(series: DynamicSeries, basis) -> ParametricImage:
    """Per-voxel least squares through the 2x2 normal equations.

    No nonnegativity constraint; raises ConfigError when the basis columns
    are numerically collinear.
    """
    B = _basis_matrix(basis)
    ys = _frame_matrix(series, B)
    G = B.T @ B
    if not np.isfinite(G).all() or np.linalg.cond(G) > 1e12:
        raise ConfigError("basis columns are numerically collinear")
    xs = np.linalg.solve(G, B.T @ ys)
    return ParametricImage.from_stack(xs, series.dims, series.voxel_size_mm)


def mm_update_flat(xs: np.ndarray, vs: np.ndarray | None, ys: np.ndarray,
                   B: np.ndarray, lam: float, floor: float = FLOOR,
                   stats: dict | None = None) -> np.ndarray:
    """One multiplicative descent step on 1/2 ||y - Bx||^2 + lam/2 ||x - v||^2.

    x_j <- x_j (B^T y + lam v)_j / (B^T B x + lam x)_j.  Requires
    elementwise-nonnegative B and y; x is floored so zero entries can still
    move.  The numerator is clamped at zero in case v has negative entries.
    """
    xs = np.maximum(xs, floor)
    num = B.T @ ys
    den = B.T @ (B @ xs)
    if lam > 0.0:
        if vs is None:
            raise ConfigError("lam > 0 requires the split variable v")
        num = num + lam * vs
        den = den + lam * xs
    np.maximum(num, 0.0, out=num)
    low = den < floor
    n_low = int(np.count_nonzero(low))
    if n_low:
        den = np.maximum(den, floor)
    if stats is not None:
        stats["floor_hits"] = stats.get("floor_hits", 0) + n_low
    return xs * (num / den)


def mm_update(x: ParametricImage, series: DynamicSeries, basis,
              lam: float = 0.0, v: ParametricImage | None = None,
              floor: float = FLOOR) -> ParametricImage:
    """Image-level wrapper around :func:`mm_update_flat`.

    Frame values are clipped at zero first: the multiplicative form is only
    a descent method for nonnegative data.
    """
    B = _basis_matrix(basis)
    ys = np.clip(_frame_matrix(series, B), 0.0, None)
    vs = None if v is None else v.stack()
    xs = mm_update_flat(x.stack(), vs, ys, B, lam, floor)
    return ParametricImage.from_stack(xs, series.dims, series.voxel_size_mm)


def _balance_scale(B: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Per-channel magnitude of the clipped least-squares fit.

    Used to rescale the basis columns so that a flat all-ones start sits
    near the solution in both channels; falls back to ones when a channel
    has no positive values.
    """
    G = B.T @ B
    try:
        ls = np.linalg.solve(G, B.T @ ys)
    except np.linalg.LinAlgError:
        return np.ones(2)
    scale = np.ones(2)
    for c in range(2):
        pos = ls[c][ls[c] > 1e3 * FLOOR]
        if pos.size:
            med = float(np.median(pos))
            if np.isfinite(med) and med > 0:
                scale[c] = med
    return scale


def baseline_fit(series: DynamicSeries, basis, iters: int = 500,
                 fwhm_voxels: float = 3.0, floor: float = FLOOR,
                 trace: SolveTrace | None = None) -> ParametricImage:
    """Nonnegative fit: clip, rebalance, multiplicative descent, smooth.

    Negative frame values are clipped to zero (count logged), the basis
    columns are rescaled by the typical positive least-squares magnitude of
    each channel, and the descent starts from all ones in the rescaled
    parameters.  The two parametric volumes are Gaussian-smoothed at the
    end; fwhm below 0.1 voxel skips the smoothing.
    """
    B = _basis_matrix(basis)
    ys = _frame_matrix(series, B)
    n_neg = int(np.count_nonzero(ys < 0))
    if n_neg:
        log.debug("baseline_fit: clipped %d negative frame values", n_neg)
        ys = np.clip(ys, 0.0, None)
    scale = _balance_scale(B, ys)
    Bs = B * scale[None, :]
    xs = np.ones((2, ys.shape[1]))
    stats: dict = {}
    for _ in range(iters):
        xs = mm_update_flat(xs, None, ys, Bs, 0.0, floor, stats)
    xs = xs * scale[:, None]
    if trace is not None:
        trace.data_fidelity.append(0.5 * float(np.sum((ys - B @ xs) ** 2)))
        trace.floor_hits.append(stats.get("floor_hits", 0))
        trace.notes.update(clipped_values=n_neg, balance_scale=tuple(scale))
    dims = series.dims
    kappa = gaussian_filter_array(xs[0].reshape(dims), fwhm_voxels)
    b = gaussian_filter_array(xs[1].reshape(dims), fwhm_voxels)
    return ParametricImage(Volume3D(kappa, series.voxel_size_mm),
                           Volume3D(b, series.voxel_size_mm))


# ---------------------------------------------------------------------------
# Gradients used by the guided sampler and the splitting solver

def likelihood_grad(x: ParametricImage, series: DynamicSeries, basis,
                    sigma2: float) -> ParametricImage:
    """Gradient of ||y - Bx||^2 / sigma^2, i.e. (2/sigma^2) B^T (Bx - y)."""
    if sigma2 <= 0:
        raise ConfigError("sigma2 must be positive")
    B = _basis_matrix(basis)
    ys = _frame_matrix(series, B)
    xs = x.stack()
    g = (2.0 / sigma2) * (B.T @ (B @ xs - ys))
    return ParametricImage.from_stack(g, series.dims, series.voxel_size_mm)


def red_diff_loss(x: np.ndarray, v: np.ndarray, t: int, eps: np.ndarray,
                  score: ScoreModel, lam: float,
                  sched: NoiseSchedule) -> tuple[float, np.ndarray]:
    """Stochastic regularization-by-denoising value and gradient in v.

    v is pushed to step t of the forward process with the supplied noise
    draw, the score model predicts that noise, and the mismatch (weighted
    by the inverse signal-to-noise ratio sqrt(1-abar)/sqrt(abar)) steers v;
    the score output is treated as constant (stop-gradient), so the
    returned gradient is lam (v - x) + w_t (eps_hat - eps).
    """
    sched.check_t(t)
    ab = sched.alpha_bar[t - 1]
    v_noised = np.sqrt(ab) * v + np.sqrt(1.0 - ab) * eps
    eps_hat = np.asarray(score.epsilon_hat(v_noised, t))
    if not np.isfinite(eps_hat).all():
        raise DivergenceError(f"score produced non-finite output at t={t}")
    w_t = np.sqrt((1.0 - ab) / ab)
    resid = eps_hat - eps
    loss = 0.5 * lam * float(np.sum((x - v) ** 2)) \
        + w_t * float(np.sum(resid * v))
    grad = lam * (v - x) + w_t * resid
    return loss, grad


# ---------------------------------------------------------------------------
# Posterior-guided diffusion sampling

def dps_sample(series: DynamicSeries, basis, score: ScoreModel,
               sched: NoiseSchedule, sigma2: float | None = None,
               seed: int = 0, channel_scale="none",
               record_every: int = 50) -> tuple[ParametricImage, SolveTrace]:
    """Reverse diffusion with a per-step data-consistency correction.

    Each denoising step subtracts beta_tilde_t / sigma^2 * 2 B^T (B x_t - y),
    the likelihood gradient at the current state scaled by the posterior
    step variance.  With sigma2 = inf the correction vanishes and the chain
    reduces to unconditional sampling.  Raises DivergenceError (carrying the
    partial trace) when the state norm exceeds 1e6 or turns non-finite.
    """
    B = _basis_matrix(basis)
    ys = _frame_matrix(series, B)
    if sigma2 is None:
        sigma2 = estimate_sigma2(series)
    if not sigma2 > 0:
        raise ConfigError("sigma2 must be positive")
    init = ls_fit(series, basis) if channel_scale == "auto" else None
    scale = _resolve_scale(channel_scale, init)
    Bs = B * scale[None, :]
    dims = series.dims
    shape = (2,) + dims
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    trace = SolveTrace(notes={"sigma2": sigma2, "scale": tuple(scale),
                              "checkpoints": []})
    apply_correction = np.isfinite(sigma2)
    start = time.perf_counter()
    for t in range(sched.T, 0, -1):
        z = rng.standard_normal(shape) if t > 1 else 0.0
        step = reverse_step(x, t, score, z, sched)
        if apply_correction:
            resid = Bs @ x.reshape(2, -1) - ys
            corr = (2.0 * sched.beta_tilde[t - 1] / sigma2) * (Bs.T @ resid)
            step = step - corr.reshape(shape)
        x = step
        norm = float(np.linalg.norm(x))
        if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
            trace.notes["diverged_at_t"] = t
            raise DivergenceError(
                f"sampler state norm {norm:.3g} at t={t}", trace=trace)
        if t % record_every == 0 or t == 1:
            trace.notes["checkpoints"].append((t, norm))
    trace.data_fidelity.append(
        0.5 * float(np.sum((ys - Bs @ x.reshape(2, -1)) ** 2)))
    trace.wall_time_s.append(time.perf_counter() - start)
    xs = scale[:, None] * x.reshape(2, -1)
    return (ParametricImage.from_stack(xs, dims, series.voxel_size_mm),
            trace)


# ---------------------------------------------------------------------------
# Half-quadratic splitting with a diffusion prior

def _stride_taus(sched: NoiseSchedule, cfg: SolverConfig) -> np.ndarray:
    """Descending timesteps t_start .. t_start/sub_it2, floored at 1."""
    t_start = int(round(cfg.t_start_frac * sched.T))
    if t_start < 1:
        raise ConfigError("t_start_frac selects no timestep")
    taus = np.round(np.arange(cfg.sub_it2, 0, -1)
                    * t_start / cfg.sub_it2).astype(int)
    return np.maximum(taus, 1)


def hqs_solve(series: DynamicSeries, basis, score: ScoreModel,
              sched: NoiseSchedule, cfg: SolverConfig = SolverConfig(),
              seed=0, init: ParametricImage | None = None,
              ) -> tuple[ParametricImage, SolveTrace]:
    """Alternate data-term descent on x and prior-driven updates on v.

    Per outer iteration: x restarts from v and takes ``sub_it1``
    multiplicative steps on the penalized least-squares term; v restarts
    from x and takes one bias-corrected ADAM step per strided timestep
    (``sub_it2`` of them, descending from t_start_frac * T), each driven by
    a fresh noise draw through :func:`red_diff_loss`.  ADAM moments reset
    at every outer iteration.  Returns the final v (channel scaling undone)
    and the per-iteration trace.
    """
    B = _basis_matrix(basis)
    ys = _frame_matrix(series, B)
    n_neg = int(np.count_nonzero(ys < 0))
    if n_neg:
        log.debug("hqs_solve: clipped %d negative frame values", n_neg)
        ys = np.clip(ys, 0.0, None)
    if init is None:
        init = baseline_fit(series, basis, iters=cfg.init_iters,
                            fwhm_voxels=cfg.init_fwhm_voxels)
    scale = _resolve_scale(cfg.channel_scale, init)
    Bs = B * scale[None, :]
    dims = series.dims
    shape = (2,) + dims
    taus = _stride_taus(sched, cfg)
    rng = np.random.default_rng(seed)
    trace = SolveTrace(notes={"scale": tuple(scale), "clipped_values": n_neg,
                              "taus": taus.tolist()})
    v = np.maximum(init.stack() / scale[:, None], cfg.floor).reshape(shape)
    for _ in range(cfg.max_it):
        tic = time.perf_counter()
        stats: dict = {}
        xf = v.reshape(2, -1)
        vf = v.reshape(2, -1)
        for _ in range(cfg.sub_it1):
            xf = mm_update_flat(xf, vf, ys, Bs, cfg.lam, cfg.floor, stats)
        x = xf.reshape(shape)

        vt = x.copy()
        m1 = np.zeros(shape)
        m2 = np.zeros(shape)
        loss = float("nan")
        for step, t in enumerate(taus, start=1):
            eps_t = rng.standard_normal(shape)
            loss, grad = red_diff_loss(x, vt, int(t), eps_t, score,
                                       cfg.lam, sched)
            m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * grad
            m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * grad * grad
            m1_hat = m1 / (1.0 - cfg.beta1 ** step)
            m2_hat = m2 / (1.0 - cfg.beta2 ** step)
            vt = vt - cfg.lr * m1_hat / (np.sqrt(m2_hat) + cfg.adam_eps)
        norm = float(np.linalg.norm(vt))
        if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
            raise DivergenceError(
                f"split variable norm {norm:.3g} after "
                f"{trace.n_iterations + 1} outer iterations", trace=trace)
        v = vt

        trace.data_fidelity.append(0.5 * float(np.sum((ys - Bs @ xf) ** 2)))
        trace.penalty.append(0.5 * cfg.lam * float(np.sum((x - v) ** 2)))
        trace.red_value.append(loss)
        trace.floor_hits.append(stats.get("floor_hits", 0))
        trace.wall_time_s.append(time.perf_counter() - tic)
    xs = scale[:, None] * v.reshape(2, -1)
    return (ParametricImage.from_stack(xs, dims, series.voxel_size_mm),
            trace)


def _slice_series(series: DynamicSeries, layout: PatchLayout,
                  index: int) -> DynamicSeries:
    org = layout.origins[index]
    sl = (slice(None),) + tuple(
        slice(org[a], org[a] + layout.patch_dims[a]) for a in range(3))
    return DynamicSeries(series.frames[sl].copy(), series.windows_s,
                         series.voxel_size_mm, series.dose_fraction)


def hqs_solve_patched(series: DynamicSeries, basis, score: ScoreModel,
                      sched: NoiseSchedule, layout: PatchLayout,
                      cfg: SolverConfig = SolverConfig(), seed: int = 0,
                      max_workers: int | None = None) -> ParametricImage:
    """Run :func:`hqs_solve` per patch and ramp-merge the results.

    Patch p draws from an independent stream seeded with (seed, p), so the
    result does not depend on scheduling order.  A shared channel scale is
    derived once from a whole-volume initial fit to keep patches consistent.
    """
    layout.validate_for(series.dims)
    init = baseline_fit(series, basis, iters=cfg.init_iters,
                        fwhm_voxels=cfg.init_fwhm_voxels)
    scale = _resolve_scale(cfg.channel_scale, init)

    def run(index: int):
        sub = _slice_series(series, layout, index)
        sub_init = ParametricImage(
            Volume3D(init.kappa.data[_patch_slices(layout, index)].copy(),
                     series.voxel_size_mm),
            Volume3D(init.b.data[_patch_slices(layout, index)].copy(),
                     series.voxel_size_mm))
        img, _ = hqs_solve(sub, basis, score, sched,
                           _with_scale(cfg, scale), seed=(seed, index),
                           init=sub_init)
        return img

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        images = list(pool.map(run, range(len(layout.origins))))
    kappa = merge([im.kappa for im in images], layout, series.dims)
    b = merge([im.b for im in images], layout, series.dims)
    return ParametricImage(kappa, b)


def _patch_slices(layout: PatchLayout, index: int):
    org = layout.origins[index]
    return tuple(slice(org[a], org[a] + layout.patch_dims[a])
                 for a in range(3))


def _with_scale(cfg: SolverConfig, scale: np.ndarray) -> SolverConfig:
    return replace(cfg, channel_scale=(float(scale[0]), float(scale[1])))

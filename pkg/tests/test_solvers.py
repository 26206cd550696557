import numpy as np
import pytest

from patlakdiff.diffusion import GaussianPriorScore, make_schedule, reverse_step
from patlakdiff.errors import ConfigError, DivergenceError
from patlakdiff.kinetics import ParametricImage
from patlakdiff.solvers import (SolverConfig, SolveTrace, _resolve_scale,
                                _stride_taus, baseline_fit, dps_sample,
                                estimate_sigma2, hqs_solve, hqs_solve_patched,
                                likelihood_grad, ls_fit, mm_update,
                                mm_update_flat, red_diff_loss)
from patlakdiff.volume import DynamicSeries, PatchLayout, Volume3D


def _windows(m):
    return tuple((60.0 * i, 60.0 * (i + 1)) for i in range(m))


def _series(ys, dims, dose=1.0):
    frames = ys.reshape((ys.shape[0],) + dims)
    return DynamicSeries(frames, _windows(ys.shape[0]), (2.0, 2.0, 2.0), dose)


def _image(xs, dims):
    return ParametricImage.from_stack(xs, dims, (2.0, 2.0, 2.0))


def nonneg_basis(cos=0.6):
    """Five-frame elementwise-nonnegative basis, column cosine = cos."""
    u = np.array([1.0, 1.0, 1.0, 0.0, 0.0]) / np.sqrt(3.0)
    w = np.array([0.0, 0.0, 0.0, 1.0, 1.0]) / np.sqrt(2.0)
    return np.stack([u, cos * u + np.sqrt(1.0 - cos * cos) * w], axis=1)


def positive_basis(rng, m=6):
    B = 0.2 + rng.random((m, 2))
    B[:, 0] = np.sort(B[:, 0])
    return B


# ------------------------------------------------------------------ ls_fit

def test_ls_fit_recovers_exact_data():
    rng = np.random.default_rng(0)
    dims = (3, 2, 2)
    B = positive_basis(rng)
    xs = rng.random((2, 12))
    img = ls_fit(_series(B @ xs, dims), B)
    np.testing.assert_allclose(img.stack(), xs, rtol=1e-11, atol=1e-13)


def test_ls_fit_matches_lstsq_on_noisy_data():
    rng = np.random.default_rng(1)
    dims = (2, 2, 2)
    B = positive_basis(rng)
    ys = rng.normal(size=(6, 8))
    img = ls_fit(_series(ys, dims), B)
    ref = np.stack([np.linalg.lstsq(B, ys[:, j], rcond=None)[0]
                    for j in range(8)], axis=1)
    np.testing.assert_allclose(img.stack(), ref, rtol=1e-10, atol=1e-12)


def test_ls_fit_rejects_collinear_basis():
    B = np.ones((5, 2))
    ys = np.ones((5, 8))
    with pytest.raises(ConfigError):
        ls_fit(_series(ys, (2, 2, 2)), B)


# --------------------------------------------------------- multiplicative

def test_mm_descent_on_least_squares_objective():
    for seed in range(8):
        rng = np.random.default_rng(seed)
        B = positive_basis(rng, m=5)
        ys = rng.random((5, 40)) * 2.0
        xs = 0.1 + rng.random((2, 40))
        prev = 0.5 * np.sum((ys - B @ xs) ** 2)
        for _ in range(30):
            xs = mm_update_flat(xs, None, ys, B, 0.0)
            cur = 0.5 * np.sum((ys - B @ xs) ** 2)
            assert cur <= prev + 1e-9 * max(prev, 1.0)
            prev = cur


def test_mm_descent_on_penalized_objective():
    rng = np.random.default_rng(9)
    B = nonneg_basis()
    ys = rng.random((5, 30))
    vs = 0.2 + rng.random((2, 30))
    xs = 0.1 + rng.random((2, 30))
    lam = 0.7

    def f(x):
        return 0.5 * np.sum((ys - B @ x) ** 2) + 0.5 * lam * np.sum((x - vs) ** 2)

    prev = f(xs)
    for _ in range(40):
        xs = mm_update_flat(xs, vs, ys, B, lam)
        cur = f(xs)
        assert cur <= prev + 1e-9 * max(prev, 1.0)
        prev = cur


def test_mm_fixed_point_at_positive_ls_solution():
    rng = np.random.default_rng(2)
    B = positive_basis(rng)
    xs = 0.5 + rng.random((2, 10))
    ys = B @ xs
    out = mm_update_flat(xs.copy(), None, ys, B, 0.0)
    np.testing.assert_allclose(out, xs, rtol=1e-12)


def test_mm_requires_v_when_penalized():
    B = nonneg_basis()
    with pytest.raises(ConfigError):
        mm_update_flat(np.ones((2, 4)), None, np.ones((5, 4)), B, 0.5)


def test_mm_zero_data_stays_finite_and_tiny():
    B = 1e-4 * nonneg_basis()  # small basis so the denominator hits the floor
    xs = np.zeros((2, 6))
    ys = np.zeros((5, 6))
    stats = {}
    out = mm_update_flat(xs, None, ys, B, 0.0, stats=stats)
    assert np.isfinite(out).all()
    assert (out <= 1e-11).all()
    assert stats["floor_hits"] > 0


def test_mm_wrapper_clips_negative_frames():
    rng = np.random.default_rng(3)
    dims = (2, 2, 2)
    B = nonneg_basis()
    ys = rng.normal(size=(5, 8))  # mixed signs
    x0 = 0.2 + rng.random((2, 8))
    out = mm_update(_image(x0, dims), _series(ys, dims), B)
    ref = mm_update_flat(x0, None, np.clip(ys, 0, None), B, 0.0)
    np.testing.assert_allclose(out.stack(), ref, rtol=1e-13)


def test_baseline_fit_converges_noiseless():
    rng = np.random.default_rng(4)
    dims = (4, 4, 4)
    B = positive_basis(rng, m=8)
    xs = np.zeros((2, 64))
    active = rng.random(64) < 0.6
    xs[0, active] = 0.3 + rng.random(active.sum())
    xs[1, active] = 0.5 + rng.random(active.sum())
    series = _series(B @ xs, dims)
    trace = SolveTrace()
    img = baseline_fit(series, B, iters=600, fwhm_voxels=0.0, trace=trace)
    got = img.stack()
    err = np.abs(got[:, active] - xs[:, active]) / xs[:, active]
    assert err.max() < 1e-3
    assert trace.notes["clipped_values"] == 0
    assert all(s > 0 for s in trace.notes["balance_scale"])


def test_baseline_fit_smoothing_toggle():
    rng = np.random.default_rng(5)
    dims = (6, 6, 6)
    B = positive_basis(rng)
    ys = np.abs(rng.normal(size=(6, 216)))
    series = _series(ys, dims)
    sharp = baseline_fit(series, B, iters=50, fwhm_voxels=0.0)
    nearly = baseline_fit(series, B, iters=50, fwhm_voxels=0.05)
    smooth = baseline_fit(series, B, iters=50, fwhm_voxels=2.0)
    np.testing.assert_array_equal(sharp.stack(), nearly.stack())
    assert np.std(smooth.kappa.data) < np.std(sharp.kappa.data)


# --------------------------------------------------------------- gradients

def test_likelihood_grad_matches_central_differences():
    rng = np.random.default_rng(6)
    dims = (3, 1, 1)
    B = positive_basis(rng, m=4)
    ys = rng.normal(size=(4, 3))
    xs = rng.normal(size=(2, 3))
    sigma2 = 0.35
    series = _series(ys, dims)
    grad = likelihood_grad(_image(xs, dims), series, B, sigma2).stack()

    def f(x):
        return np.sum((ys - B @ x) ** 2) / sigma2

    h = 1e-6
    for c in range(2):
        for j in range(3):
            e = np.zeros_like(xs)
            e[c, j] = h
            fd = (f(xs + e) - f(xs - e)) / (2 * h)
            assert grad[c, j] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_likelihood_grad_zero_at_ls_solution():
    rng = np.random.default_rng(7)
    dims = (2, 2, 1)
    B = positive_basis(rng)
    xs = rng.random((2, 4))
    series = _series(B @ xs, dims)
    g = likelihood_grad(_image(xs, dims), series, B, 1.0).stack()
    np.testing.assert_allclose(g, 0.0, atol=1e-10)
    with pytest.raises(ConfigError):
        likelihood_grad(_image(xs, dims), series, B, 0.0)


class _ConstantScore:
    """Score model whose output ignores its input (freezes the residual)."""

    def __init__(self, value):
        self.value = np.asarray(value)

    def epsilon_hat(self, x_t, t):
        return self.value


def test_red_diff_grad_matches_fd_for_frozen_score():
    rng = np.random.default_rng(8)
    sched = make_schedule(50)
    shape = (2, 3, 1, 1)
    x = rng.normal(size=shape)
    v = rng.normal(size=shape)
    eps = rng.normal(size=shape)
    score = _ConstantScore(rng.normal(size=shape))
    lam = 0.4
    t = 20
    _, grad = red_diff_loss(x, v, t, eps, score, lam, sched)
    h = 1e-6
    it = np.nditer(v, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        vp = v.copy()
        vp[idx] += h
        vm = v.copy()
        vm[idx] -= h
        lp, _ = red_diff_loss(x, vp, t, eps, score, lam, sched)
        lm, _ = red_diff_loss(x, vm, t, eps, score, lam, sched)
        fd = (lp - lm) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-6, abs=1e-7)


def test_red_diff_components():
    rng = np.random.default_rng(10)
    sched = make_schedule(100)
    shape = (2, 2, 2, 2)
    x = rng.normal(size=shape)
    v = rng.normal(size=shape)
    eps = rng.normal(size=shape)
    const = rng.normal(size=shape)
    t = 40
    loss, grad = red_diff_loss(x, v, t, eps, _ConstantScore(const), 0.3, sched)
    ab = sched.alpha_bar[t - 1]
    w = np.sqrt((1 - ab) / ab)
    expect_grad = 0.3 * (v - x) + w * (const - eps)
    np.testing.assert_allclose(grad, expect_grad, rtol=1e-12)
    expect_loss = 0.15 * np.sum((x - v) ** 2) + w * np.sum((const - eps) * v)
    assert loss == pytest.approx(expect_loss, rel=1e-12)


# ------------------------------------------------------------- dps sampler

def _gaussian_instance(seed, dims=(8, 8, 8), cos=0.6, mu0=1.0, s2=0.09,
                       sig2=0.02):
    rng = np.random.default_rng(seed)
    J = int(np.prod(dims))
    B = nonneg_basis(cos)
    x_true = mu0 + np.sqrt(s2) * rng.standard_normal((2, J))
    ys = B @ x_true + np.sqrt(sig2) * rng.standard_normal((5, J))
    return B, ys, x_true


def test_dps_unconditional_matches_plain_reverse_chain():
    rng = np.random.default_rng(11)
    dims = (3, 3, 3)
    B = nonneg_basis()
    ys = rng.random((5, 27))
    sched = make_schedule(60)
    score = GaussianPriorScore(0.5, 0.2, sched)
    img, _ = dps_sample(_series(ys, dims), B, score, sched,
                        sigma2=np.inf, seed=123)
    ref_rng = np.random.default_rng(123)
    shape = (2,) + dims
    x = ref_rng.standard_normal(shape)
    for t in range(sched.T, 0, -1):
        z = ref_rng.standard_normal(shape) if t > 1 else 0.0
        x = reverse_step(x, t, score, z, sched)
    np.testing.assert_array_equal(img.stack(), x.reshape(2, -1))


def test_dps_posterior_mean_on_conjugate_instance():
    # beta_end is kept low so the guided chain is uniformly contractive:
    # the per-step correction gain 2*beta_tilde/sigma2*eig(B^T B) must stay
    # inside the contraction budget or the norm guard would (rightly) fire.
    sched = make_schedule(600, 1e-4, 0.008)
    mu0, s2, sig2 = 1.0, 0.09, 0.02
    B, ys, _ = _gaussian_instance(21, sig2=sig2)
    series = _series(ys, (8, 8, 8))
    score = GaussianPriorScore(mu0, s2, sched)
    acc = np.zeros((2, 512))
    n_rep = 6
    for r in range(n_rep):
        img, _ = dps_sample(series, B, score, sched, sigma2=sig2, seed=100 + r)
        acc += img.stack()
    mean = acc / n_rep
    G = B.T @ B
    oracle = np.linalg.solve(G / sig2 + np.eye(2) / s2,
                             B.T @ ys / sig2 + mu0 / s2)
    rel = np.linalg.norm(mean - oracle) / np.linalg.norm(oracle)
    assert rel < 0.2


def test_dps_divergence_guard():
    rng = np.random.default_rng(12)
    dims = (3, 3, 3)
    B = nonneg_basis()
    ys = 100.0 * rng.random((5, 27))
    sched = make_schedule(100)
    score = GaussianPriorScore(0.0, 1.0, sched)
    with pytest.raises(DivergenceError) as exc:
        dps_sample(_series(ys, dims), B, score, sched, sigma2=1e-10, seed=0)
    assert exc.value.trace is not None
    assert "diverged_at_t" in exc.value.trace.notes


def test_dps_records_trace():
    B, ys, _ = _gaussian_instance(13)
    sched = make_schedule(120)
    score = GaussianPriorScore(1.0, 0.09, sched)
    img, trace = dps_sample(_series(ys, (8, 8, 8)), B, score, sched,
                            sigma2=0.05, seed=5, record_every=40)
    assert np.isfinite(img.stack()).all()
    assert trace.notes["sigma2"] == 0.05
    ts = [t for t, _ in trace.notes["checkpoints"]]
    assert 1 in ts and 40 in ts and 120 in ts


# ------------------------------------------------------------- hqs solver

def _clipped_ls_init(series, B, dims):
    xs = np.clip(ls_fit(series, B).stack(), 1e-12, None)
    return _image(xs, dims)


def test_hqs_reaches_conjugate_map():
    # frozen linear-Gaussian instance with a closed-form MAP oracle
    mu0, s2, sig2 = 1.0, 0.09, 0.01
    dims = (8, 8, 8)
    B, ys, _ = _gaussian_instance(42, sig2=sig2)
    yc = np.clip(ys, 0.0, None)
    series = _series(yc, dims)
    sched = make_schedule(1000)
    score = GaussianPriorScore(mu0, s2, sched)
    cfg = SolverConfig(lam=0.2, max_it=40, sub_it1=5, sub_it2=10, lr=0.005,
                       channel_scale="none")
    init = _clipped_ls_init(series, B, dims)
    img, trace = hqs_solve(series, B, score, sched, cfg, seed=7, init=init)
    G = B.T @ B
    rho = sig2 / s2
    oracle = np.linalg.solve(G + rho * np.eye(2), B.T @ yc + rho * mu0)
    rel = np.linalg.norm(img.stack() - oracle) / np.linalg.norm(oracle)
    assert rel < 0.05
    assert trace.n_iterations == 40


def test_hqs_deterministic_for_fixed_seed():
    dims = (4, 4, 4)
    B, ys, _ = _gaussian_instance(14, dims=dims)
    series = _series(np.clip(ys, 0, None), dims)
    sched = make_schedule(200)
    score = GaussianPriorScore(1.0, 0.09, sched)
    cfg = SolverConfig(max_it=3, channel_scale="none")
    init = _clipped_ls_init(series, B, dims)
    a, _ = hqs_solve(series, B, score, sched, cfg, seed=3, init=init)
    b, _ = hqs_solve(series, B, score, sched, cfg, seed=3, init=init)
    np.testing.assert_array_equal(a.stack(), b.stack())
    c, _ = hqs_solve(series, B, score, sched, cfg, seed=4, init=init)
    assert np.any(c.stack() != a.stack())


def test_hqs_trace_lengths_and_improvement():
    dims = (6, 6, 6)
    B, ys, _ = _gaussian_instance(15, dims=dims)
    series = _series(np.clip(ys, 0, None), dims)
    sched = make_schedule(300)
    score = GaussianPriorScore(1.0, 0.09, sched)
    cfg = SolverConfig(max_it=8, channel_scale="none")
    init = _clipped_ls_init(series, B, dims)
    img, trace = hqs_solve(series, B, score, sched, cfg, seed=1, init=init)
    for lst in (trace.data_fidelity, trace.penalty, trace.red_value,
                trace.wall_time_s, trace.floor_hits):
        assert len(lst) == 8
    assert all(w > 0 for w in trace.wall_time_s)
    assert trace.notes["taus"][0] > trace.notes["taus"][-1] >= 1
    assert np.isfinite(img.stack()).all()


def test_hqs_patched_single_patch_equals_direct():
    dims = (6, 6, 8)
    B, ys, _ = _gaussian_instance(16, dims=dims)
    series = _series(np.clip(ys, 0, None), dims)
    sched = make_schedule(150)
    score = GaussianPriorScore(1.0, 0.09, sched)
    cfg = SolverConfig(max_it=2, init_iters=40, channel_scale="auto")
    layout = PatchLayout(dims, (0, 0, 0), [(0, 0, 0)])
    merged = hqs_solve_patched(series, B, score, sched, layout, cfg, seed=9)

    init = baseline_fit(series, B, iters=40, fwhm_voxels=cfg.init_fwhm_voxels)
    scale = _resolve_scale("auto", init)
    cfg2 = SolverConfig(max_it=2, init_iters=40,
                        channel_scale=(float(scale[0]), float(scale[1])))
    direct, _ = hqs_solve(series, B, score, sched, cfg2, seed=(9, 0),
                          init=init)
    np.testing.assert_array_equal(merged.stack(), direct.stack())


def test_hqs_patched_two_slabs_close_to_direct():
    dims = (6, 6, 8)
    B, ys, _ = _gaussian_instance(17, dims=dims)
    series = _series(np.clip(ys, 0, None), dims)
    sched = make_schedule(150)
    score = GaussianPriorScore(1.0, 0.09, sched)
    cfg = SolverConfig(max_it=4, init_iters=60, channel_scale="auto")
    from patlakdiff.volume import slab_layout
    layout = slab_layout(dims, 2, 2, axis=2)
    merged = hqs_solve_patched(series, B, score, sched, layout, cfg, seed=2)
    assert merged.dims == dims
    assert np.isfinite(merged.stack()).all()


# ------------------------------------------------------------- small utils

def test_stride_taus_default_schedule():
    sched = make_schedule(1000)
    taus = _stride_taus(sched, SolverConfig())
    assert taus.tolist() == [300, 270, 240, 210, 180, 150, 120, 90, 60, 30]


def test_stride_taus_small_t_never_zero():
    sched = make_schedule(10)
    taus = _stride_taus(sched, SolverConfig())
    assert taus.min() >= 1
    assert taus.max() <= 10


def test_estimate_sigma2_from_corner_noise():
    rng = np.random.default_rng(18)
    dims = (24, 24, 24)
    frames = np.zeros((3,) + dims)
    frames[-1] = 0.3 * rng.standard_normal(dims)
    series = DynamicSeries(frames, _windows(3), (2.0,) * 3)
    est = estimate_sigma2(series)
    assert est == pytest.approx(0.09, rel=0.25)
    clean = DynamicSeries(np.zeros((2,) + dims), _windows(2), (2.0,) * 3)
    assert estimate_sigma2(clean) == 1e-12


def test_resolve_scale_variants():
    np.testing.assert_array_equal(_resolve_scale("none", None), [1.0, 1.0])
    np.testing.assert_array_equal(_resolve_scale((2.0, 3.0), None), [2.0, 3.0])
    with pytest.raises(ConfigError):
        _resolve_scale("bogus", None)
    with pytest.raises(ConfigError):
        _resolve_scale((1.0, -1.0), None)
    with pytest.raises(ConfigError):
        _resolve_scale("auto", None)
    dims = (4, 4, 4)
    xs = np.zeros((2, 64))
    xs[0, :8] = 0.004
    xs[1, :8] = 0.3
    scale = _resolve_scale("auto", _image(xs, dims))
    assert scale[0] == pytest.approx(0.004)
    assert scale[1] == pytest.approx(0.3)


def test_solver_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig(lam=-0.1)
    with pytest.raises(ConfigError):
        SolverConfig(max_it=0)
    with pytest.raises(ConfigError):
        SolverConfig(lr=0.0)
    with pytest.raises(ConfigError):
        SolverConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        SolverConfig(sigma2=-1.0)
    with pytest.raises(ConfigError):
        SolverConfig(t_start_frac=0.0)

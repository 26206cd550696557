import numpy as np
import pytest

from patlakdiff.errors import ConfigError
from patlakdiff.kinetics import PatlakBasis, forward_project
from patlakdiff.phantom import (
    Ellipsoid, NoiseModel, PhantomSpec, build_phantom, desk_phantom,
    synthesize_series,
)


def _basis(M=5):
    wins = tuple((2100.0 + 300.0 * m, 2400.0 + 300.0 * m) for m in range(M))
    B = np.column_stack([np.linspace(10.0, 14.0, M), np.linspace(2.0, 1.5, M)])
    return PatlakBasis(B, 1200.0, wins)


def test_empty_spec_gives_uniform_background():
    spec = PhantomSpec((8, 8, 8), background=(0.5, 1.5))
    img, labels = build_phantom(spec)
    assert np.all(img.kappa.data == 0.5)
    assert np.all(img.b.data == 1.5)
    assert np.all(labels.data == 0)


def test_zero_radius_ellipsoid_paints_nothing():
    spec = PhantomSpec((8, 8, 8), background=(0.1, 0.2), ellipsoids=(
        Ellipsoid((4.0, 4.0, 4.0), (0.0, 0.0, 0.0), 9.0, 9.0),))
    img, labels = build_phantom(spec)
    assert np.all(img.kappa.data == 0.1)
    assert np.all(labels.data == 0)


def test_overlap_override_matches_membership_oracle():
    e1 = Ellipsoid((7.0, 8.0, 8.0), (5.0, 4.0, 4.0), 1.0, 10.0)
    e2 = Ellipsoid((10.0, 8.0, 8.0), (4.0, 5.0, 4.0), 2.0, 20.0, label="lesion")
    spec = PhantomSpec((16, 16, 16), background=(0.0, 0.0), ellipsoids=(e1, e2))
    img, labels = build_phantom(spec)
    for idx in np.ndindex(16, 16, 16):
        inside = []
        for e in (e1, e2):
            d2 = sum(((idx[a] - e.center[a]) / e.radii[a]) ** 2 for a in range(3))
            inside.append(d2 <= 1.0)
        if inside[1]:
            expected = (2.0, 20.0, 2)
        elif inside[0]:
            expected = (1.0, 10.0, 1)
        else:
            expected = (0.0, 0.0, 0)
        assert (img.kappa.data[idx], img.b.data[idx], labels.data[idx]) == expected


def test_out_of_bounds_ellipsoid_rejected():
    spec = PhantomSpec((8, 8, 8), ellipsoids=(
        Ellipsoid((7.0, 4.0, 4.0), (3.0, 1.0, 1.0), 1.0, 1.0),))
    with pytest.raises(ConfigError):
        build_phantom(spec)


def test_region_ids_by_label():
    spec = desk_phantom()
    img, labels = build_phantom(spec)
    ref_ids = spec.region_ids("reference")
    lesion_ids = spec.region_ids("lesion")
    assert len(ref_ids) == 1 and len(lesion_ids) == 3
    for rid in ref_ids + lesion_ids:
        assert np.any(labels.data == rid)
    # lesions carry higher slope than the reference organ
    ref_kappa = img.kappa.data[labels.data == ref_ids[0]].mean()
    for rid in lesion_ids:
        assert img.kappa.data[labels.data == rid].mean() > ref_kappa


def _small_phantom():
    spec = PhantomSpec((24, 24, 32), background=(0.004, 0.3), ellipsoids=(
        Ellipsoid((12.0, 12.0, 14.0), (7.0, 6.0, 8.0), 0.008, 0.6,
                  label="reference"),
        Ellipsoid((14.0, 12.0, 14.0), (2.5, 2.5, 2.5), 0.03, 0.6,
                  label="lesion"),
    ))
    return build_phantom(spec)[0]


def test_noiseless_synthesis_equals_forward_projection():
    img = _small_phantom()
    basis = _basis()
    noise = NoiseModel(base_sigma=0.0)
    series = synthesize_series(img, basis, noise, seed=0)
    assert np.array_equal(series.frames, forward_project(img, basis).frames)


def test_noise_determinism_and_dose_scaling():
    img = _small_phantom()
    basis = _basis()
    full = NoiseModel(base_sigma=0.2, dose_fraction=1.0)
    low = NoiseModel(base_sigma=0.2, dose_fraction=0.1)
    s1 = synthesize_series(img, basis, full, seed=42)
    s2 = synthesize_series(img, basis, full, seed=42)
    assert np.array_equal(s1.frames, s2.frames)
    assert s1.frames.dtype == s2.frames.dtype

    clean = forward_project(img, basis).frames
    noisy = synthesize_series(img, basis, low, seed=7)
    assert noisy.dose_fraction == 0.1
    resid_full = s1.frames - clean
    resid_low = noisy.frames - clean
    ratio = resid_low.std() / resid_full.std()
    assert ratio == pytest.approx(np.sqrt(10.0), rel=0.05)


def test_frame_sigma_duration_scaling():
    nm = NoiseModel(base_sigma=1.0, dose_fraction=0.25, dt_ref_s=300.0)
    assert nm.frame_sigma(300.0) == pytest.approx(2.0)
    assert nm.frame_sigma(75.0) == pytest.approx(4.0)
    flat = NoiseModel(base_sigma=1.0, dose_fraction=0.25,
                      duration_scaling=False)
    assert flat.frame_sigma(75.0) == pytest.approx(2.0)


def test_noise_model_validation():
    with pytest.raises(ConfigError):
        NoiseModel(base_sigma=-1.0)
    with pytest.raises(ConfigError):
        NoiseModel(base_sigma=1.0, dose_fraction=0.0)
    with pytest.raises(ConfigError):
        NoiseModel(base_sigma=1.0, kind="poisson")

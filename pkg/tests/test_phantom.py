import json
import math
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from dpetki.blood import FengParams, feng_input
from dpetki.phantom import (
    PhantomConfig,
    build_atlas,
    build_carotids,
    gaussian_blur,
    generate_phantom,
    write_bundle,
)


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(seed=7)


@pytest.fixture(scope="module")
def clean_phantom():
    return generate_phantom(PhantomConfig(psf_sigma_mm=0.0, noise_cv=0.0))


class TestFengInput:
    """Test the analytic plasma input"""

    def test_zero_at_onset(self):
        """Test that the curve is 0 at t = tau for any parameters"""
        for tau in (0.0, 0.5, 1.3):
            params = FengParams(tau=tau)
            assert feng_input(params, tau) == 0.0

    def test_zero_before_onset(self):
        """Test that the curve is 0 before tau"""
        values = feng_input(FengParams(), np.linspace(0.0, 0.7, 20))
        assert np.all(values == 0.0)

    def test_single_exponential_peak(self):
        """Test the closed-form peak of A1 (t - tau) e^(lambda1 (t - tau))"""
        params = FengParams(A2=0.0, A3=0.0)
        t = np.linspace(0.0, 5.0, 200001)
        values = feng_input(params, t)
        expected_time = params.tau - 1.0 / params.lambda1
        expected_peak = -params.A1 / (params.lambda1 * math.e)
        assert abs(t[np.argmax(values)] - expected_time) < 1e-4
        assert values.max() == pytest.approx(expected_peak, rel=1e-8)

    def test_default_curve_is_non_negative(self):
        """Test a dense scan over the first hour"""
        values = feng_input(FengParams(), np.linspace(0.0, 60.0, 60001))
        # rounding just after onset may give values around -1e-13
        assert values.min() > -1e-9

    def test_scalar_returns_float(self):
        """Test the scalar call form"""
        assert isinstance(feng_input(FengParams(), 2.0), float)

    def test_rates_must_be_ordered(self):
        """Test that lambda1 < lambda2 < lambda3 < 0 is enforced"""
        with pytest.raises(ValidationError):
            FengParams(lambda1=-0.1, lambda2=-0.5)


class TestGaussianBlur:
    """Test the point-spread blur"""

    def test_zero_sigma_is_identity(self):
        """Test that sigma 0 returns the same values"""
        vol = np.random.default_rng(0).uniform(size=(8, 8, 8))
        assert np.array_equal(gaussian_blur(vol, 0.0), vol)

    def test_unit_voxel_sums_to_one(self):
        """Test kernel normalization on a single interior voxel"""
        vol = np.zeros((21, 21, 21))
        vol[10, 10, 10] = 1.0
        assert gaussian_blur(vol, 1.0).sum() == pytest.approx(1.0, abs=1e-6)

    def test_interior_mass_is_preserved(self):
        """Test blur mass conservation on activity away from the edges"""
        frame = np.zeros((40, 40, 40))
        frame[12:28, 12:28, 12:28] = np.random.default_rng(1).uniform(0.0, 10.0, (16, 16, 16))
        blurred = gaussian_blur(frame, 2.0, (2.0, 2.0, 2.0))
        assert blurred.sum() == pytest.approx(frame.sum(), rel=1e-6)

    def test_anisotropic_voxels(self):
        """Test that sigma is converted per axis"""
        vol = np.zeros((21, 21, 21))
        vol[10, 10, 10] = 1.0
        blurred = gaussian_blur(vol, 2.0, (1.0, 1.0, 4.0))
        assert blurred[10, 11, 10] > blurred[10, 10, 11]


class TestPhantomGeometry:
    """Test atlas and carotid construction"""

    def test_atlas_has_36_named_regions(self):
        """Test the default atlas layout"""
        atlas = build_atlas(PhantomConfig())
        assert len(atlas.table) == 36
        assert atlas.table[1].name == "left_01"
        assert atlas.table[19].name == "right_01"
        assert {r.side for r in atlas.table.values()} == {"left", "right"}

    def test_carotids_are_two_cylinders(self):
        """Test the default carotid voxel count"""
        cfg = PhantomConfig()
        carotid = build_carotids(cfg)
        # radius 2.5 mm on 2 mm voxels covers a plus-shaped 5-voxel disk
        assert carotid.count == 2 * 5 * (cfg.carotid_z[1] - cfg.carotid_z[0] + 1)

    def test_zero_radius_is_rejected(self):
        """Test that the radius must be positive"""
        with pytest.raises(ValidationError) as info:
            PhantomConfig(carotid_radius_mm=0.0)
        assert "carotid_radius_mm" in str(info.value)

    def test_overlapping_boxes_are_rejected(self):
        """Test that the neck and brain boxes may not overlap"""
        from dpetki.volume import Box
        with pytest.raises(ValidationError):
            PhantomConfig(brain_box=Box(lo=(6, 6, 20), hi=(57, 57, 46)))


class TestGeneratePhantom:
    """Test synthetic volume generation"""

    def test_shape_and_schedule(self, phantom):
        """Test the default dims and 38-frame schedule"""
        assert phantom.volume.dims == (64, 64, 48, 38)
        assert len(phantom.truth_cp) == 38

    def test_clean_carotid_voxels_equal_input(self, clean_phantom):
        """Test that without blur and noise each carotid voxel carries the input"""
        tacs = clean_phantom.volume.data[clean_phantom.carotid.data]
        for tac in tacs:
            assert np.array_equal(tac, clean_phantom.truth_cp.values)

    def test_deterministic(self, phantom):
        """Test that the same seed gives identical volumes"""
        again = generate_phantom(seed=7)
        assert np.array_equal(again.volume.data, phantom.volume.data)

    def test_thread_count_does_not_matter(self, phantom):
        """Test that generating with several threads gives the same bytes"""
        threaded = generate_phantom(PhantomConfig(threads=4), seed=7)
        assert np.array_equal(threaded.volume.data, phantom.volume.data)

    def test_seed_changes_noise(self, phantom):
        """Test that a different seed changes the volume"""
        other = generate_phantom(seed=8)
        assert not np.array_equal(other.volume.data, phantom.volume.data)

    def test_partial_volume_lowers_peak(self, phantom):
        """Test that blur lowers the carotid mean peak below the input peak"""
        mean = phantom.volume.data[phantom.carotid.data].mean(axis=0)
        assert mean.max() < phantom.truth_cp.values.max()

    def test_partial_volume_is_monotone_in_sigma(self):
        """Test that the carotid peak does not grow as sigma increases"""
        peaks = []
        for sigma in (0.0, 1.0, 2.0, 3.0):
            bundle = generate_phantom(PhantomConfig(psf_sigma_mm=sigma, noise_cv=0.0))
            peaks.append(bundle.volume.data[bundle.carotid.data].mean(axis=0).max())
        assert all(a >= b for a, b in zip(peaks, peaks[1:]))

    def test_hypo_region_truth(self, phantom):
        """Test that the seeded region has 60% of the normal influx"""
        assert phantom.truth_ki("left_14") == pytest.approx(0.6 * phantom.truth_ki("left_01"))
        assert phantom.truth_ki("left_01") == pytest.approx(0.025)

    def test_bolus_frame_is_input_peak(self, phantom):
        """Test that bolus_frame points at the input maximum"""
        assert phantom.bolus_frame == int(np.argmax(phantom.truth_cp.values))


class TestWriteBundle:
    """Test phantom artifacts on disk"""

    def test_five_artifacts(self, phantom, tmp_path):
        """Test that every artifact is written"""
        artifacts = write_bundle(phantom, tmp_path)
        assert set(artifacts) == {"volume", "carotid_truth", "atlas", "truth_cp", "truth"}
        for paths in artifacts.values():
            for path in paths:
                assert Path(path).is_file()

    def test_truth_json(self, phantom, tmp_path):
        """Test the truth summary"""
        write_bundle(phantom, tmp_path)
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert truth["hypo_region"] == "left_14"
        assert truth["seed"] == 7
        assert truth["regions"]["left_01"]["ki"] == pytest.approx(0.025)

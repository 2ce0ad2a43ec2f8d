"""Tests for the synthetic spine phantom generator and its ground truth."""

import dataclasses

import numpy as np
import pytest

from vertseg.phantom import (
    PhantomSpec,
    VertebraSpec,
    add_noise,
    default_spec,
    generate_phantom,
)


ANALYTIC_CM3 = np.pi * 16.0 * 12.0 * 21.0 / 1000.0  # (18-2)(14-2)(25-4) core


class TestGroundTruth:
    def test_densities_exact(self, phantom0):
        _, _, truth = phantom0
        got = [v.trabecular_density for v in truth.vertebrae]
        assert got == [50.0, 100.0, 200.0]

    def test_analytic_core_volume(self, phantom0):
        _, _, truth = phantom0
        for v in truth.vertebrae:
            assert v.trabecular_volume_cm3 == pytest.approx(ANALYTIC_CM3,
                                                            rel=5e-3)

    def test_masks_disjoint_and_nested(self, phantom0):
        _, _, truth = phantom0
        for v in truth.vertebrae:
            assert not (v.core_mask & ~v.body_mask).any()
            assert not (v.arch_mask & v.body_mask).any()

    def test_centers_match_spec(self, phantom0):
        spec, _, truth = phantom0
        for vs, vt in zip(spec.vertebrae, truth.vertebrae):
            assert vt.center == vs.center


class TestGeneratePhantom:
    def test_core_mean_is_exact_on_interior(self, phantom0):
        _, volume, truth = phantom0
        for v in truth.vertebrae:
            vals = volume.values[v.core_mask]
            assert float(vals.mean()) == v.trabecular_density
            assert float(vals.std()) == 0.0

    def test_core_mean_within_1pct_including_boundary(self, phantom0):
        # the truth mask is conservative (every voxel box inside the core),
        # so even its boundary layer stays within 1% of the nominal density
        from scipy import ndimage
        _, volume, truth = phantom0
        for v in truth.vertebrae:
            interior = ndimage.binary_erosion(v.core_mask)
            inner_vals = volume.values[interior]
            assert float(inner_vals.mean()) == v.trabecular_density
            full = float(volume.values[v.core_mask].mean())
            assert abs(full - v.trabecular_density) <= \
                0.01 * v.trabecular_density

    def test_deterministic(self):
        spec = default_spec(noise_sigma=50.0, seed=7)
        v1, _ = generate_phantom(spec)
        v2, _ = generate_phantom(spec)
        np.testing.assert_array_equal(v1.values, v2.values)

    def test_supersampling_changes_only_boundary_voxels(self):
        base = default_spec()
        s1 = dataclasses.replace(base, supersampling=1)
        s4 = dataclasses.replace(base, supersampling=4)
        v1, _ = generate_phantom(s1)
        v4, _ = generate_phantom(s4)
        diff = v1.values != v4.values
        # differing voxels must touch a material interface: their 6-neighbors
        # are not all equal in either rendering
        from scipy import ndimage
        grad = ndimage.maximum_filter(v4.values, size=3) != \
            ndimage.minimum_filter(v4.values, size=3)
        assert not (diff & ~grad).any()
        # and the interiors agree somewhere substantial
        assert (~diff).sum() > 0.8 * diff.size

    def test_truth_recorded_before_noise(self):
        clean, t0 = generate_phantom(default_spec(noise_sigma=0.0))
        noisy, t1 = generate_phantom(default_spec(noise_sigma=100.0, seed=3))
        for a, b in zip(t0.vertebrae, t1.vertebrae):
            assert a.trabecular_volume_cm3 == b.trabecular_volume_cm3
            np.testing.assert_array_equal(a.core_mask, b.core_mask)
        assert (clean.values != noisy.values).any()


class TestAddNoise:
    def test_sigma_zero_identity(self, phantom0):
        _, volume, _ = phantom0
        assert add_noise(volume, 0.0, 5) is volume

    def test_sample_sd_matches_sigma(self):
        from vertseg.volgrid import VoxelVolume
        vol = VoxelVolume(np.zeros((100, 100, 100), dtype=np.int16),
                          (1.0, 1.0, 1.0))
        noisy = add_noise(vol, 50.0, 11)
        sd = float(noisy.values.astype(np.float64).std())
        assert 47.5 <= sd <= 52.5
        assert abs(float(noisy.values.mean())) < 1.0

    def test_same_seed_deterministic(self, phantom0):
        _, volume, _ = phantom0
        a = add_noise(volume, 75.0, 42)
        b = add_noise(volume, 75.0, 42)
        np.testing.assert_array_equal(a.values, b.values)
        c = add_noise(volume, 75.0, 43)
        assert (a.values != c.values).any()

    def test_negative_sigma_rejected(self, phantom0):
        _, volume, _ = phantom0
        with pytest.raises(ValueError):
            add_noise(volume, -1.0, 0)


class TestSpecValidation:
    def test_round_trip_json(self):
        spec = default_spec(noise_sigma=50.0, seed=9)
        again = PhantomSpec.from_json(spec.to_json())
        assert again == spec

    def test_shell_thicker_than_half_axis(self):
        with pytest.raises(ValueError):
            PhantomSpec(vertebrae=(VertebraSpec(
                center=(0, 0, 0), half_axes=(10.0, 8.0), shell_thickness=9.0),))

    def test_density_ordering(self):
        with pytest.raises(ValueError):
            PhantomSpec(vertebrae=(VertebraSpec(
                center=(0, 0, 0), trabecular_density=950.0),))
        with pytest.raises(ValueError):
            PhantomSpec(vertebrae=(VertebraSpec(
                center=(0, 0, 0), trabecular_density=-10.0),),
                background_density=0.0)

    def test_center_spacing_enforced(self):
        verts = (VertebraSpec(center=(0, 0, 0)),
                 VertebraSpec(center=(0, 0, 20.0)))
        with pytest.raises(ValueError):
            PhantomSpec(vertebrae=verts)

    def test_z_ordering_enforced(self):
        verts = (VertebraSpec(center=(0, 0, 30.0)),
                 VertebraSpec(center=(0, 0, 0.0)))
        with pytest.raises(ValueError):
            PhantomSpec(vertebrae=verts)

    def test_supersampling_and_sigma_validated(self):
        v = (VertebraSpec(center=(0, 0, 0)),)
        with pytest.raises(ValueError):
            PhantomSpec(vertebrae=v, supersampling=0)
        with pytest.raises(ValueError):
            PhantomSpec(vertebrae=v, noise_sigma=-5.0)
        with pytest.raises(ValueError):
            PhantomSpec(vertebrae=())

"""Tests for the segmentation pipeline stages and the per-vertebra driver."""

import numpy as np
import pytest
from scipy import ndimage

from vertseg.constraints import ConstraintRegion, Plane
from vertseg.mesh import icosphere
from vertseg.pipeline import (
    EmptySeedError,
    PipelineParams,
    StageError,
    VertebraResult,
    collect_seeds,
    cut_processes,
    extract_trabecular,
    grow,
    segment_with_region,
)
from vertseg.threshold import GaussianPair, UnimodalHistogramError
from vertseg.volgrid import VoxelVolume

PAIR = GaussianPair(0.0, 10.0, 0.5, 400.0, 30.0, 0.5)


def ball_volume(dims, center, r_in, r_out, soft=0, bone=400):
    idx = np.indices(dims)
    r = np.sqrt(((idx - np.asarray(center)[:, None, None, None]) ** 2
                 ).sum(axis=0))
    vals = np.full(dims, soft, dtype=np.int16)
    vals[(r >= r_in) & (r <= r_out)] = bone
    return VoxelVolume(vals, (1.0, 1.0, 1.0)), r


def box_region(center, radius, z_lo, z_hi):
    return ConstraintRegion(
        center=tuple(center), axis=(0.0, 0.0, 1.0), radius=float(radius),
        cap_lo=Plane((center[0], center[1], z_lo), (0.0, 0.0, 1.0)),
        cap_hi=Plane((center[0], center[1], z_hi), (0.0, 0.0, -1.0)),
        canal=None)


class TestCollectSeeds:
    def test_surface_voxels_on_shell(self):
        vol, r = ball_volume((40, 40, 40), (20, 20, 20), 12, 15)
        mesh = icosphere((20.0, 20.0, 20.0), 13.0, 2)
        seeds = collect_seeds(mesh, vol, PAIR)
        rad = np.sqrt(((seeds - 20.0) ** 2).sum(axis=1))
        near_shell = (rad >= 11.0) & (rad <= 16.0)
        assert near_shell.mean() >= 0.9
        assert len(np.unique(seeds, axis=0)) == len(seeds)

    def test_soft_surface_raises(self):
        vol = VoxelVolume(np.zeros((30, 30, 30), dtype=np.int16),
                          (1.0, 1.0, 1.0))
        mesh = icosphere((15.0, 15.0, 15.0), 8.0, 1)
        with pytest.raises(EmptySeedError):
            collect_seeds(mesh, vol, PAIR)


class TestGrow:
    def test_grows_connected_bone_only(self):
        dims = (50, 30, 30)
        vals = np.zeros(dims, dtype=np.int16)
        idx = np.indices(dims)
        ra = np.sqrt(((idx - np.array([15, 15, 15])[:, None, None, None]) ** 2
                      ).sum(axis=0))
        rb = np.sqrt(((idx - np.array([38, 15, 15])[:, None, None, None]) ** 2
                      ).sum(axis=0))
        vals[ra <= 8] = 400
        vals[rb <= 5] = 400    # disconnected second blob
        vol = VoxelVolume(vals, (1.0, 1.0, 1.0))
        region = box_region((25.0, 15.0, 15.0), 30.0, 1.0, 28.0)
        grown = grow(vol, np.array([[15, 15, 15]]), region, PAIR,
                     close_radius_voxels=1.0)
        assert grown[15, 15, 15]
        assert (grown & (ra <= 7)).sum() == (ra <= 7).sum()
        assert not (grown & (rb <= 5)).any()

    def test_result_stays_in_region(self):
        dims = (40, 40, 40)
        vals = np.full(dims, 400, dtype=np.int16)  # wall-to-wall bone
        vol = VoxelVolume(vals, (1.0, 1.0, 1.0))
        region = box_region((20.0, 20.0, 20.0), 10.0, 10.0, 30.0)
        grown = grow(vol, np.array([[20, 20, 20]]), region, PAIR)
        pts = np.argwhere(grown).astype(np.float64)
        assert region.contains_points(pts).all()

    def test_bridges_shell_defect(self):
        # a punctured hollow shell must come back closed and filled
        vol, r = ball_volume((40, 40, 40), (20, 20, 20), 10, 13)
        vals = vol.values.copy()
        vals[20, 20, 30:34] = 0  # channel through the wall
        vol = VoxelVolume(vals, (1.0, 1.0, 1.0))
        region = box_region((20.0, 20.0, 20.0), 19.0, 1.0, 39.0)
        grown = grow(vol, np.array([[20, 31, 20]]), region, PAIR,
                     close_radius_voxels=2.0)
        interior = r <= 9
        assert (grown & interior).sum() == interior.sum()

    def test_no_seeds_raises(self):
        vol = VoxelVolume(np.zeros((10, 10, 10), dtype=np.int16),
                          (1.0, 1.0, 1.0))
        region = box_region((5.0, 5.0, 5.0), 4.0, 1.0, 9.0)
        with pytest.raises(EmptySeedError):
            grow(vol, np.zeros((0, 3), dtype=int), region, PAIR)
        with pytest.raises(EmptySeedError):
            grow(vol, np.array([[5, 5, 5]]), region, PAIR)


def solid_ball_mask(dims, center, radius):
    idx = np.indices(dims)
    r2 = ((idx - np.asarray(center)[:, None, None, None]) ** 2).sum(axis=0)
    return r2 <= radius ** 2


class TestCutProcesses:
    def test_single_ball_uncut(self):
        mask = solid_ball_mask((30, 30, 30), (15, 15, 15), 9)
        body, process, cut = cut_processes(mask, (15.0, 15.0, 15.0),
                                           (1.0, 1.0, 1.0))
        np.testing.assert_array_equal(body, mask)
        assert not process.any() and not cut.any()

    def test_dumbbell_split_at_neck(self):
        dims = (60, 30, 30)
        big = solid_ball_mask(dims, (18, 15, 15), 10)
        small = solid_ball_mask(dims, (42, 15, 15), 7)
        neck = np.zeros(dims, dtype=bool)
        neck[18:42, 13:18, 13:18] = True
        mask = big | small | neck
        body, process, cut = cut_processes(mask, (18.0, 15.0, 15.0),
                                           (1.0, 1.0, 1.0))
        # partition property
        np.testing.assert_array_equal(body | process, mask)
        assert not (body & process).any()
        # the body holds the seeded ball, the process the other one
        assert body[18, 15, 15] and not body[42, 15, 15]
        assert process[42, 15, 15]
        # cut voxels cluster along the neck, away from both ball centers
        cut_pts = np.argwhere(cut)
        assert len(cut_pts) > 0
        assert cut_pts[:, 0].min() > 20 and cut_pts[:, 0].max() < 40

    def test_center_outside_mask_falls_back(self):
        mask = solid_ball_mask((30, 30, 30), (15, 15, 15), 8)
        body, process, cut = cut_processes(mask, (1.0, 1.0, 1.0),
                                           (1.0, 1.0, 1.0))
        np.testing.assert_array_equal(body, mask)

    def test_empty_mask_raises(self):
        from vertseg.morphology import EmptyMaskError
        with pytest.raises(EmptyMaskError):
            cut_processes(np.zeros((5, 5, 5), dtype=bool), (2, 2, 2),
                          (1.0, 1.0, 1.0))


class TestExtractTrabecular:
    def test_strips_hot_shell(self):
        vol, r = ball_volume((40, 40, 40), (20, 20, 20), 10, 13,
                             soft=100, bone=400)
        body = r <= 13
        trab, peeled = extract_trabecular(body, vol, PAIR, peel_depth_mm=2.0)
        assert trab.any()
        assert float(vol.values[trab].mean()) < 150.0
        assert (peeled & ~trab).sum() == 0
        assert peeled.sum() < trab.sum()

    def test_zero_peel_depth(self):
        vol, r = ball_volume((30, 30, 30), (15, 15, 15), 8, 11,
                             soft=100, bone=400)
        trab, peeled = extract_trabecular(r <= 11, vol, PAIR,
                                          peel_depth_mm=0.0)
        np.testing.assert_array_equal(trab, peeled)

    def test_empty_body_raises(self):
        from vertseg.morphology import EmptyMaskError
        vol = VoxelVolume(np.zeros((10, 10, 10), dtype=np.int16),
                          (1.0, 1.0, 1.0))
        with pytest.raises(EmptyMaskError):
            extract_trabecular(np.zeros((10, 10, 10), dtype=bool), vol, PAIR)


class TestSegmentWithRegion:
    def test_uniform_region_fails_at_threshold(self, phantom0):
        _, volume, _ = phantom0
        # region buried in the anterior fat compartment: uniform density,
        # unimodal histogram, so the vertebra must abort in 'threshold'
        region = box_region((10.0, 6.0, 43.0), 5.0, 35.0, 51.0)
        with pytest.raises(StageError) as err:
            segment_with_region(volume, (10.0, 6.0, 43.0), region)
        assert err.value.stage == "threshold"
        assert isinstance(err.value.__cause__, UnimodalHistogramError)

    def test_label_nesting_on_study(self, study50):
        _, volume, _, results, _ = study50
        for res in results:
            labels = res.to_labels()
            body = labels > 0
            assert not (res.peeled & ~res.trabecular).any()
            assert not (res.trabecular & ~res.body).any()
            assert set(np.unique(labels)) <= {0, 1, 2, 3, 4, 5}
            # labeled voxels stay inside the constraint region
            pts = np.argwhere(res.body).astype(np.float64) * volume.spacing \
                + np.asarray(volume.origin)
            assert res.region.contains_points(pts).all()

    def test_body_brackets_truth(self, study50):
        _, volume, truth, results, _ = study50
        axes = [np.asarray(volume.origin)[a]
                + np.arange(volume.dims[a]) * volume.spacing[a]
                for a in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        for vt, res in zip(truth.vertebrae, results):
            # true core sits inside the body; body stays within 2 voxels of
            # the true body plus its pedicle stumps (cut leaves a stub on the
            # body side of the cut surface)
            assert (vt.core_mask & ~res.body).sum() == 0
            allowed = vt.body_mask.copy()
            for ax, az, rad, y_lo, y_hi in vt.pedicle_cylinders:
                allowed |= (((X - ax) ** 2 + (Z - az) ** 2 <= (rad + 1) ** 2)
                            & (Y >= y_lo - 1) & (Y <= y_hi + 1))
            envelope = ndimage.binary_dilation(allowed, iterations=2)
            assert (res.body & ~envelope).sum() == 0

    def test_iterations_and_thresholds_reported(self, study50):
        _, _, _, results, _ = study50
        for res in results:
            assert res.iterations["inflate"] >= 1
            assert res.iterations["settle"] >= 1
            low, high = res.thresholds
            assert low <= high
            assert res.flags == []

"""Shared fixtures: phantom studies at the three noise levels, segmented once
per session and reused by module and acceptance tests."""

import time

import numpy as np
import pytest

from vertseg.constraints import SeedSet
from vertseg.phantom import default_spec, generate_phantom
from vertseg.pipeline import segment_all


def standard_seeds(spec):
    """Operator seeds at the true body centers plus a mid-canal seed."""
    return SeedSet(
        body_centers=tuple(v.center for v in spec.vertebrae),
        canal_seed=(spec.canal_center_xy[0], spec.canal_center_xy[1],
                    spec.vertebrae[1].center[2]))


def run_study(noise_sigma, seed=0):
    spec = default_spec(noise_sigma=noise_sigma, seed=seed)
    volume, truth = generate_phantom(spec)
    t0 = time.perf_counter()
    results = segment_all(volume, standard_seeds(spec))
    elapsed = time.perf_counter() - t0
    for r in results:
        assert hasattr(r, "trabecular"), f"segmentation failed: {r}"
    return spec, volume, truth, results, elapsed


@pytest.fixture(scope="session")
def study50():
    return run_study(50.0)


@pytest.fixture(scope="session")
def study100():
    return run_study(100.0)


@pytest.fixture(scope="session")
def study200():
    return run_study(200.0)


@pytest.fixture(scope="session")
def phantom0():
    """Noiseless default phantom (volume, truth)."""
    spec = default_spec(noise_sigma=0.0)
    volume, truth = generate_phantom(spec)
    return spec, volume, truth


def measured_volume_cm3(volume, mask):
    return float(np.count_nonzero(mask)) * volume.voxel_volume_mm3 / 1000.0

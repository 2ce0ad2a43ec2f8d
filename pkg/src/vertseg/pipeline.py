"""Per-vertebra segmentation pipeline.

Chains the stages: constraint region -> histogram thresholds -> balloon
surface -> surface seed collection -> volume growing -> pedicle cut ->
trabecular VOI extraction.  Each stage consumes the immutable volume and the
results of earlier stages; failures carry the stage name and whatever partial
results exist.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .balloon import BalloonParams, evolve
from .constraints import (ConstraintRegion, SeedSet, build_region,
                          detect_canal, fit_disk_planes)
from .mesh import TriangleMesh, icosphere
from .morphology import (EmptyMaskError, close_and_fill, peel,
                         skiz_partition, ultimate_erode)
from .threshold import (GaussianPair, build_histogram, derive_thresholds,
                        fit_bimodal, transition_margin)
from .volgrid import VoxelVolume

_STRUCT_6 = ndimage.generate_binary_structure(3, 1)


class EmptySeedError(ValueError):
    """The balloon surface produced no bone-classified seed voxels."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and partial results."""

    def __init__(self, stage, cause, partial=None):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial or {}


@dataclass(frozen=True)
class PipelineParams:
    """Stage parameters; the balloon runs an inflate pass (long profiles, no
    remeshing) followed by a settle pass with the profile defaults."""

    init_radius_mm: float = 5.0
    init_subdivisions: int = 2
    inflate_profile_mm: float = 16.0
    inflate_max_iter: int = 120
    settle: BalloonParams = field(default_factory=lambda: BalloonParams(
        tol_mm=0.05, max_iter=380, max_edge_mm=4.0, max_vertices=3000))
    close_radius_voxels: float = 2.0
    merge_radius_mm: float = 3.0
    residual_prominence_mm: float = 0.5
    peel_depth_mm: float = 2.0
    radius_factor: float = 1.3
    canal_dilation_mm: float = 2.0


@dataclass
class VertebraResult:
    """Masks are full-volume booleans; labels 4 subset of 3 subset of 1."""

    mesh: TriangleMesh
    body: np.ndarray
    process: np.ndarray
    trabecular: np.ndarray
    peeled: np.ndarray
    cut: np.ndarray
    thresholds: tuple  # (low, high) HU
    iterations: dict
    flags: list
    region: ConstraintRegion

    def to_labels(self) -> np.ndarray:
        lab = np.zeros(self.body.shape, dtype=np.uint8)
        lab[self.body] = 1
        lab[self.process] = 2
        lab[self.trabecular] = 3
        lab[self.peeled] = 4
        lab[self.cut] = 5
        return lab


def _region_voxel_mask(volume: VoxelVolume, region: ConstraintRegion):
    """Bool mask of voxel centers inside the region, plus its index bounds."""
    lo, hi = region.index_bounds(volume)
    mask = np.zeros(volume.dims, dtype=bool)
    if (hi <= lo).any():
        return mask, (lo, hi)
    ii, jj, kk = np.meshgrid(*(np.arange(l, h) for l, h in zip(lo, hi)),
                             indexing="ij")
    idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    pts = volume.index_to_world(idx)
    inside = region.contains_points(pts)
    mask[idx[inside, 0], idx[inside, 1], idx[inside, 2]] = True
    return mask, (lo, hi)


def _classify_bone(volume: VoxelVolume, pair: GaussianPair, bounds):
    """Bone classification over a bounding box, full-volume bool output."""
    lo, hi = bounds
    sub = volume.values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].astype(np.float64)
    low, high = derive_thresholds(pair)
    nbr = ndimage.uniform_filter(sub, size=3, mode="nearest")
    bone = sub > high
    bone |= (sub >= low) & (nbr > low + transition_margin(pair))
    out = np.zeros(volume.dims, dtype=bool)
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = bone
    return out


def collect_seeds(mesh: TriangleMesh, volume: VoxelVolume,
                  pair: GaussianPair) -> np.ndarray:
    """Voxels intersected by the mesh surface that classify as bone.

    Conservative rasterization: every triangle is sampled on a barycentric
    lattice finer than a quarter voxel, so no crossed voxel is missed.
    Returns sorted unique (N, 3) voxel indices; raises EmptySeedError when no
    surface voxel passes the bone criteria.
    """
    pitch = 0.25 * min(volume.spacing)
    tri = mesh.vertices[mesh.triangles]          # (F, 3, 3)
    edge_max = np.maximum(
        np.linalg.norm(tri[:, 0] - tri[:, 1], axis=1),
        np.maximum(np.linalg.norm(tri[:, 1] - tri[:, 2], axis=1),
                   np.linalg.norm(tri[:, 2] - tri[:, 0], axis=1)))
    n_per = np.maximum(1, np.ceil(edge_max / pitch).astype(int))
    pieces = []
    for n in np.unique(n_per):
        sel = tri[n_per == n]
        b = np.arange(n + 1)
        bi, bj = np.meshgrid(b, b, indexing="ij")
        keep = bi + bj <= n
        u = (bi[keep] / n)[None, :, None]
        v = (bj[keep] / n)[None, :, None]
        pts = (sel[:, None, 0] * (1 - u - v)
               + sel[:, None, 1] * u + sel[:, None, 2] * v)
        pieces.append(pts.reshape(-1, 3))
    pts = np.concatenate(pieces, axis=0)
    idx = np.rint(volume.world_to_index(pts)).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(volume.dims) - 1)
    idx = np.unique(idx, axis=0)

    lo = np.maximum(idx.min(axis=0) - 1, 0)
    hi = np.minimum(idx.max(axis=0) + 2, volume.dims)
    bone = _classify_bone(volume, pair, (lo, hi))
    good = bone[idx[:, 0], idx[:, 1], idx[:, 2]]
    if not good.any():
        raise EmptySeedError("no bone-classified voxel on the balloon surface")
    return idx[good]


def grow(volume: VoxelVolume, seeds: np.ndarray, region: ConstraintRegion,
         pair: GaussianPair,
         close_radius_voxels: float = 2.0) -> np.ndarray:
    """6-connected growth over bone-classified voxels inside the region,
    followed by morphological closing + hole filling (the solid body), and a
    final re-intersection with the region."""
    seeds = np.asarray(seeds)
    if len(seeds) == 0:
        raise EmptySeedError("grow requires at least one seed")
    region_mask, bounds = _region_voxel_mask(volume, region)
    eligible = _classify_bone(volume, pair, bounds) & region_mask
    inside = eligible[seeds[:, 0], seeds[:, 1], seeds[:, 2]]
    if not inside.any():
        raise EmptySeedError("no seed lies inside the region and bone class")
    seeds = seeds[inside]
    comp, _ = ndimage.label(eligible, structure=_STRUCT_6)
    keep = np.unique(comp[seeds[:, 0], seeds[:, 1], seeds[:, 2]])
    grown = np.isin(comp, keep[keep > 0])
    radius = close_radius_voxels * min(volume.spacing)
    closed = close_and_fill(grown, radius, volume.spacing)
    return closed & region_mask


def cut_processes(mask: np.ndarray, body_center, spacing,
                  origin=(0.0, 0.0, 0.0), merge_radius_mm: float = 3.0,
                  residual_prominence_mm: float = 0.5):
    """Split a grown mask into vertebral body and posterior processes.

    Ultimate erosion yields the distance-maxima residuals; the residual whose
    influence zone holds the body center (fallback: the deepest residual)
    seeds the body, residuals within merge_radius_mm of it merge in (endplate
    double maxima), and the SKIZ partition of the mask assigns the zones.
    Returns (body mask, process mask, cut surface mask).
    """
    mask = np.asarray(mask, dtype=bool)
    spacing = np.asarray(spacing, dtype=np.float64)
    center_idx = np.rint((np.asarray(body_center, dtype=np.float64)
                          - np.asarray(origin)) / spacing).astype(int)
    center_idx = np.clip(center_idx, 0, np.asarray(mask.shape) - 1)
    if not mask.any():
        raise EmptyMaskError("cannot cut an empty mask")

    residuals = ultimate_erode(mask, tuple(spacing), residual_prominence_mm)
    if len(residuals) == 1:
        return mask.copy(), np.zeros_like(mask), np.zeros_like(mask)

    labels, _ = skiz_partition([r[0] for r in residuals], mask)
    center_label = int(labels[tuple(center_idx)]) if mask[tuple(center_idx)] else 0
    if center_label > 0:
        body_i = center_label - 1
    else:
        body_i = int(np.argmax([r[2] for r in residuals]))

    # transitive merge of residuals within the merge radius of the body set
    trees = [cKDTree(r[0] * spacing) for r in residuals]
    merged = {body_i}
    frontier = [body_i]
    while frontier:
        cur = frontier.pop()
        for i in range(len(residuals)):
            if i in merged:
                continue
            d = trees[cur].query(residuals[i][0] * spacing,
                                 distance_upper_bound=merge_radius_mm)[0]
            if np.isfinite(d).any():
                merged.add(i)
                frontier.append(i)

    body_seed = np.concatenate([residuals[i][0] for i in sorted(merged)])
    others = [residuals[i][0] for i in range(len(residuals))
              if i not in merged]
    if not others:
        return mask.copy(), np.zeros_like(mask), np.zeros_like(mask)
    labels, _ = skiz_partition([body_seed] + others, mask)
    body = labels == 1
    process = mask & ~body

    grow_b = ndimage.binary_dilation(body, structure=_STRUCT_6)
    grow_p = ndimage.binary_dilation(process, structure=_STRUCT_6)
    cut = (body & grow_p) | (process & grow_b)
    return body, process, cut


def extract_trabecular(body: np.ndarray, volume: VoxelVolume,
                       pair: GaussianPair, peel_depth_mm: float = 2.0):
    """Adaptive erosion strips the cortical shell from the body mask; the
    optional homogeneous peel removes the subcortical layer."""
    from .morphology import adaptive_erode

    if not np.asarray(body, dtype=bool).any():
        raise EmptyMaskError("empty body mask")
    _, high = derive_thresholds(pair)
    trab = adaptive_erode(body, volume.values, high)
    if not trab.any():
        raise EmptyMaskError("adaptive erosion removed the whole body")
    peeled = peel(trab, peel_depth_mm, volume.spacing) \
        if peel_depth_mm > 0 else trab.copy()
    return trab, peeled


def _run_balloon(volume: VoxelVolume, center, region: ConstraintRegion,
                 params: PipelineParams):
    mesh = icosphere(center, params.init_radius_mm, params.init_subdivisions)
    inflate = replace(params.settle,
                      profile_length_mm=params.inflate_profile_mm,
                      remesh_every=0, max_iter=params.inflate_max_iter)
    mesh, info1 = evolve(mesh, volume, region, inflate)
    # Settle in decreasing time steps: a coarse pass with the full profile
    # finds the cortical border; short-profile low-dt passes damp the limit
    # cycle that vertices near the endplate rim fall into when the strongest
    # gradient flips between the side-wall and endplate edges.
    coarse = replace(params.settle, max_iter=min(150, params.settle.max_iter))
    mesh, info2 = evolve(mesh, volume, region, coarse)
    settle_iters = info2["iterations"]
    for dt in (0.25, 0.12):
        polish = replace(params.settle, profile_length_mm=2.0, dt=dt,
                         remesh_every=0, max_iter=200)
        mesh, info2 = evolve(mesh, volume, region, polish)
        settle_iters += info2["iterations"]
        if info2["converged"]:
            break
    info2 = dict(info2, iterations=settle_iters)
    return mesh, info1, info2


def segment_with_region(volume: VoxelVolume, center,
                        region: ConstraintRegion,
                        params: PipelineParams = PipelineParams(),
                        extra_flags=()) -> VertebraResult:
    """Segment one vertebra inside an already-built constraint region."""
    partial = {}
    flags = list(extra_flags)
    stage = "threshold"
    try:
        hist = build_histogram(volume, region)
        pair = fit_bimodal(hist)
        low, high = derive_thresholds(pair)
        partial["thresholds"] = (low, high)

        stage = "balloon"
        mesh, info1, info2 = _run_balloon(volume, center, region, params)
        partial["mesh"] = mesh
        if not info2["converged"]:
            flags.append("balloon-non-convergence")

        stage = "seeds"
        seeds = collect_seeds(mesh, volume, pair)

        stage = "grow"
        grown = grow(volume, seeds, region, pair, params.close_radius_voxels)
        partial["grown"] = grown

        stage = "cut"
        body, process, cut = cut_processes(
            grown, center, volume.spacing, volume.origin,
            params.merge_radius_mm, params.residual_prominence_mm)
        partial["body"] = body

        stage = "trabecular"
        trab, peeled = extract_trabecular(body, volume, pair,
                                          params.peel_depth_mm)
    except Exception as exc:  # noqa: BLE001 - stage name must be attached
        raise StageError(stage, exc, partial) from exc

    return VertebraResult(
        mesh=mesh, body=body, process=process, trabecular=trab,
        peeled=peeled, cut=cut, thresholds=(low, high),
        iterations={"inflate": info1["iterations"],
                    "settle": info2["iterations"]},
        flags=flags, region=region)


def build_regions(volume: VoxelVolume, seeds: SeedSet,
                  params: PipelineParams = PipelineParams()):
    """Shared constraint inputs: canal trace, disk planes, one region per
    body center.  Returns (regions, canal, shared flag list)."""
    flags = []
    canal = detect_canal(volume, seeds.canal_seed)
    if canal.partial:
        flags.append("partial-canal")
    planes = fit_disk_planes(volume, seeds)
    regions = [build_region(c, (planes[i], planes[i + 1]), canal,
                            params.radius_factor, params.canal_dilation_mm)
               for i, c in enumerate(seeds.body_centers)]
    return regions, canal, flags


def segment_vertebra(volume: VoxelVolume, seeds: SeedSet, index: int,
                     params: PipelineParams = PipelineParams()) -> VertebraResult:
    """Full single-vertebra run including constraint construction."""
    try:
        regions, _, flags = build_regions(volume, seeds, params)
    except Exception as exc:  # noqa: BLE001
        raise StageError("constraints", exc) from exc
    return segment_with_region(volume, seeds.body_centers[index],
                               regions[index], params, flags)


def _worker_count() -> int:
    env = os.environ.get("VERTSEG_THREADS", "0")
    try:
        n = int(env)
    except ValueError:
        n = 0
    return n if n > 0 else min(os.cpu_count() or 1, 8)


def segment_all(volume: VoxelVolume, seeds: SeedSet,
                params: PipelineParams = PipelineParams()) -> list:
    """Segment every seeded vertebra; failures become StageError entries.

    Returns a list aligned with seeds.body_centers whose items are either
    VertebraResult or StageError (callers inspect/flag).  Vertebrae run
    concurrently; the output order is deterministic.
    """
    try:
        regions, _, flags = build_regions(volume, seeds, params)
    except Exception as exc:  # noqa: BLE001
        raise StageError("constraints", exc) from exc

    def job(i):
        try:
            return segment_with_region(volume, seeds.body_centers[i],
                                       regions[i], params, flags)
        except StageError as err:
            return err

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        return list(pool.map(job, range(len(seeds.body_centers))))

"""Per-vertebra search spaces: rolling-ball canal detection, disk-plane
approximation, and capped-cylinder regions with canal exclusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volgrid import VoxelVolume, sample_trilinear

DEFAULT_BONE_THRESHOLD = 200.0   # HU above which a canal-tracking voxel is bone
DEFAULT_RADIUS_FACTOR = 1.3      # region radius / center-to-canal distance
DEFAULT_CANAL_DILATION = 2.0     # mm added to the exclusion tube
DEFAULT_BODY_HEIGHT = 30.0       # mm fallback when fewer than 2 seeds


class CanalSeedError(ValueError):
    """Canal seed placed inside bone."""


@dataclass(frozen=True)
class SeedSet:
    """Operator-provided per-study seeds."""

    body_centers: tuple
    canal_seed: tuple
    plane_overrides: dict = field(default_factory=dict)  # gap index -> (point, normal)

    def __post_init__(self):
        centers = tuple(tuple(float(x) for x in c) for c in self.body_centers)
        object.__setattr__(self, "body_centers", centers)
        object.__setattr__(self, "canal_seed", tuple(float(x) for x in self.canal_seed))
        zs = [c[2] for c in centers]
        if sorted(zs) != zs or len(set(zs)) != len(zs):
            raise ValueError("body centers must be strictly ordered along z")
        if centers and self.canal_seed[1] <= max(c[1] for c in centers):
            raise ValueError("canal seed must be posterior (larger y) to all body centers")


@dataclass(frozen=True)
class CanalTrace:
    """Per-axial-slice canal centerline and inscribed radii."""

    z_indices: np.ndarray       # slice indices covered
    centers: np.ndarray         # (N, 3) world mm, one per covered slice
    radii: np.ndarray           # (N,) mm
    partial: bool               # tracking lost before reaching the volume ends

    @property
    def tube_radius(self) -> float:
        # median is robust against open-ended slices where the disk blows up
        return float(np.median(self.radii))

    def center_at_z(self, z):
        """Centerline xy interpolated (nearest covered slice) at world z."""
        zc = self.centers[:, 2]
        idx = np.clip(np.searchsorted(zc, np.atleast_1d(z)), 0, len(zc) - 1)
        below = np.clip(idx - 1, 0, len(zc) - 1)
        pick = np.where(np.abs(zc[idx] - np.atleast_1d(z))
                        <= np.abs(zc[below] - np.atleast_1d(z)), idx, below)
        return self.centers[pick]


def detect_canal(volume: VoxelVolume, canal_seed,
                 bone_threshold: float = DEFAULT_BONE_THRESHOLD,
                 min_radius: float = 1.0) -> CanalTrace:
    """Track the spinal canal slice by slice with a rolling-ball criterion.

    Per axial slice the largest inscribed sub-bone-threshold disk containing
    the tracked center is found on a 2D distance transform; the next slice
    starts from that disk's center. Tracking stops in a direction once the
    inscribed radius collapses below ``min_radius``.
    """
    seed_idx = np.rint(volume.world_to_index(canal_seed)).astype(int)
    nx, ny, nz = volume.dims
    if not ((0 <= seed_idx) & (seed_idx < volume.dims)).all():
        raise ValueError("canal seed outside the volume")
    # rolling-ball tracking is done on a locally averaged image so single
    # noisy voxels cannot puncture the canal lumen or its walls
    smoothed = ndimage.uniform_filter(volume.values.astype(np.float64), size=3)
    if smoothed[tuple(seed_idx)] >= bone_threshold:
        raise CanalSeedError(
            f"canal seed value {smoothed[tuple(seed_idx)]:.0f} HU is bone "
            f"(>= {bone_threshold})")

    sx, sy = volume.spacing[0], volume.spacing[1]
    low = smoothed < bone_threshold

    def slice_step(k, center_ij, prev_radius):
        sl = low[:, :, k]
        if not sl[tuple(center_ij)]:
            return None
        labels, _ = ndimage.label(sl)
        comp = labels == labels[tuple(center_ij)]
        dt = ndimage.distance_transform_edt(comp, sampling=(sx, sy))
        # candidate disk centers stay near the track; window scales with the
        # previous radius so open slices cannot teleport the center
        win = max(3.0 * prev_radius, 10.0)
        ii, jj = np.indices(sl.shape)
        dx = (ii - center_ij[0]) * sx
        dy = (jj - center_ij[1]) * sy
        near = comp & (dx ** 2 + dy ** 2 <= win ** 2)
        # the disk must still contain the tracked center
        ok = near & (dt >= np.sqrt(dx ** 2 + dy ** 2))
        if not ok.any():
            return None
        flat = np.where(ok.ravel(), dt.ravel(), -1.0)
        best = int(flat.argmax())
        bi, bj = np.unravel_index(best, sl.shape)
        return (bi, bj), float(dt[bi, bj])

    k0 = int(seed_idx[2])
    results = {}
    start = slice_step(k0, (int(seed_idx[0]), int(seed_idx[1])), 10.0)
    if start is None or start[1] < min_radius:
        raise CanalSeedError("no canal disk found at the seed slice")
    results[k0] = start
    partial = False
    for direction in (1, -1):
        center_ij, radius = start
        k = k0 + direction
        while 0 <= k < nz:
            res = slice_step(k, center_ij, radius)
            if res is None or res[1] < min_radius:
                partial = True
                break
            results[k] = res
            center_ij, radius = res
            k += direction

    ks = np.array(sorted(results))
    centers = np.array([
        volume.index_to_world((results[k][0][0], results[k][0][1], k)) for k in ks
    ])
    radii = np.array([results[k][1] for k in ks])
    return CanalTrace(ks, centers, radii, partial)


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple  # unit

    def signed_distance(self, pts):
        pts = np.atleast_2d(pts)
        return (pts - np.asarray(self.point)) @ np.asarray(self.normal)


def fit_disk_planes(volume: VoxelVolume, seeds: SeedSet,
                    sample_radius: float = 10.0,
                    step_mm: float = 0.5,
                    default_height: float = DEFAULT_BODY_HEIGHT) -> list:
    """One separating plane per inter-vertebral gap plus mirrored end planes.

    Candidate planes perpendicular to each center-to-center axis sweep the
    middle 50% of the gap; the plane minimizing mean HU over a disk
    cross-section wins. Normals point toward increasing vertebra index.
    """
    centers = [np.asarray(c, dtype=np.float64) for c in seeds.body_centers]
    n = len(centers)
    if n == 0:
        raise ValueError("no body centers")
    if n == 1:
        axis = np.array([0.0, 0.0, 1.0])
        c = centers[0]
        return [Plane(tuple(c - axis * default_height / 2), tuple(axis)),
                Plane(tuple(c + axis * default_height / 2), tuple(axis))]

    inner = []
    for i in range(n - 1):
        c0, c1 = centers[i], centers[i + 1]
        axis = c1 - c0
        length = np.linalg.norm(axis)
        axis = axis / length
        if i in seeds.plane_overrides:
            pt, nrm = seeds.plane_overrides[i]
            nrm = np.asarray(nrm, dtype=np.float64)
            nrm /= np.linalg.norm(nrm)
            if nrm @ axis < 0:
                nrm = -nrm
            inner.append(Plane(tuple(pt), tuple(nrm)))
            continue
        u = np.cross(axis, [1.0, 0.0, 0.0])
        if np.linalg.norm(u) < 1e-6:
            u = np.cross(axis, [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        rr = np.arange(-sample_radius, sample_radius + 1e-9, 1.0)
        gu, gv = np.meshgrid(rr, rr, indexing="ij")
        keep = gu ** 2 + gv ** 2 <= sample_radius ** 2
        disk = gu[keep][:, None] * u + gv[keep][:, None] * v
        best = None
        for s in np.arange(0.25 * length, 0.75 * length + 1e-9, step_mm):
            pts = c0 + s * axis + disk
            mean_hu = float(np.mean(sample_trilinear(volume, pts)))
            if best is None or mean_hu < best[0]:
                best = (mean_hu, s)
        inner.append(Plane(tuple(c0 + best[1] * axis), tuple(axis)))

    # End planes mirror the adjacent gap distance.  With two or more inner
    # planes the gap-to-gap pitch is mirrored, which is independent of the
    # operator-placed centers; with a single gap the gap-to-center distance
    # is the only distance available.
    first_axis = np.asarray(inner[0].normal)
    last_axis = np.asarray(inner[-1].normal)
    if len(inner) >= 2:
        d0 = float((np.asarray(inner[1].point)
                    - np.asarray(inner[0].point)) @ first_axis)
        d1 = float((np.asarray(inner[-1].point)
                    - np.asarray(inner[-2].point)) @ last_axis)
        bottom = Plane(tuple(np.asarray(inner[0].point) - d0 * first_axis),
                       tuple(first_axis))
        top = Plane(tuple(np.asarray(inner[-1].point) + d1 * last_axis),
                    tuple(last_axis))
    else:
        d0 = float((np.asarray(inner[0].point) - centers[0]) @ first_axis)
        bottom = Plane(tuple(centers[0] - d0 * first_axis), tuple(first_axis))
        d1 = float((centers[-1] - np.asarray(inner[-1].point)) @ last_axis)
        top = Plane(tuple(centers[-1] + d1 * last_axis), tuple(last_axis))
    return [bottom] + inner + [top]


@dataclass(frozen=True)
class ConstraintRegion:
    """Capped cylinder around a vertebral body minus the dilated canal tube."""

    center: tuple
    axis: tuple                    # unit, roughly cranio-caudal
    radius: float                  # lateral = anterior-posterior radius, mm
    cap_lo: Plane                  # normal points toward the center
    cap_hi: Plane
    canal: CanalTrace | None = None
    canal_dilation: float = DEFAULT_CANAL_DILATION

    def contains_points(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        c = np.asarray(self.center)
        ax = np.asarray(self.axis)
        rel = pts - c
        t = rel @ ax
        radial = rel - t[:, None] * ax
        inside = (radial ** 2).sum(axis=1) <= self.radius ** 2
        inside &= self.cap_lo.signed_distance(pts) >= 0
        inside &= self.cap_hi.signed_distance(pts) >= 0
        if self.canal is not None:
            cl = self.canal.center_at_z(pts[:, 2])
            d2 = ((pts[:, :2] - cl[:, :2]) ** 2).sum(axis=1)
            tube = self.canal.tube_radius + self.canal_dilation
            inside &= d2 > tube ** 2
        return inside

    def index_bounds(self, volume: VoxelVolume):
        """Conservative voxel-index bounding box of the region, clipped."""
        c = np.asarray(self.center)
        ax = np.asarray(self.axis)
        t_lo = float((np.asarray(self.cap_lo.point) - c) @ ax)
        t_hi = float((np.asarray(self.cap_hi.point) - c) @ ax)
        pts = c + np.linspace(min(t_lo, t_hi), max(t_lo, t_hi), 9)[:, None] * ax
        lo_w = pts.min(axis=0) - self.radius
        hi_w = pts.max(axis=0) + self.radius
        lo = np.floor(volume.world_to_index(lo_w)).astype(int)
        hi = np.ceil(volume.world_to_index(hi_w)).astype(int) + 1
        lo = np.clip(lo, 0, volume.dims)
        hi = np.clip(hi, 0, volume.dims)
        return lo, hi


def contains(region: ConstraintRegion, point) -> bool:
    """Boolean region membership for a single world point."""
    p = np.asarray(point, dtype=np.float64)
    if not np.isfinite(p).all():
        return False
    return bool(region.contains_points(p[None, :])[0])


def build_region(center, planes, canal: CanalTrace | None,
                 radius_factor: float = DEFAULT_RADIUS_FACTOR,
                 canal_dilation: float = DEFAULT_CANAL_DILATION) -> ConstraintRegion:
    """Capped cylinder for one vertebra.

    planes: (below, above) pair with normals along increasing z; the cylinder
    axis follows the inter-plane direction and its radius is radius_factor
    times the center-to-canal distance (fallback 40 mm without a canal).
    """
    center = np.asarray(center, dtype=np.float64)
    p_lo, p_hi = planes
    # center must sit above the lower plane and below the upper one
    if (p_lo.signed_distance(center[None, :])[0] <= 0
            or p_hi.signed_distance(center[None, :])[0] >= 0):
        raise ValueError("capping planes do not bracket the body center")
    axis = np.asarray(p_hi.point, dtype=np.float64) - np.asarray(p_lo.point)
    nrm = np.linalg.norm(axis)
    axis = axis / nrm if nrm > 1e-9 else np.array([0.0, 0.0, 1.0])
    if canal is not None:
        cl = canal.center_at_z(np.array([center[2]]))[0]
        dist = float(np.linalg.norm(center[:2] - cl[:2]))
        radius = radius_factor * dist
    else:
        radius = 40.0
    cap_lo = Plane(p_lo.point, tuple(np.asarray(p_lo.normal, dtype=np.float64)))
    hi_n = -np.asarray(p_hi.normal, dtype=np.float64)
    cap_hi = Plane(p_hi.point, tuple(hi_n))
    return ConstraintRegion(tuple(center), tuple(axis), float(radius),
                            cap_lo, cap_hi, canal, canal_dilation)

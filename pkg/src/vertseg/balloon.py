"""Deformable balloon evolution: radial-profile image forces plus 1-ring
spring smoothing, integrated with a position-based scheme inside a constraint
region, with periodic curvature-driven vertex insertion."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .mesh import TriangleMesh, insert_vertices, mark_for_insertion
from .volgrid import VoxelVolume, sample_trilinear


@dataclass(frozen=True)
class BalloonParams:
    mass: float = 1.0                 # fixed at 1
    gamma: float = 0.0                # damping is ignored
    w_smg: float = 0.4
    w_img: float = 1.0
    w_inf: float = 0.0                # inflation is ignored; prevents leaking out
    profile_length_mm: float = 6.0    # profile covers +- this length
    profile_step_mm: float = 0.25
    profile_smooth: int = 3           # box width in samples; 1 disables
    dt: float = 1.0
    max_disp_mm: float | None = None  # default 0.5 * min voxel spacing
    tol_mm: float = 0.01
    max_iter: int = 500
    edge_grad_threshold: float = 100.0  # HU/mm
    remesh_every: int = 10
    max_edge_mm: float = 3.0
    min_disp_mm: float = 0.1
    max_vertices: int = 40_000

    def __post_init__(self):
        if self.mass != 1.0 or self.w_inf != 0.0:
            raise ValueError("mass is fixed at 1 and inflation weight at 0")
        if not 0.0 <= self.w_smg <= 1.0:
            raise ValueError("smoothing weight must be in [0, 1]")
        if self.profile_step_mm <= 0 or self.profile_length_mm <= 0:
            raise ValueError("profile geometry must be positive")

    def resolved_max_disp(self, volume: VoxelVolume) -> float:
        if self.max_disp_mm is not None:
            return self.max_disp_mm
        return 0.5 * min(volume.spacing)

    def check_subvoxel(self, volume: VoxelVolume):
        if self.profile_step_mm >= min(volume.spacing):
            raise ValueError("profile step must be sub-voxel")


def image_forces(volume: VoxelVolume, origins, normals,
                 params: BalloonParams) -> np.ndarray:
    """Signed mm distance along each normal to the strongest outward-rising
    gradient above the edge threshold; NaN where no sample qualifies."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    step = params.profile_step_mm
    half = int(round(params.profile_length_mm / step))
    ts = (np.arange(2 * half + 1) - half) * step
    pts = origins[:, None, :] + ts[None, :, None] * normals[:, None, :]
    prof = sample_trilinear(volume, pts.reshape(-1, 3)).reshape(len(origins), len(ts))

    w = max(1, int(params.profile_smooth))
    if w > 1:
        from scipy.ndimage import uniform_filter1d
        prof = uniform_filter1d(prof, size=w, axis=1, mode="nearest")

    grad = np.full_like(prof, -np.inf)
    grad[:, 1:-1] = (prof[:, 2:] - prof[:, :-2]) / (2 * step)
    qual = grad > params.edge_grad_threshold
    grad_q = np.where(qual, grad, -np.inf)
    best = np.argmax(grad_q, axis=1)
    has = qual[np.arange(len(origins)), best]

    out = np.full(len(origins), np.nan)
    rows = np.nonzero(has)[0]
    if len(rows):
        i = best[rows]
        t = ts[i].astype(np.float64)
        interior = (i >= 1) & (i < len(ts) - 1)
        sub = rows[interior]
        isub = i[interior]
        gm = grad[sub, isub - 1]
        g0 = grad[sub, isub]
        gp = grad[sub, isub + 1]
        denom = gm - 2 * g0 + gp
        valid = np.isfinite(gm) & np.isfinite(gp) & (denom < -1e-12)
        delta = np.zeros(len(sub))
        np.divide(0.5 * (gm - gp), denom, out=delta, where=valid)
        t[interior] += np.clip(np.where(valid, delta, 0.0), -0.5, 0.5) * step
        out[rows] = t
    return out


def image_force(volume: VoxelVolume, origin, normal,
                params: BalloonParams) -> float | None:
    """Single-vertex profile analysis; None when no qualifying edge exists."""
    res = image_forces(volume, np.asarray(origin)[None, :],
                       np.asarray(normal)[None, :], params)
    return None if np.isnan(res[0]) else float(res[0])


def _adjacency(mesh: TriangleMesh):
    tri = mesh.triangles
    n = len(mesh.vertices)
    rows = np.concatenate([tri[:, 0], tri[:, 1], tri[:, 1], tri[:, 2], tri[:, 2], tri[:, 0]])
    cols = np.concatenate([tri[:, 1], tri[:, 0], tri[:, 2], tri[:, 1], tri[:, 0], tri[:, 2]])
    a = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    a.data[:] = 1.0  # duplicate edge listings collapse to single links
    deg = np.asarray(a.sum(axis=1)).ravel()
    return a, deg


def smoothing_forces(mesh: TriangleMesh, adjacency=None) -> np.ndarray:
    """Vector from each vertex to the centroid of its 1-ring neighbors."""
    a, deg = _adjacency(mesh) if adjacency is None else adjacency
    centroid = (a @ mesh.vertices) / deg[:, None]
    return centroid - mesh.vertices


def smoothing_force(mesh: TriangleMesh, v: int) -> np.ndarray:
    ring = mesh.one_ring(v)
    return mesh.vertices[ring].mean(axis=0) - mesh.vertices[v]


def _project_inside(region, old, cand):
    """Pull candidate positions that left the region back toward the boundary
    along their own motion segment (bisection; old positions are inside)."""
    ok = region.contains_points(cand)
    if ok.all():
        return cand
    bad = np.nonzero(~ok)[0]
    lo = np.zeros(len(bad))          # inside fraction
    hi = np.ones(len(bad))           # outside fraction
    seg_old = old[bad]
    seg_new = cand[bad]
    for _ in range(16):
        mid = 0.5 * (lo + hi)
        pts = seg_old + mid[:, None] * (seg_new - seg_old)
        inside = region.contains_points(pts)
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    cand = cand.copy()
    cand[bad] = seg_old + lo[:, None] * (seg_new - seg_old)
    return cand


class ConvergenceInfo(dict):
    """Evolution diagnostics: iterations, converged flag, final displacement."""


def evolve(mesh: TriangleMesh, volume: VoxelVolume, region,
           params: BalloonParams) -> tuple[TriangleMesh, ConvergenceInfo]:
    """Iterate the balloon dynamics until the maximum vertex displacement
    drops below tolerance or the iteration budget runs out.

    Non-convergence is reported through the returned info, not raised; the
    caller decides what to do with the final mesh.
    """
    params.check_subvoxel(volume)
    mesh = mesh.copy()
    if region is not None and not region.contains_points(mesh.vertices).all():
        raise ValueError("initial mesh must lie inside the constraint region")
    max_disp = params.resolved_max_disp(volume)
    adjacency = _adjacency(mesh)
    final_disp = np.inf
    converged = False
    it = 0
    for it in range(1, params.max_iter + 1):
        normals = mesh.vertex_normals()
        t_edge = image_forces(volume, mesh.vertices, normals, params)
        f_img = np.where(np.isnan(t_edge), 0.0, t_edge)[:, None] * normals
        f_smg = smoothing_forces(mesh, adjacency)
        force = params.w_img * f_img + params.w_smg * f_smg
        step_vec = (params.dt ** 2) * force
        nrm = np.linalg.norm(step_vec, axis=1)
        scale = np.minimum(1.0, max_disp / np.maximum(nrm, 1e-300))
        step_vec *= scale[:, None]
        cand = mesh.vertices + step_vec
        if region is not None:
            cand = _project_inside(region, mesh.vertices, cand)
        disp = cand - mesh.vertices
        mesh.last_disp = disp
        mesh.velocities = disp / params.dt
        mesh.vertices = cand
        final_disp = float(np.linalg.norm(disp, axis=1).max())
        if final_disp < params.tol_mm:
            converged = True
            break
        if params.remesh_every and it % params.remesh_every == 0 \
                and len(mesh.vertices) < params.max_vertices:
            marked = mark_for_insertion(mesh, params.max_edge_mm, params.min_disp_mm)
            if marked:
                mesh = insert_vertices(mesh, marked)
                if region is not None:
                    # midpoints of inside segments can graze a concave boundary
                    bad = ~region.contains_points(mesh.vertices)
                    if bad.any():
                        mesh.vertices = _project_inside(
                            region, mesh.vertices - mesh.last_disp, mesh.vertices)
                adjacency = _adjacency(mesh)
    return mesh, ConvergenceInfo(iterations=it, converged=converged,
                                 final_max_displacement=final_disp)

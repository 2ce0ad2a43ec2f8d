"""Closed triangle meshes: icosphere construction, adjacency, normals, and
curvature-driven local vertex insertion (longest-edge midpoint split)."""

from __future__ import annotations

import os

import numpy as np

MAX_VERTICES = 40_000  # hard cap per balloon; guarantees refinement terminates


class MeshTopologyError(ValueError):
    """Raised when a mesh violates the closed-manifold invariants."""


class TriangleMesh:
    """Explicit closed manifold triangle mesh.

    vertices: (V, 3) float64 positions in mm
    triangles: (F, 3) int vertex indices, consistently oriented outward
    velocities / last_disp: (V, 3) per-vertex state used by the balloon solver
    """

    def __init__(self, vertices, triangles, velocities=None, last_disp=None):
        self.vertices = np.array(vertices, dtype=np.float64)
        self.triangles = np.array(triangles, dtype=np.int64)
        n = len(self.vertices)
        self.velocities = (np.zeros((n, 3)) if velocities is None
                           else np.array(velocities, dtype=np.float64))
        self.last_disp = (np.zeros((n, 3)) if last_disp is None
                          else np.array(last_disp, dtype=np.float64))
        self._rings = None
        self._edge_map = None

    # -- derived adjacency ------------------------------------------------

    def _invalidate(self):
        self._rings = None
        self._edge_map = None

    @property
    def edge_map(self) -> dict:
        """Map (lo, hi) vertex pair -> list of incident triangle indices."""
        if self._edge_map is None:
            em = {}
            for t, (a, b, c) in enumerate(self.triangles):
                for u, v in ((a, b), (b, c), (c, a)):
                    key = (u, v) if u < v else (v, u)
                    em.setdefault(key, []).append(t)
            self._edge_map = em
        return self._edge_map

    def one_ring(self, v: int) -> np.ndarray:
        return self.rings[v]

    @property
    def rings(self) -> list:
        if self._rings is None:
            neigh = [set() for _ in range(len(self.vertices))]
            for a, b, c in self.triangles:
                neigh[a].update((b, c))
                neigh[b].update((a, c))
                neigh[c].update((a, b))
            self._rings = [np.fromiter(s, dtype=np.int64) for s in neigh]
        return self._rings

    # -- queries -----------------------------------------------------------

    def triangle_normals(self):
        p = self.vertices[self.triangles]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return n  # area-weighted (2x area)

    def triangle_areas(self):
        return 0.5 * np.linalg.norm(self.triangle_normals(), axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted incident-triangle normals, normalized, for all vertices."""
        tn = self.triangle_normals()
        vn = np.zeros_like(self.vertices)
        for col in range(3):
            np.add.at(vn, self.triangles[:, col], tn)
        norms = np.linalg.norm(vn, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return vn / norms

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def edge_lengths(self):
        """(F, 3) lengths of the edges opposite each triangle corner order."""
        p = self.vertices[self.triangles]
        return np.stack([
            np.linalg.norm(p[:, 0] - p[:, 1], axis=1),
            np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
            np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
        ], axis=1)

    def validate(self, min_area=1e-9):
        """Assert the closed orientable manifold invariants; raises on failure."""
        seen = {}
        for t, (a, b, c) in enumerate(self.triangles):
            if len({a, b, c}) != 3:
                raise MeshTopologyError(f"triangle {t} repeats a vertex")
            for u, v in ((a, b), (b, c), (c, a)):
                key = (u, v) if u < v else (v, u)
                seen.setdefault(key, []).append((u, v))
        for key, dirs in seen.items():
            if len(dirs) != 2:
                raise MeshTopologyError(f"edge {key} shared by {len(dirs)} triangles")
            if dirs[0] == dirs[1]:
                raise MeshTopologyError(f"edge {key} traversed twice in the same direction")
        if (self.triangle_areas() <= min_area).any():
            raise MeshTopologyError("degenerate (zero-area) triangle present")
        return True

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles, self.velocities, self.last_disp)


def vertex_normal(mesh: TriangleMesh, v: int) -> np.ndarray:
    """Unit outward normal of a single vertex (area-weighted incident normals)."""
    return mesh.vertex_normals()[v]


# -- icosphere --------------------------------------------------------------

def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ], dtype=np.int64)
    return verts, faces


def icosphere(center, radius: float, subdivisions: int = 0) -> TriangleMesh:
    """Geodesic sphere with 10*4^n + 2 vertices and 20*4^n triangles."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    verts, faces = _icosahedron()
    for _ in range(subdivisions):
        midpoint = {}
        new_verts = [v for v in verts]

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = new_verts[a] + new_verts[b]
                m /= np.linalg.norm(m)
                midpoint[key] = len(new_verts)
                new_verts.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.array(new_verts)
        faces = np.array(new_faces, dtype=np.int64)
    verts = verts * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(verts, faces)


# -- local adaptation --------------------------------------------------------

def mark_for_insertion(mesh: TriangleMesh, max_edge: float, min_displacement: float) -> set:
    """Triangles whose mean last-step vertex displacement exceeds
    min_displacement AND whose longest edge exceeds max_edge."""
    if max_edge <= 0 or min_displacement <= 0:
        raise ValueError("thresholds must be > 0")
    disp = np.linalg.norm(mesh.last_disp, axis=1)
    mean_disp = disp[mesh.triangles].mean(axis=1)
    longest = mesh.edge_lengths().max(axis=1)
    marked = np.nonzero((mean_disp > min_displacement) & (longest > max_edge))[0]
    return set(int(t) for t in marked)


def insert_vertices(mesh: TriangleMesh, marked) -> TriangleMesh:
    """Refine marked triangles by splitting their longest edge at the midpoint.

    The opposite triangle across the split edge is split too, preserving the
    closed-manifold invariant. Existing vertices never move; the new vertex
    inherits the averaged velocity of the edge endpoints.
    """
    verts = [v for v in mesh.vertices]
    vels = [v for v in mesh.velocities]
    disps = [v for v in mesh.last_disp]
    tris = {t: tuple(tri) for t, tri in enumerate(mesh.triangles)}
    next_tid = len(mesh.triangles)

    edge_map = {}
    for t, tri in tris.items():
        a, b, c = tri
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_map.setdefault(key, []).append(t)

    for t in sorted(marked):
        if t not in tris:
            continue  # already refined as the neighbor of an earlier split
        if len(verts) >= MAX_VERTICES:
            break
        a, b, c = tris[t]
        pa, pb, pc = verts[a], verts[b], verts[c]
        lens = [(np.linalg.norm(pa - pb), (a, b)),
                (np.linalg.norm(pb - pc), (b, c)),
                (np.linalg.norm(pc - pa), (c, a))]
        _, (u, v) = max(lens, key=lambda e: e[0])
        key = (u, v) if u < v else (v, u)
        incident = list(edge_map.get(key, []))
        if len(incident) != 2:
            raise MeshTopologyError(f"edge {key} not shared by exactly 2 triangles")

        m = len(verts)
        verts.append(0.5 * (verts[u] + verts[v]))
        vels.append(0.5 * (vels[u] + vels[v]))
        disps.append(0.5 * (disps[u] + disps[v]))

        for tid in incident:
            tri = tris.pop(tid)
            w = [x for x in tri if x != u and x != v][0]
            # split tri (preserving orientation) into (.., u, m) and (.., m, v)
            i_u = tri.index(u)
            if tri[(i_u + 1) % 3] == v:
                new1, new2 = (u, m, w), (m, v, w)
            else:
                new1, new2 = (v, m, w), (m, u, w)
            for tri_new in (new1, new2):
                tid_new = next_tid
                next_tid += 1
                tris[tid_new] = tri_new
                for e0, e1 in ((tri_new[0], tri_new[1]),
                               (tri_new[1], tri_new[2]),
                               (tri_new[2], tri_new[0])):
                    k = (e0, e1) if e0 < e1 else (e1, e0)
                    edge_map.setdefault(k, []).append(tid_new)
            for e0, e1 in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                k = (e0, e1) if e0 < e1 else (e1, e0)
                edge_map[k].remove(tid)

    new_tris = np.array([tris[t] for t in sorted(tris)], dtype=np.int64)
    return TriangleMesh(np.array(verts), new_tris, np.array(vels), np.array(disps))


# -- export ------------------------------------------------------------------

def write_obj(mesh: TriangleMesh, path) -> None:
    """ASCII Wavefront-OBJ subset: 'v x y z' and 'f i j k' (1-based)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
    os.replace(tmp, path)

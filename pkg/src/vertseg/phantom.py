"""Synthetic semi-anthropomorphic spine phantom with exact ground truth.

Each vertebra is an elliptic-cylinder body (trabecular core, cortical shell,
cortical endplates) with two cylindrical pedicles bridging to a posterior
annular arch around a straight spinal canal. Voxel values are
volume-fraction-weighted densities (supersampled partial-volume simulation);
HU equals density under the default identity calibration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .volgrid import VoxelVolume

# geometry defaults shared by the derived posterior-element layout
DEFAULT_PEDICLE_LENGTH = 16.0   # mm of free pedicle span between body and arch
DEFAULT_ARCH_THICKNESS = 14.0   # mm radial thickness of the posterior ring


@dataclass(frozen=True)
class VertebraSpec:
    center: tuple[float, float, float]
    half_axes: tuple[float, float] = (18.0, 14.0)   # (a, b) mm, elliptic body
    height: float = 25.0                            # mm along z
    shell_thickness: float = 2.0                    # cortical shell and endplates
    trabecular_density: float = 100.0               # mg/cm^3
    cortical_density: float = 900.0
    pedicle_radius: float = 4.0
    process_extent: float = 27.0                    # z extent of the arch ring
    endplate_defect_fraction: float = 0.0           # 0 disables the cap defect


@dataclass(frozen=True)
class PhantomSpec:
    vertebrae: tuple[VertebraSpec, ...]
    canal_radius: float = 8.0
    background_density: float = 0.0
    supersampling: int = 4
    noise_sigma: float = 0.0
    seed: int = 0
    spacing: tuple[float, float, float] = (0.5, 0.5, 1.0)
    pedicle_length: float = DEFAULT_PEDICLE_LENGTH
    arch_thickness: float = DEFAULT_ARCH_THICKNESS
    posterior_density: float = 620.0  # mixed trabecular/cortical posterior bone
    muscle_density: float = 60.0      # paraspinal / posterior soft tissue
    fat_density: float = -130.0       # anterior visceral fat compartment
    margin: float = 8.0

    def __post_init__(self):
        if not self.vertebrae:
            raise ValueError("phantom needs at least one vertebra")
        if self.supersampling < 1:
            raise ValueError("supersampling factor must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.posterior_density <= self.muscle_density:
            raise ValueError("posterior bone density must exceed soft tissue")
        if self.fat_density >= self.muscle_density:
            raise ValueError("fat must be less dense than muscle")
        zs = [v.center[2] for v in self.vertebrae]
        for prev, cur in zip(self.vertebrae, self.vertebrae[1:]):
            gap = cur.center[2] - prev.center[2]
            min_gap = max(prev.height, cur.height) + 2.0
            if gap < min_gap:
                raise ValueError(
                    f"vertebra centers must be separated by >= height + 2 mm "
                    f"(got {gap}, need {min_gap})")
        if list(zs) != sorted(zs):
            raise ValueError("vertebra centers must be strictly increasing along z")
        for v in self.vertebrae:
            if v.shell_thickness >= min(v.half_axes):
                raise ValueError("shell thickness must be < min half-axis")
            if v.pedicle_radius >= min(v.half_axes):
                raise ValueError("pedicle radius must be < body half-axis")
            if not (v.trabecular_density < v.cortical_density):
                raise ValueError("trabecular density must be below cortical")
            if v.trabecular_density <= self.background_density:
                raise ValueError("trabecular density must exceed background")
            if 2 * v.shell_thickness >= v.height:
                raise ValueError("shell caps must be thinner than half the body height")

    # -- derived layout -----------------------------------------------------

    @property
    def canal_center_xy(self) -> tuple[float, float]:
        v = self.vertebrae[0]
        cx, cy, _ = v.center
        b = v.half_axes[1]
        r_out = self.canal_radius + self.arch_thickness
        x_ped = self.canal_radius
        y_arch_entry = float(np.sqrt(max(r_out ** 2 - x_ped ** 2, 0.0)))
        return (cx, cy + b + self.pedicle_length + y_arch_entry)

    @property
    def pedicle_x_offset(self) -> float:
        return self.canal_radius

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2)

    @staticmethod
    def from_json(text: str) -> "PhantomSpec":
        d = json.loads(text)
        verts = tuple(VertebraSpec(center=tuple(v.pop("center")), **{
            k: (tuple(val) if isinstance(val, list) else val) for k, val in v.items()
        }) for v in d.pop("vertebrae"))
        for key in ("spacing",):
            if key in d:
                d[key] = tuple(d[key])
        return PhantomSpec(vertebrae=verts, **d)


@dataclass(frozen=True)
class VertebraTruth:
    center: tuple[float, float, float]
    trabecular_volume_cm3: float      # analytic elliptic-cylinder core volume
    trabecular_density: float
    body_mask: np.ndarray             # voxel centers inside the body (incl. shell)
    core_mask: np.ndarray             # voxel centers inside the trabecular core
    arch_mask: np.ndarray             # voxel centers inside the posterior ring
    pedicle_cylinders: tuple          # (axis_x, axis_z, radius, y_lo, y_hi) per side


@dataclass(frozen=True)
class GroundTruth:
    vertebrae: tuple[VertebraTruth, ...]

    def summary(self) -> dict:
        return {
            "vertebrae": [
                {
                    "center": list(v.center),
                    "trabecular_volume_cm3": v.trabecular_volume_cm3,
                    "trabecular_density": v.trabecular_density,
                    "pedicle_cylinders": [list(c) for c in v.pedicle_cylinders],
                }
                for v in self.vertebrae
            ]
        }


def default_spec(densities=(50.0, 100.0, 200.0), noise_sigma: float = 0.0,
                 seed: int = 0) -> PhantomSpec:
    """Three-vertebra phantom, 0.5 mm in-plane, 1 mm slices."""
    verts = tuple(
        VertebraSpec(center=(28.0, 22.0, 16.0 + 27.0 * i), trabecular_density=d)
        for i, d in enumerate(densities)
    )
    return PhantomSpec(vertebrae=verts, noise_sigma=noise_sigma, seed=seed)


# -- density field -------------------------------------------------------------


def _density_at(points, spec: PhantomSpec) -> np.ndarray:
    """Density (mg/cm^3) of the phantom material at world points (N, 3)."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    # two-compartment soft tissue: visceral fat anterior of the body centers,
    # paraspinal muscle posteriorly (plane through the shared body center)
    y_split = spec.vertebrae[0].center[1]
    dens = np.where(y < y_split, spec.fat_density, spec.muscle_density)
    dens = dens.astype(np.float64)
    ccx, ccy = spec.canal_center_xy
    r_in = spec.canal_radius
    r_out = spec.canal_radius + spec.arch_thickness
    rho2 = (x - ccx) ** 2 + (y - ccy) ** 2

    for v in spec.vertebrae:
        cx, cy, cz = v.center
        a, b = v.half_axes
        t = v.shell_thickness
        dz = np.abs(z - cz)
        in_h = dz <= v.height / 2
        e_out = ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2
        body = in_h & (e_out <= 1.0)
        core = ((dz <= v.height / 2 - t)
                & (((x - cx) / (a - t)) ** 2 + ((y - cy) / (b - t)) ** 2 <= 1.0))
        shell = body & ~core
        if v.endplate_defect_fraction > 0:
            # circular defect punched through both endplate caps
            rd = np.sqrt(v.endplate_defect_fraction * (a - t) * (b - t))
            hole = ((x - cx) ** 2 + (y - cy) ** 2 <= rd ** 2) & (dz > v.height / 2 - t) & body
            shell = shell & ~hole
            core = core | (body & hole)
        dens[core] = v.trabecular_density
        dens[shell] = v.cortical_density

        # pedicles: cylinders along y on both sides of the canal
        for s in (-1.0, 1.0):
            ax = ccx + s * spec.pedicle_x_offset
            ped = (((x - ax) ** 2 + (z - cz) ** 2 <= v.pedicle_radius ** 2)
                   & (y >= cy) & (y <= ccy))
            dens[ped & ~core] = spec.posterior_density

        # posterior arch ring
        arch = (rho2 >= r_in ** 2) & (rho2 <= r_out ** 2) & (dz <= v.process_extent / 2)
        dens[arch] = spec.posterior_density

    # spinal canal stays non-bone through everything (CSF-like)
    dens[rho2 < r_in ** 2] = spec.background_density + 15.0
    return dens


def _grid_geometry(spec: PhantomSpec):
    """Volume extents with margin; z origin on an integer mm so flat interfaces
    fall on voxel boundaries."""
    sx, sy, sz = spec.spacing
    m = spec.margin
    ccx, ccy = spec.canal_center_xy
    xs = [v.center[0] for v in spec.vertebrae]
    ys = [v.center[1] for v in spec.vertebrae]
    zs = [v.center[2] for v in spec.vertebrae]
    amax = max(v.half_axes[0] for v in spec.vertebrae)
    bmax = max(v.half_axes[1] for v in spec.vertebrae)
    hmax = max(v.height for v in spec.vertebrae)
    r_out = spec.canal_radius + spec.arch_thickness
    x_lo = min(min(xs) - amax, ccx - r_out) - m
    x_hi = max(max(xs) + amax, ccx + r_out) + m
    y_lo = min(ys) - bmax - m
    y_hi = ccy + r_out + m
    z_lo = np.floor(min(zs) - hmax / 2 - 3.5)
    z_hi = np.ceil(max(zs) + hmax / 2 + 3.5)
    nx = int(np.ceil((x_hi - x_lo) / sx)) + 1
    ny = int(np.ceil((y_hi - y_lo) / sy)) + 1
    nz = int(round((z_hi - z_lo) / sz)) + 1
    origin = (float(x_lo), float(y_lo), float(z_lo))
    return (nx, ny, nz), origin


def generate_phantom(spec: PhantomSpec) -> tuple[VoxelVolume, GroundTruth]:
    """Render the phantom and its ground truth.

    Voxels whose corner samples all agree take that single material density;
    voxels straddling a material interface are averaged over supersampling^3
    sub-samples. Noise (if any) is added after ground truth is recorded.
    """
    dims, origin = _grid_geometry(spec)
    nx, ny, nz = dims
    sx, sy, sz = spec.spacing

    # corner lattice: (nx+1, ny+1, nz+1) points at voxel corners
    cx = origin[0] + (np.arange(nx + 1) - 0.5) * sx
    cy = origin[1] + (np.arange(ny + 1) - 0.5) * sy
    cz = origin[2] + (np.arange(nz + 1) - 0.5) * sz
    corners = np.stack(np.meshgrid(cx, cy, cz, indexing="ij"), axis=-1)
    cdens = _density_at(corners.reshape(-1, 3), spec).reshape(nx + 1, ny + 1, nz + 1)

    first = cdens[:-1, :-1, :-1]
    uniform = np.ones((nx, ny, nz), dtype=bool)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                if di == dj == dk == 0:
                    continue
                uniform &= cdens[di:nx + di, dj:ny + dj, dk:nz + dk] == first

    values = np.empty((nx, ny, nz), dtype=np.float64)
    # uniform voxels: single sample at the center (identical for any factor)
    centers_axes = [origin[a] + np.arange(dims[a]) * spec.spacing[a] for a in range(3)]
    boundary = np.argwhere(~uniform)
    uni_idx = np.argwhere(uniform)
    if len(uni_idx):
        pts = np.stack([centers_axes[a][uni_idx[:, a]] for a in range(3)], axis=1)
        values[uniform] = _density_at(pts, spec)

    if len(boundary):
        ss = spec.supersampling
        offs = [((np.arange(ss) + 0.5) / ss - 0.5) * spec.spacing[a] for a in range(3)]
        sub = np.stack(np.meshgrid(*offs, indexing="ij"), axis=-1).reshape(-1, 3)
        base = np.stack([centers_axes[a][boundary[:, a]] for a in range(3)], axis=1)
        acc = np.zeros(len(boundary))
        chunk = max(1, 4_000_000 // max(len(sub), 1))
        for lo in range(0, len(boundary), chunk):
            blk = base[lo:lo + chunk]
            pts = (blk[:, None, :] + sub[None, :, :]).reshape(-1, 3)
            acc[lo:lo + chunk] = _density_at(pts, spec).reshape(len(blk), -1).mean(axis=1)
        values[boundary[:, 0], boundary[:, 1], boundary[:, 2]] = acc

    hu = np.clip(np.rint(values), -32768, 32767).astype(np.int16)
    volume = VoxelVolume(hu, spec.spacing, origin)
    truth = _ground_truth(spec, volume)
    if spec.noise_sigma > 0:
        volume = add_noise(volume, spec.noise_sigma, spec.seed)
    return volume, truth


def _ground_truth(spec: PhantomSpec, volume: VoxelVolume) -> GroundTruth:
    nx, ny, nz = volume.dims
    axes = [np.asarray(volume.origin)[a] + np.arange(volume.dims[a]) * volume.spacing[a]
            for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    ccx, ccy = spec.canal_center_xy
    r_in, r_out = spec.canal_radius, spec.canal_radius + spec.arch_thickness
    rho2 = (X - ccx) ** 2 + (Y - ccy) ** 2
    canal = rho2 < r_in ** 2

    out = []
    for v in spec.vertebrae:
        vx, vy, vz = v.center
        a, b = v.half_axes
        t = v.shell_thickness
        dz = np.abs(Z - vz)
        body = (dz <= v.height / 2) & (((X - vx) / a) ** 2 + ((Y - vy) / b) ** 2 <= 1.0)
        # conservative core voxelization: the whole voxel box must sit inside
        # the analytic core, so no partial-volume voxel pollutes the mask
        hx, hy, hz = (s / 2.0 for s in volume.spacing)
        core = dz + hz <= v.height / 2 - t
        for ox in (-hx, hx):
            for oy in (-hy, hy):
                core &= (((X + ox - vx) / (a - t)) ** 2
                         + ((Y + oy - vy) / (b - t)) ** 2) <= 1.0
        arch = ((rho2 >= r_in ** 2) & (rho2 <= r_out ** 2)
                & (dz <= v.process_extent / 2) & ~canal)
        vol_mm3 = np.pi * (a - t) * (b - t) * (v.height - 2 * t)
        peds = []
        for s in (-1.0, 1.0):
            ax = ccx + s * spec.pedicle_x_offset
            frac = min(abs(ax - vx) + v.pedicle_radius, a) / a
            y_lo = vy + b * np.sqrt(max(1.0 - frac ** 2, 0.0))
            peds.append((float(ax), float(vz), float(v.pedicle_radius),
                         float(y_lo), float(ccy)))
        out.append(VertebraTruth(
            center=v.center,
            trabecular_volume_cm3=float(vol_mm3 / 1000.0),
            trabecular_density=float(v.trabecular_density),
            body_mask=body,
            core_mask=core,
            arch_mask=arch,
            pedicle_cylinders=tuple(peds),
        ))
    return GroundTruth(vertebrae=tuple(out))


def add_noise(volume: VoxelVolume, sigma: float, seed: int) -> VoxelVolume:
    """Independent zero-mean Gaussian noise per voxel, rounded to int16.

    Counter-based RNG keyed by the seed; deterministic regardless of worker
    count."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return volume
    rng = np.random.Generator(np.random.Philox(key=seed))
    noise = rng.normal(0.0, sigma, size=volume.dims)
    noisy = np.clip(np.rint(volume.values + noise), -32768, 32767).astype(np.int16)
    return VoxelVolume(noisy, volume.spacing, volume.origin)

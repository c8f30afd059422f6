"""Voxel grids over a masked spatial domain and Gaussian kernel bases.

The domain is a rectangular lattice of voxels with physical (mm) world
coordinates plus a boolean inclusion mask.  Log intensities are linear
combinations of a constant basis and isotropic Gaussian kernels evaluated
at masked voxel centers; integrals over the domain are midpoint Riemann
sums at mask resolution so that likelihood and gradient share a single
quadrature rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Log intensities above this raise IntensityOverflowError: exp() would
# push the Riemann sum outside float64 range.
MAX_LOG_INTENSITY = 690.0

# Kernels whose maximum value over the mask falls below this are rejected.
MIN_KERNEL_MASS = 1e-12


class IntensityOverflowError(FloatingPointError):
    """Raised when exp(log-intensity) would overflow the quadrature sum."""

    def __init__(self, max_log_intensity: float):
        self.max_log_intensity = float(max_log_intensity)
        super().__init__(
            f"intensity overflow: max log-intensity {self.max_log_intensity:.3f} "
            f"exceeds {MAX_LOG_INTENSITY}"
        )


@dataclass(frozen=True)
class VolumeGrid:
    """Rectangular voxel lattice with a boolean inclusion mask.

    ``origin`` is the world coordinate of the center of voxel (0, 0, 0).
    ``voxel_volume`` is the product of the three voxel sizes; for
    single-slice grids (nz = 1) the z size acts as a unit thickness and
    areas take the place of volumes throughout.
    """

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float]
    mask: np.ndarray
    voxel_volume: float = field(init=False)
    masked_centers: np.ndarray = field(init=False, repr=False)
    masked_indices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != tuple(self.dims):
            raise ValueError(f"mask shape {mask.shape} != dims {self.dims}")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "voxel_volume", float(np.prod(self.voxel_size)))
        idx = np.argwhere(mask)
        object.__setattr__(self, "masked_indices", idx)
        centers = self.index_to_world(idx)
        centers.setflags(write=False)
        object.__setattr__(self, "masked_centers", centers)

    @property
    def n_masked(self) -> int:
        return self.masked_indices.shape[0]

    @property
    def domain_measure(self) -> float:
        """Total measure |B| of the masked domain."""
        return self.n_masked * self.voxel_volume

    def index_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return np.asarray(self.origin) + idx * np.asarray(self.voxel_size)

    def world_to_index(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = (pts - np.asarray(self.origin)) / np.asarray(self.voxel_size)
        return np.rint(rel).astype(int)

    def in_bounds(self, points) -> np.ndarray:
        """True where points fall inside the grid bounding box.

        The box extends half a voxel beyond the outermost voxel centers.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.asarray(self.origin) - 0.5 * np.asarray(self.voxel_size)
        hi = lo + np.asarray(self.dims) * np.asarray(self.voxel_size)
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def snap_to_mask(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Snap points to voxel centers, reassigning off-mask points.

        Returns (snapped world coordinates, flags) where a True flag marks
        a point that had to be moved to the nearest masked voxel center
        rather than its own voxel's center.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = self.world_to_index(pts)
        idx = np.clip(idx, 0, np.asarray(self.dims) - 1)
        on_mask = self.mask[idx[:, 0], idx[:, 1], idx[:, 2]]
        snapped = self.index_to_world(idx)
        moved = ~on_mask
        if np.any(moved):
            from scipy.spatial import cKDTree

            tree = cKDTree(self.masked_centers)
            _, nearest = tree.query(pts[moved])
            snapped[moved] = self.masked_centers[nearest]
        return snapped, moved


def box_mask(dims: tuple[int, int, int]) -> np.ndarray:
    """All-true mask, handy for tests and synthetic slices."""
    return np.ones(dims, dtype=bool)


def build_grid(dims, voxel_size, origin, mask) -> VolumeGrid:
    """Construct a VolumeGrid, validating the domain is non-empty."""
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    voxel_size = tuple(float(v) for v in voxel_size)
    if any(v <= 0 for v in voxel_size):
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty domain")
    return VolumeGrid(dims=dims, voxel_size=voxel_size,
                      origin=tuple(float(o) for o in origin), mask=mask.copy())


def default_kernel_layout(grid: VolumeGrid, z_slices, nx: int, ny: int) -> np.ndarray:
    """Place kernel centers on equally spaced (x, y) lattices per axial slice.

    For each requested z (mm), the slice is snapped to the nearest voxel
    layer and an ``nx`` x ``ny`` lattice spans the bounding box of the
    masked voxel centers in that layer (a single lattice point sits at the
    box midpoint).  Lattice points whose containing voxel is unmasked are
    discarded, so fewer than nx * ny * len(z_slices) centers may return.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    z_slices = list(z_slices)
    if not z_slices:
        raise ValueError("z_slices must be nonempty")
    oz, vz = grid.origin[2], grid.voxel_size[2]
    centers = []
    for z in z_slices:
        iz = int(round((z - oz) / vz))
        if iz < 0 or iz >= grid.dims[2]:
            continue
        layer = grid.mask[:, :, iz]
        if not layer.any():
            continue
        ii, jj = np.nonzero(layer)
        x_lo = grid.origin[0] + ii.min() * grid.voxel_size[0]
        x_hi = grid.origin[0] + ii.max() * grid.voxel_size[0]
        y_lo = grid.origin[1] + jj.min() * grid.voxel_size[1]
        y_hi = grid.origin[1] + jj.max() * grid.voxel_size[1]
        xs = np.linspace(x_lo, x_hi, nx) if nx > 1 else np.array([(x_lo + x_hi) / 2.0])
        ys = np.linspace(y_lo, y_hi, ny) if ny > 1 else np.array([(y_lo + y_hi) / 2.0])
        z_plane = oz + iz * vz
        for x in xs:
            for y in ys:
                ix = int(round((x - grid.origin[0]) / grid.voxel_size[0]))
                jy = int(round((y - grid.origin[1]) / grid.voxel_size[1]))
                ix = min(max(ix, 0), grid.dims[0] - 1)
                jy = min(max(jy, 0), grid.dims[1] - 1)
                if grid.mask[ix, jy, iz]:
                    centers.append((x, y, z_plane))
    return np.array(centers, dtype=float).reshape(-1, 3)


@dataclass(frozen=True)
class BasisSet:
    """Constant basis plus isotropic Gaussian kernels.

    ``voxel_design`` holds basis values at the grid's masked voxel
    centers, one row per voxel; column 0 is the constant basis.
    """

    p: int
    centers: np.ndarray
    bandwidth: float
    voxel_design: np.ndarray

    def __post_init__(self):
        self.centers.setflags(write=False)
        self.voxel_design.setflags(write=False)

    @property
    def n_voxels(self) -> int:
        return self.voxel_design.shape[0]

    def design_at(self, points) -> np.ndarray:
        """Evaluate all basis functions at arbitrary world points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((pts.shape[0], self.p))
        out[:, 0] = 1.0
        if self.p > 1:
            d2 = ((pts[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
            out[:, 1:] = np.exp(-self.bandwidth * d2)
        return out


def build_basis(grid: VolumeGrid, centers, bandwidth: float) -> BasisSet:
    """Build the design matrix over masked voxels for the given kernels.

    Raises if any kernel is so far outside the mask that its values
    underflow everywhere (it would contribute nothing but still cost a
    coefficient).
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    p = centers.shape[0] + 1
    design = np.empty((grid.n_masked, p))
    design[:, 0] = 1.0
    vox = grid.masked_centers
    for m in range(centers.shape[0]):
        d2 = ((vox - centers[m]) ** 2).sum(axis=1)
        col = np.exp(-bandwidth * d2)
        if col.max() < MIN_KERNEL_MASS:
            raise ValueError(f"kernel outside domain: center {centers[m].tolist()}")
        design[:, m + 1] = col
    return BasisSet(p=p, centers=centers, bandwidth=float(bandwidth),
                    voxel_design=design)


def eval_log_intensity(basis: BasisSet, theta, points) -> np.ndarray:
    """Log intensity b(v)' theta at the given world points."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (basis.p,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({basis.p},)")
    return basis.design_at(points) @ theta


def intensity_integral(basis: BasisSet, theta, grid: VolumeGrid,
                       refine: int = 1) -> float:
    """Integral of exp(b(v)' theta) over the masked domain.

    Midpoint Riemann sum at mask resolution; ``refine`` subdivides each
    voxel (along axes with more than one voxel) for validation runs only.
    The sampler always uses refine=1 so the likelihood and its gradient
    share one quadrature.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (basis.p,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({basis.p},)")
    if refine == 1:
        log_int = basis.voxel_design @ theta
        mx = log_int.max()
        if mx > MAX_LOG_INTENSITY:
            raise IntensityOverflowError(mx)
        return float(np.exp(log_int).sum() * grid.voxel_volume)

    offsets_per_axis = []
    for ax in range(3):
        if grid.dims[ax] > 1:
            f = refine
            step = grid.voxel_size[ax] / f
            offs = (np.arange(f) + 0.5) * step - grid.voxel_size[ax] / 2.0
        else:
            offs = np.array([0.0])
        offsets_per_axis.append(offs)
    gx, gy, gz = np.meshgrid(*offsets_per_axis, indexing="ij")
    offsets = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    sub_volume = grid.voxel_volume / offsets.shape[0]
    total = 0.0
    for off in offsets:
        log_int = eval_log_intensity(basis, theta, grid.masked_centers + off)
        mx = log_int.max()
        if mx > MAX_LOG_INTENSITY:
            raise IntensityOverflowError(mx)
        total += np.exp(log_int).sum() * sub_volume
    return float(total)


def save_centers_csv(path, centers) -> None:
    """Write kernel centers as CSV rows (m, x, y, z); m=1 is the constant."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("m,x_mm,y_mm,z_mm\n")
        for m, (x, y, z) in enumerate(centers, start=2):
            fh.write(f"{m},{x:.6g},{y:.6g},{z:.6g}\n")

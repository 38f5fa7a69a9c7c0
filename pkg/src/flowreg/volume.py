"""Grids, volumes, and continuous trilinear sampling in unit coordinates.

All continuous positions live in the unit cube [-1, 1]^3: voxel index 0
maps to -1 and index dim-1 maps to +1 along each axis. Displacement
fields are stored in unit-coordinate units, which keeps field density
independent of image resolution.

Scalar data is held as float64 arrays of shape (nz, ny, nx), so the flat
C-order layout is x-fastest. Vector fields carry a trailing component
axis ordered (x, y, z). Out-of-range sample coordinates are clamped to
the volume border.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Continuous indices this close to an integer are snapped onto it. The
# unit->index round trip is not exact in float64 for most dims, and the
# snap is what lets sampling at node coordinates reproduce stored values
# bit-exactly (needed for the zero-displacement identity warp).
_NODE_SNAP = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Regular 3D grid described by dims (nx, ny, nz), spacing, origin.

    `spacing` is the physical distance between adjacent nodes, so the
    grid spans (dim - 1) * spacing per axis. `origin` is the physical
    position of node (0, 0, 0). The registration math itself runs in
    unit coordinates; spacing and origin are carried as metadata.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or any(d < 2 for d in self.dims):
            raise ValueError(f"grid dims must be >= 2 per axis, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"grid spacing must be > 0 per axis, got {self.spacing}")
        if len(self.origin) != 3:
            raise ValueError(f"grid origin must have 3 components, got {self.origin}")

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        nx, ny, nz = self.dims
        return (nz, ny, nx)


def _as_zyx(data, grid: GridSpec, n_comp: int | None = None) -> np.ndarray:
    """Coerce flat or shaped input to (nz, ny, nx[, n_comp]) float64."""
    shape = grid.shape_zyx if n_comp is None else grid.shape_zyx + (n_comp,)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim <= 2:
        arr = arr.reshape(shape)
    if arr.shape != shape:
        raise ValueError(f"data shape {arr.shape} does not match grid {shape}")
    return np.ascontiguousarray(arr)


@dataclass
class Volume3:
    """Scalar 3D image on a regular grid."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = _as_zyx(self.data, self.grid)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    def copy(self) -> "Volume3":
        return Volume3(self.grid, self.data.copy())


@dataclass
class VectorField3:
    """3-vector field on a regular grid; components stored as (x, y, z)."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = _as_zyx(self.data, self.grid, n_comp=3)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("vector field contains non-finite values")

    @property
    def vectors(self) -> np.ndarray:
        """Flat (n_nodes, 3) view, x-fastest node order."""
        return self.data.reshape(-1, 3)

    def copy(self) -> "VectorField3":
        return VectorField3(self.grid, self.data.copy())


@dataclass
class LabelMask:
    """Small-integer label volume; 0 is background."""

    grid: GridSpec
    data: np.ndarray
    labels: tuple[int, ...] = field(default=None)  # declared non-zero labels

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("label mask data must be integer")
        arr = np.ascontiguousarray(arr.astype(np.uint16).reshape(self.grid.shape_zyx))
        self.data = arr
        present = tuple(int(v) for v in np.unique(arr) if v != 0)
        if self.labels is None:
            self.labels = present
        else:
            self.labels = tuple(int(l) for l in self.labels)
            extra = set(present) - set(self.labels)
            if extra:
                raise ValueError(f"mask contains labels outside declared set: {sorted(extra)}")

    def copy(self) -> "LabelMask":
        return LabelMask(self.grid, self.data.copy(), self.labels)


def zeros_volume(grid: GridSpec) -> Volume3:
    return Volume3(grid, np.zeros(grid.shape_zyx))


def zeros_field(grid: GridSpec) -> VectorField3:
    return VectorField3(grid, np.zeros(grid.shape_zyx + (3,)))


# ---------------------------------------------------------------------------
# coordinates


def normalize_coords(grid: GridSpec, voxel_index) -> np.ndarray:
    """Map voxel indices to unit coordinates: 0 -> -1, dim-1 -> +1, affinely.

    Accepts a single index triple or an (n, 3) array; defined for all real
    inputs, including out-of-range ones.
    """
    idx = np.asarray(voxel_index, dtype=np.float64)
    m = np.asarray(grid.dims, dtype=np.float64) - 1.0
    return 2.0 * idx / m - 1.0


def denormalize_coords(grid: GridSpec, p) -> np.ndarray:
    """Inverse of normalize_coords: unit coordinates to continuous indices."""
    pts = np.asarray(p, dtype=np.float64)
    m = np.asarray(grid.dims, dtype=np.float64) - 1.0
    return (pts + 1.0) * (m * 0.5)


def grid_unit_points(dims: tuple[int, int, int]) -> np.ndarray:
    """Unit coordinates of every node, shape (n_nodes, 3), x-fastest order."""
    nx, ny, nz = dims
    ax = [2.0 * np.arange(n, dtype=np.float64) / (n - 1) - 1.0 for n in (nx, ny, nz)]
    zz, yy, xx = np.meshgrid(ax[2], ax[1], ax[0], indexing="ij")
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)


def grid_index_points(dims: tuple[int, int, int]) -> np.ndarray:
    """Integer node indices as float64, shape (n_nodes, 3), x-fastest order."""
    nx, ny, nz = dims
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)


def _to_continuous_index(pts: np.ndarray, dims) -> np.ndarray:
    """Unit coords -> continuous indices with the node snap, unclamped."""
    m = np.asarray(dims, dtype=np.float64) - 1.0
    c = (pts + 1.0) * (m * 0.5)
    snapped = np.rint(c)
    return np.where(np.abs(c - snapped) <= _NODE_SNAP, snapped, c)


def _corner_setup(c: np.ndarray, dims):
    """Clamp continuous indices and split into lower corner + fraction."""
    m = np.asarray(dims, dtype=np.float64) - 1.0
    c = np.clip(c, 0.0, m)
    i0 = np.minimum(np.floor(c), m - 1.0).astype(np.int64)
    f = c - i0
    return i0, f


def _flat_corner_index(i0: np.ndarray, dims, dx: int, dy: int, dz: int) -> np.ndarray:
    nx, ny, _ = dims
    return ((i0[:, 2] + dz) * ny + (i0[:, 1] + dy)) * nx + (i0[:, 0] + dx)


_CORNERS = [(dx, dy, dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)]


def _corner_weights(f: np.ndarray) -> list[np.ndarray]:
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    return [wx[dx] * wy[dy] * wz[dz] for dx, dy, dz in _CORNERS]


def _blend(node_values: np.ndarray, dims, i0: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Trilinear blend; node_values is (n_nodes,) or (n_nodes, k)."""
    weights = _corner_weights(f)
    vec = node_values.ndim == 2
    out = None
    for (dx, dy, dz), w in zip(_CORNERS, weights):
        vals = node_values[_flat_corner_index(i0, dims, dx, dy, dz)]
        term = vals * (w[:, None] if vec else w)
        out = term if out is None else out + term
    return out


def sample_trilinear_many(vol: Volume3, pts: np.ndarray) -> np.ndarray:
    """Trilinear samples of a scalar volume at unit points, shape (n,)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    c = _to_continuous_index(pts, vol.grid.dims)
    i0, f = _corner_setup(c, vol.grid.dims)
    return _blend(vol.data.reshape(-1), vol.grid.dims, i0, f)


def sample_trilinear(vol: Volume3, p) -> float:
    """Trilinear interpolation at one unit point, border-clamped."""
    return float(sample_trilinear_many(vol, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def sample_field_trilinear_many(field: VectorField3, pts: np.ndarray) -> np.ndarray:
    """Component-wise trilinear samples of a vector field, shape (n, 3)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    c = _to_continuous_index(pts, field.grid.dims)
    i0, f = _corner_setup(c, field.grid.dims)
    return _blend(field.vectors, field.grid.dims, i0, f)


def sample_field_trilinear(field: VectorField3, p) -> np.ndarray:
    """Vector-field analogue of sample_trilinear; returns a (3,) array."""
    return sample_field_trilinear_many(field, np.asarray(p, dtype=np.float64).reshape(1, 3))[0]


# ---------------------------------------------------------------------------
# gradients of the interpolant


def _gradient_corner_setup(c: np.ndarray, dims):
    """Corner setup for derivatives: ties on cell faces go to the lower cell."""
    m = np.asarray(dims, dtype=np.float64) - 1.0
    c = np.clip(c, 0.0, m)
    i0 = np.clip(np.ceil(c) - 1.0, 0.0, m - 1.0).astype(np.int64)
    f = c - i0
    return i0, f


def _blend_gradient(node_values: np.ndarray, dims, i0, f, scale) -> np.ndarray:
    """Analytic spatial derivative of the trilinear blend, unit coords."""
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    corner = {
        (dx, dy, dz): node_values[_flat_corner_index(i0, dims, dx, dy, dz)]
        for dx, dy, dz in _CORNERS
    }
    gx = np.zeros_like(fx)
    gy = np.zeros_like(fy)
    gz = np.zeros_like(fz)
    for a in (0, 1):
        for b in (0, 1):
            gx += (corner[(1, a, b)] - corner[(0, a, b)]) * wy[a] * wz[b]
            gy += (corner[(a, 1, b)] - corner[(a, 0, b)]) * wx[a] * wz[b]
            gz += (corner[(a, b, 1)] - corner[(a, b, 0)]) * wx[a] * wy[b]
    return np.stack([gx, gy, gz], axis=-1) * scale


def spatial_gradient_many(vol: Volume3, pts: np.ndarray) -> np.ndarray:
    """Exact gradient of the trilinear interpolant at unit points, (n, 3).

    The derivative is piecewise constant per cell per axis; points on a
    cell face use the lower cell. Components are zero where the query is
    strictly outside [-1, 1] (border clamp makes the interpolant flat).
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    dims = vol.grid.dims
    c = _to_continuous_index(pts, dims)
    i0, f = _gradient_corner_setup(c, dims)
    m = np.asarray(dims, dtype=np.float64) - 1.0
    grad = _blend_gradient(vol.data.reshape(-1), dims, i0, f, m * 0.5)
    grad[(pts < -1.0) | (pts > 1.0)] = 0.0
    return grad


def spatial_gradient(vol: Volume3, p) -> np.ndarray:
    """Gradient of the interpolant at one unit point; returns (3,)."""
    return spatial_gradient_many(vol, np.asarray(p, dtype=np.float64).reshape(1, 3))[0]


def scatter_trilinear(dims: tuple[int, int, int], pts: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Adjoint of trilinear field sampling: accumulate values onto nodes.

    For each point, its (n, 3) value is distributed to the 8 surrounding
    nodes with the same weights sample_field_trilinear_many would use.
    Returns (n_nodes, 3). Uses fixed-order reductions, so results are
    deterministic.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    values = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    c = _to_continuous_index(pts, dims)
    i0, f = _corner_setup(c, dims)
    n_nodes = int(np.prod(dims))
    out = np.zeros((n_nodes, 3))
    weights = _corner_weights(f)
    for (dx, dy, dz), w in zip(_CORNERS, weights):
        flat = _flat_corner_index(i0, dims, dx, dy, dz)
        for comp in range(3):
            out[:, comp] += np.bincount(flat, weights=w * values[:, comp], minlength=n_nodes)
    return out


# ---------------------------------------------------------------------------
# warping and resampling


def _warp_indices(grid_in: GridSpec, S: VectorField3, out_grid: GridSpec) -> np.ndarray:
    """Continuous indices into grid_in for every out_grid node under S.

    The pull-back convention: output node at unit point x looks up the
    input at x + S(x). When the grids share dims the base indices are
    taken as exact integers, so a zero field reproduces input nodes
    bit-exactly.
    """
    uout = grid_unit_points(out_grid.dims)
    d = sample_field_trilinear_many(S, uout)
    m = np.asarray(grid_in.dims, dtype=np.float64) - 1.0
    if out_grid.dims == grid_in.dims:
        base = grid_index_points(grid_in.dims)
    else:
        base = _to_continuous_index(uout, grid_in.dims)
    c = base + d * (m * 0.5)
    snapped = np.rint(c)
    return np.where(np.abs(c - snapped) <= _NODE_SNAP, snapped, c)


def warp_volume(vol: Volume3, S: VectorField3, out_grid: GridSpec) -> Volume3:
    """Warp a volume by a displacement field (pull-back, border-clamped).

    S maps fixed-image coordinates into moving-image coordinates and is
    sampled continuously, so its grid density is independent of both the
    input and output grids.
    """
    c = _warp_indices(vol.grid, S, out_grid)
    i0, f = _corner_setup(c, vol.grid.dims)
    out = _blend(vol.data.reshape(-1), vol.grid.dims, i0, f)
    return Volume3(out_grid, out.reshape(out_grid.shape_zyx))


def warp_mask_nearest(mask: LabelMask, S: VectorField3, out_grid: GridSpec) -> LabelMask:
    """Warp a label mask with nearest-neighbor lookup; labels never blend."""
    c = _warp_indices(mask.grid, S, out_grid)
    m = np.asarray(mask.grid.dims, dtype=np.float64) - 1.0
    idx = np.rint(np.clip(c, 0.0, m)).astype(np.int64)
    nx, ny, _ = mask.grid.dims
    flat = (idx[:, 2] * ny + idx[:, 1]) * nx + idx[:, 0]
    out = mask.data.reshape(-1)[flat]
    return LabelMask(out_grid, out.reshape(out_grid.shape_zyx), mask.labels)


def resample_field(field: VectorField3, new_dims: tuple[int, int, int]) -> VectorField3:
    """Resample a vector field onto a new grid density by trilinear sampling.

    Node values of the output are samples of the input field at the output
    nodes' unit coordinates. Resampling to the same dims is the identity.
    """
    new_dims = tuple(int(d) for d in new_dims)
    if any(d < 2 for d in new_dims):
        raise ValueError(f"resample dims must be >= 2 per axis, got {new_dims}")
    pts = grid_unit_points(new_dims)
    vals = sample_field_trilinear_many(field, pts)
    g = field.grid
    spacing = tuple(
        s * (d - 1) / (nd - 1) for s, d, nd in zip(g.spacing, g.dims, new_dims)
    )
    return VectorField3(GridSpec(new_dims, spacing, g.origin), vals.reshape((*reversed(new_dims),) + (3,)))


def downsample_volume(vol: Volume3, new_dims: tuple[int, int, int]) -> Volume3:
    """Box-average pooling onto a coarser grid, preserving physical extent.

    Each input voxel i contributes to output voxel floor(i * new / old)
    along every axis; output values are the means over those pre-images.
    """
    new_dims = tuple(int(d) for d in new_dims)
    old_dims = vol.grid.dims
    if any(d < 2 for d in new_dims):
        raise ValueError(f"downsample dims must be >= 2 per axis, got {new_dims}")
    if any(nd > od for nd, od in zip(new_dims, old_dims)):
        raise ValueError(f"downsample requires new_dims <= dims, got {new_dims} > {old_dims}")

    group = []  # per-axis output index of every input index, x/y/z order
    for od, nd in zip(old_dims, new_dims):
        group.append(np.minimum((np.arange(od) * nd) // od, nd - 1))
    gx, gy, gz = group
    nxn, nyn, _ = new_dims
    # flat output index per input voxel, shaped like the data
    flat = (
        (gz[:, None, None] * nyn + gy[None, :, None]) * nxn + gx[None, None, :]
    ).reshape(-1)
    n_out = int(np.prod(new_dims))
    sums = np.bincount(flat, weights=vol.data.reshape(-1), minlength=n_out)
    counts = np.bincount(flat, minlength=n_out)
    data = (sums / counts).reshape(tuple(reversed(new_dims)))
    g = vol.grid
    spacing = tuple(s * (od - 1) / (nd - 1) for s, od, nd in zip(g.spacing, old_dims, new_dims))
    return Volume3(GridSpec(new_dims, spacing, g.origin), data)

"""Similarity metrics, velocity regularizer, and exact loss gradients.

The gradient engine is reverse-mode differentiation written out by hand:
the image term back-propagates through trilinear warping (via the
analytic gradient of the interpolant) and through every Euler step of
the unrolled integration, including the dependence of later velocity
queries on earlier positions. No autodiff framework is involved, which
keeps evaluation deterministic and lets a finite-difference oracle act
as a fully independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import FlowConfig, rollout_tape
from .velocity_net import MLPParams, ParamGradient, backward_batch
from .volume import (
    _CORNERS,
    _NODE_SNAP,
    VectorField3,
    Volume3,
    _corner_setup,
    _corner_weights,
    _flat_corner_index,
    _gradient_corner_setup,
    _to_continuous_index,
    grid_index_points,
    grid_unit_points,
)

SIM_METRICS = ("mse", "ncc")

# Variance below this makes NCC degenerate; the correlation is defined as 0.
_NCC_VAR_FLOOR = 1e-12


def _require_same_grid(A, B, what: str):
    if A.grid.dims != B.grid.dims:
        raise ValueError(f"{what} requires matching grids, got {A.grid.dims} vs {B.grid.dims}")


@dataclass(frozen=True)
class LossBreakdown:
    """One objective evaluation split into its terms.

    total == similarity + lam * regularizer + distill; `lam` is the
    regularizer weight that was applied. `distill` is zero for the plain
    registration objective.
    """

    total: float
    similarity: float
    regularizer: float
    distill: float
    lam: float


def _breakdown(similarity: float, regularizer: float, distill: float, lam: float) -> LossBreakdown:
    return LossBreakdown(
        total=similarity + lam * regularizer + distill,
        similarity=similarity,
        regularizer=regularizer,
        distill=distill,
        lam=lam,
    )


def mse(A: Volume3, B: Volume3) -> float:
    """Mean squared voxel difference."""
    _require_same_grid(A, B, "mse")
    d = A.data - B.data
    return float(np.mean(d * d))


def ncc(A: Volume3, B: Volume3) -> float:
    """Pearson correlation of voxel values, in [-1, 1].

    If either volume is (numerically) constant the correlation is defined
    as 0. The optimizer consumes the loss form 1 - ncc.
    """
    _require_same_grid(A, B, "ncc")
    n = A.data.size
    a = A.data.reshape(-1) - A.data.mean()
    b = B.data.reshape(-1) - B.data.mean()
    va = float(a @ a)
    vb = float(b @ b)
    if va / n < _NCC_VAR_FLOOR or vb / n < _NCC_VAR_FLOOR:
        return 0.0
    return float(a @ b) / np.sqrt(va * vb)


def _similarity_and_grad(metric: str, warped: np.ndarray, fixed: np.ndarray):
    """Similarity loss value and its gradient wrt the warped voxels."""
    n = warped.size
    if metric == "mse":
        d = warped - fixed
        return float(np.mean(d * d)), 2.0 * d / n
    if metric == "ncc":
        a = warped - warped.mean()
        b = fixed - fixed.mean()
        va = float(a @ a)
        vb = float(b @ b)
        if va / n < _NCC_VAR_FLOOR or vb / n < _NCC_VAR_FLOOR:
            return 1.0, np.zeros_like(warped)
        denom = np.sqrt(va * vb)
        r = float(a @ b) / denom
        # d(1 - r)/dA = -(b/denom - r * a/va)
        return 1.0 - r, -(b / denom - r * a / va)
    raise ValueError(f"metric must be one of {SIM_METRICS}, got {metric!r}")


def velocity_regularizer(snaps, gamma: float = 1.0) -> float:
    """Average squared Sobolev-type norm of the saved velocity fields.

    For each snapshot: mean-over-nodes |v|^2 plus gamma times the
    mean-over-nodes squared forward-difference spatial gradient (unit
    coordinates). The average over the n snapshots realizes the
    discretized time integral of the velocity norm.
    """
    stacked, dims = _snapshot_array(snaps)
    value, _ = _regularizer_and_grad(stacked, dims, gamma, need_grad=False)
    return value


def _snapshot_array(snaps):
    """Accept VelocitySnapshots or a raw (n, n_nodes, 3) stack plus dims."""
    if hasattr(snaps, "stacked"):
        if len(snaps) == 0:
            raise ValueError("snapshot list is empty")
        return snaps.stacked(), snaps[0].grid.dims
    raise TypeError("velocity_regularizer expects VelocitySnapshots")


def _regularizer_and_grad(vels: np.ndarray, dims, gamma: float, need_grad: bool):
    """Regularizer over a (n_steps, n_nodes, 3) velocity stack.

    Returns (value, grad) where grad has the same shape as vels (or None).
    Axis k of a (nz, ny, nx) array corresponds to spatial axis (z, y, x),
    so component/axis pairing walks dims in reverse.
    """
    n_steps, n_nodes, _ = vels.shape
    nx, ny, nz = dims
    v = vels.reshape(n_steps, nz, ny, nx, 3)
    grad = np.zeros_like(v) if need_grad else None

    value_term = float(np.sum(v * v)) / (n_steps * n_nodes)
    if need_grad:
        grad += 2.0 * v / (n_steps * n_nodes)

    grad_term = 0.0
    if gamma != 0.0:
        for arr_axis, n_ax in ((3, nx), (2, ny), (1, nz)):
            du = 2.0 / (n_ax - 1)
            lo = [slice(None)] * 5
            hi = [slice(None)] * 5
            lo[arr_axis] = slice(0, -1)
            hi[arr_axis] = slice(1, None)
            diff = (v[tuple(hi)] - v[tuple(lo)]) / du
            grad_term += float(np.sum(diff * diff))
            if need_grad:
                adj = (2.0 * gamma / (n_steps * n_nodes)) * diff / du
                grad[tuple(hi)] += adj
                grad[tuple(lo)] -= adj
        grad_term /= n_steps * n_nodes

    value = value_term + gamma * grad_term
    return value, grad.reshape(vels.shape) if need_grad else None


# ---------------------------------------------------------------------------
# warping with a recorded reverse pass


class _FieldSampler:
    """Trilinear field interpolation onto a fixed set of query points.

    The query points never change during optimization, so the whole
    interpolation is one sparse matrix (8 weights per row) built once;
    sample() and scatter() are the matrix and its transpose, making them
    adjoints of each other. scipy's sequential CSR products keep both
    deterministic.
    """

    def __init__(self, field_dims, pts: np.ndarray):
        from scipy import sparse

        self.field_dims = tuple(field_dims)
        self.n_nodes = int(np.prod(field_dims))
        c = _to_continuous_index(pts, field_dims)
        i0, f = _corner_setup(c, field_dims)
        weights = _corner_weights(f)
        cols = [_flat_corner_index(i0, field_dims, dx, dy, dz) for dx, dy, dz in _CORNERS]
        n_pts = len(pts)
        data = np.concatenate(weights)
        col = np.concatenate(cols)
        row = np.tile(np.arange(n_pts, dtype=np.int64), 8)
        mat = sparse.coo_matrix((data, (row, col)), shape=(n_pts, self.n_nodes))
        self._mat = mat.tocsr()
        self._mat_t = mat.T.tocsr()

    def sample(self, vectors: np.ndarray) -> np.ndarray:
        return self._mat @ vectors

    def scatter(self, values: np.ndarray) -> np.ndarray:
        return self._mat_t @ values


def _warp_with_tape(moving: Volume3, S_vectors: np.ndarray, cache, need_grad: bool):
    """Warp `moving` by the field (given as node vectors) onto the cached grid.

    Returns (warped_flat, backward | None); backward(g_warped) is the
    gradient wrt the field node vectors. `cache` holds the per-objective
    constants: output node coordinates, their base indices in the moving
    grid, and the field sampler. One corner decomposition (face ties to
    the lower cell) serves both the value and gradient blends; the value
    blend is identical under either tie choice.
    """
    uout, base, sampler = cache
    dims = moving.grid.dims
    m = np.asarray(dims, dtype=np.float64) - 1.0

    disp = sampler.sample(S_vectors)
    c = base + disp * (m * 0.5)
    snapped = np.rint(c)
    c = np.where(np.abs(c - snapped) <= _NODE_SNAP, snapped, c)

    i0, f = _gradient_corner_setup(c, dims)
    vol_flat = moving.data.reshape(-1)
    nx, ny, _ = dims
    flat0 = (i0[:, 2] * ny + i0[:, 1]) * nx + i0[:, 0]
    corner = [vol_flat[flat0 + (dz * ny + dy) * nx + dx] for dx, dy, dz in _CORNERS]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    weights = [wx[dx] * wy[dy] * wz[dz] for dx, dy, dz in _CORNERS]
    warped = weights[0] * corner[0]
    for w, v in zip(weights[1:], corner[1:]):
        warped += w * v
    if not need_grad:
        return warped, None

    def backward(g_warped: np.ndarray) -> np.ndarray:
        cidx = {k: v for k, v in zip(_CORNERS, corner)}
        gx = np.zeros_like(fx)
        gy = np.zeros_like(fy)
        gz = np.zeros_like(fz)
        for a in (0, 1):
            for b in (0, 1):
                gx += (cidx[(1, a, b)] - cidx[(0, a, b)]) * wy[a] * wz[b]
                gy += (cidx[(a, 1, b)] - cidx[(a, 0, b)]) * wx[a] * wz[b]
                gz += (cidx[(a, b, 1)] - cidx[(a, b, 0)]) * wx[a] * wy[b]
        grad_img = np.stack([gx, gy, gz], axis=-1) * (m * 0.5)
        # border clamp: flat outside the domain, so no gradient there
        q = uout + disp
        grad_img[(q < -1.0) | (q > 1.0)] = 0.0
        g_q = g_warped[:, None] * grad_img
        return sampler.scatter(g_q)

    return warped, backward


# ---------------------------------------------------------------------------
# objectives


class RegistrationObjective:
    """Image similarity + velocity regularizer as a function of the net.

    Evaluating runs the flow integration on the field meshgrid, warps the
    moving image by the resulting displacement onto the fixed grid, and
    scores similarity (mse, or 1 - ncc) plus lam * regularizer.
    """

    def __init__(self, moving: Volume3, fixed: Volume3, flow: FlowConfig,
                 metric: str = "ncc", lam: float = 0.1, gamma: float = 1.0):
        if metric not in SIM_METRICS:
            raise ValueError(f"metric must be one of {SIM_METRICS}, got {metric!r}")
        _require_same_grid(moving, fixed, "registration")
        self.moving = moving
        self.fixed = fixed
        self.flow = flow
        self.metric = metric
        self.lam = float(lam)
        self.gamma = float(gamma)
        uout = grid_unit_points(fixed.grid.dims)
        if fixed.grid.dims == moving.grid.dims:
            base = grid_index_points(moving.grid.dims)
        else:
            base = _to_continuous_index(uout, moving.grid.dims)
        self._warp_cache = (uout, base, _FieldSampler(flow.field_dims, uout))
        self._fixed_flat = fixed.data.reshape(-1)

    def _evaluate(self, params: MLPParams, need_grad: bool):
        start, disp, vels, tapes, times = rollout_tape(params, self.flow)
        vstack = np.stack(vels, axis=0)

        warped, warp_back = _warp_with_tape(self.moving, disp, self._warp_cache, need_grad)
        sim, g_warped = _similarity_and_grad(self.metric, warped, self._fixed_flat)
        reg, g_vels = _regularizer_and_grad(vstack, self.flow.field_dims, self.gamma, need_grad)
        breakdown = _breakdown(sim, reg, 0.0, self.lam)
        if not need_grad:
            return breakdown, None

        g_disp = warp_back(g_warped)
        grad = _backprop_through_flow(params, self.flow, tapes, g_disp, self.lam * g_vels)
        return breakdown, grad

    def loss(self, params: MLPParams) -> LossBreakdown:
        return self._evaluate(params, need_grad=False)[0]

    def loss_and_grad(self, params: MLPParams):
        return self._evaluate(params, need_grad=True)

    def displacement(self, params: MLPParams) -> VectorField3:
        from .dynamics import rollout

        return rollout(params, self.flow).displacement


class DistillationObjective:
    """Match the rollout displacement to a target field, plus regularizer.

    The displacement residual uses a plain mean squared vector magnitude;
    the velocity regularizer is the same Sobolev-type term as in
    registration.
    """

    def __init__(self, target: VectorField3, flow: FlowConfig,
                 lam: float = 0.1, gamma: float = 1.0):
        if target.grid.dims != tuple(flow.field_dims):
            raise ValueError(
                f"distillation target grid {target.grid.dims} must equal field dims {flow.field_dims}"
            )
        self.target = target
        self.flow = flow
        self.lam = float(lam)
        self.gamma = float(gamma)
        self._target_vec = target.vectors.copy()

    def _evaluate(self, params: MLPParams, need_grad: bool):
        start, disp, vels, tapes, times = rollout_tape(params, self.flow)
        vstack = np.stack(vels, axis=0)
        n_nodes = disp.shape[0]

        resid = disp - self._target_vec
        distill = float(np.sum(resid * resid)) / n_nodes
        reg, g_vels = _regularizer_and_grad(vstack, self.flow.field_dims, self.gamma, need_grad)
        breakdown = _breakdown(0.0, reg, distill, self.lam)
        if not need_grad:
            return breakdown, None

        g_disp = 2.0 * resid / n_nodes
        grad = _backprop_through_flow(params, self.flow, tapes, g_disp, self.lam * g_vels)
        return breakdown, grad

    def loss(self, params: MLPParams) -> LossBreakdown:
        return self._evaluate(params, need_grad=False)[0]

    def loss_and_grad(self, params: MLPParams):
        return self._evaluate(params, need_grad=True)


def _backprop_through_flow(params: MLPParams, flow: FlowConfig, tapes,
                           g_disp: np.ndarray, g_vels: np.ndarray | None) -> ParamGradient:
    """Reverse pass over the unrolled Euler integration.

    g_disp is dL/d(final accumulated displacement); g_vels (optional) is
    the direct dL/dv_i from the regularizer, shape (n_steps, n_nodes, 3).
    Walks the steps backward, turning the position-dependence of each
    velocity query into gradient flow toward earlier steps.
    """
    total = None
    a = g_disp  # dL/dD_i, starting at i = n
    for i in range(flow.n_steps - 1, -1, -1):
        upstream = a * flow.dt
        if g_vels is not None:
            upstream = upstream + g_vels[i]
        step_grad, g_pos = backward_batch(params, tapes[i], upstream)
        if not np.all(np.isfinite(g_pos)):
            raise FloatingPointError(f"non-finite gradient in reverse pass at step {i + 1}")
        if total is None:
            total = step_grad
        else:
            for t_arr, s_arr in zip(total.arrays(), step_grad.arrays()):
                t_arr += s_arr
        a = a + g_pos
    if total is None or not total.is_finite():
        raise FloatingPointError("non-finite parameter gradient")
    return total


# ---------------------------------------------------------------------------
# spec-level entry points


def registration_loss(params: MLPParams, I1: Volume3, I2: Volume3, flow: FlowConfig,
                      metric: str = "ncc", lam: float = 0.1, gamma: float = 1.0) -> LossBreakdown:
    """Full registration objective at the given parameters."""
    return RegistrationObjective(I1, I2, flow, metric, lam, gamma).loss(params)


def distillation_loss(params: MLPParams, S1p: VectorField3, flow: FlowConfig,
                      lam: float = 0.1, gamma: float = 1.0) -> LossBreakdown:
    """Displacement-matching objective against a resampled coarse field."""
    return DistillationObjective(S1p, flow, lam, gamma).loss(params)


def loss_gradient(objective, params: MLPParams) -> ParamGradient:
    """Exact reverse-mode gradient of objective.total wrt every parameter."""
    return objective.loss_and_grad(params)[1]


def finite_diff_gradient(objective, params: MLPParams, eps: float) -> ParamGradient:
    """Central-difference gradient; the independent oracle for loss_gradient.

    Perturbs one parameter at a time, so it is only meant for tiny
    configurations.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    out = ParamGradient.zeros_like(params)
    work = params.copy()
    for arr, g in zip(work.arrays(), out.arrays()):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = objective.loss(work).total
            flat[j] = orig - eps
            lo = objective.loss(work).total
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * eps)
    return out

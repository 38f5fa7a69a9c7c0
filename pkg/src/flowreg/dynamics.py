"""Euler integration of grid samples through the learned velocity field.

Particles start at the unit coordinates of the field meshgrid at t = 1
and advance through n steps of size dt = 1/n while time decreases. Each
step queries the velocity at the particles' current (moving) positions,
so velocity is genuinely a function of position and time. Per-step
velocity fields are retained for the regularizer; the accumulated
per-particle displacement is the field used for warping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .velocity_net import MLPParams, forward_batch, forward_batch_tape
from .volume import GridSpec, VectorField3, Volume3, grid_unit_points, warp_volume


@dataclass(frozen=True)
class FlowConfig:
    """Field meshgrid density and time discretization of the flow."""

    field_dims: tuple[int, int, int]
    n_steps: int
    dt: float = None

    def __post_init__(self):
        object.__setattr__(self, "field_dims", tuple(int(d) for d in self.field_dims))
        if any(d < 2 for d in self.field_dims):
            raise ValueError(f"field_dims must be >= 2 per axis, got {self.field_dims}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.dt is None:
            object.__setattr__(self, "dt", 1.0 / self.n_steps)
        if abs(self.dt * self.n_steps - 1.0) > 1e-12:
            raise ValueError(f"dt * n_steps must equal 1, got {self.dt * self.n_steps}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.field_dims)


VelocityFn = Callable[[np.ndarray, float], np.ndarray]


def _as_velocity_fn(net) -> VelocityFn:
    """Accept MLPParams or any velocity(points, t) callable (test oracles)."""
    if isinstance(net, MLPParams):
        return lambda pts, t: forward_batch(net, pts, t)
    if callable(net):
        return net
    raise TypeError(f"expected MLPParams or a velocity callable, got {type(net)!r}")


@dataclass
class VelocitySnapshots:
    """Per-step velocity fields v_1..v_n keyed by each particle's origin node."""

    fields: Sequence[VectorField3]

    def __post_init__(self):
        self.fields = list(self.fields)
        if not self.fields:
            raise ValueError("snapshot list is empty")
        dims = self.fields[0].grid.dims
        if any(f.grid.dims != dims for f in self.fields):
            raise ValueError("snapshots must share one grid")

    def __len__(self) -> int:
        return len(self.fields)

    def __getitem__(self, i: int) -> VectorField3:
        return self.fields[i]

    def stacked(self) -> np.ndarray:
        """(n_steps, n_nodes, 3) array of snapshot vectors."""
        return np.stack([f.vectors for f in self.fields], axis=0)


@dataclass
class Rollout:
    """Result of integrating the flow: displacement, snapshots, endpoints."""

    displacement: VectorField3
    snapshots: VelocitySnapshots
    final_positions: np.ndarray  # (n_nodes, 3) unit coords


def euler_step(net, positions: np.ndarray, t: float, dt: float):
    """One explicit Euler step: returns (new_positions, velocities, t - dt)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(positions)):
        raise FloatingPointError("non-finite particle positions entering euler_step")
    vel = _as_velocity_fn(net)(positions, t)
    if not np.all(np.isfinite(vel)):
        bad = int(np.flatnonzero(~np.isfinite(vel).all(axis=1))[0])
        raise FloatingPointError(f"velocity network produced non-finite output at node {bad}, t={t}")
    return positions + vel * dt, vel, t - dt


def _integrate(net, flow: FlowConfig):
    """Shared integration core: per-step velocities and the running sum.

    The displacement accumulator is kept separate from the start positions
    (positions are recomputed as start + accumulated) so that the snapshot
    sum identity S == sum_i v_i * dt holds exactly, in float.
    """
    vel_fn = _as_velocity_fn(net)
    start = grid_unit_points(flow.field_dims)
    disp = np.zeros_like(start)
    t = 1.0
    vels = []
    for i in range(flow.n_steps):
        pos = start + disp
        v = vel_fn(pos, t)
        v = np.asarray(v, dtype=np.float64).reshape(start.shape)
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v).all(axis=1))[0])
            raise FloatingPointError(
                f"velocity network produced non-finite output at node {bad}, step {i + 1}"
            )
        disp = disp + v * flow.dt
        t = t - flow.dt
        vels.append(v)
    return start, disp, vels


def rollout(net, flow: FlowConfig) -> Rollout:
    """Integrate all field nodes through the flow (Euler, n steps from t=1).

    The displacement at a node is the accumulated sum of its per-step
    velocities times dt, which equals final position minus start position.
    """
    start, disp, vels = _integrate(net, flow)
    grid = flow.grid
    shape = grid.shape_zyx + (3,)
    snaps = VelocitySnapshots([VectorField3(grid, v.reshape(shape)) for v in vels])
    return Rollout(
        displacement=VectorField3(grid, disp.reshape(shape)),
        snapshots=snaps,
        final_positions=start + disp,
    )


def rollout_tape(params: MLPParams, flow: FlowConfig):
    """Rollout for MLP nets that also records per-step network intermediates.

    Returns (start, disp, vels, tapes, times) where tapes[i] is the
    forward tape of step i+1 and times[i] its query time. Consumed by the
    objective's reverse pass, which re-walks the steps backwards.
    """
    start = grid_unit_points(flow.field_dims)
    disp = np.zeros_like(start)
    t = 1.0
    vels, tapes, times = [], [], []
    for i in range(flow.n_steps):
        pos = start + disp
        v, tape = forward_batch_tape(params, pos, t)
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v).all(axis=1))[0])
            raise FloatingPointError(
                f"velocity network produced non-finite output at node {bad}, step {i + 1}"
            )
        times.append(t)
        disp = disp + v * flow.dt
        t = t - flow.dt
        vels.append(v)
        tapes.append(tape)
    return start, disp, vels, tapes, times


def partial_displacement(net, flow: FlowConfig, k: int) -> VectorField3:
    """Displacement accumulated over the first k of n steps."""
    if not 0 <= k <= flow.n_steps:
        raise ValueError(f"k must be in [0, {flow.n_steps}], got {k}")
    vel_fn = _as_velocity_fn(net)
    start = grid_unit_points(flow.field_dims)
    disp = np.zeros_like(start)
    t = 1.0
    for _ in range(k):
        v = np.asarray(vel_fn(start + disp, t), dtype=np.float64).reshape(start.shape)
        disp = disp + v * flow.dt
        t = t - flow.dt
    return VectorField3(flow.grid, disp.reshape(flow.grid.shape_zyx + (3,)))


def intermediate_warp(vol: Volume3, net, flow: FlowConfig, k: int) -> Volume3:
    """Warp by the partial flow after k steps; k=0 returns the input image.

    The sequence for k = 0..n is the time-lapse showing the moving image
    turning into the moved image.
    """
    S_k = partial_displacement(net, flow, k)
    return warp_volume(vol, S_k, vol.grid)

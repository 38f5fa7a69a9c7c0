"""Optimization drivers: single-stage registration and coarse-to-fine.

The single-stage driver optimizes the registration objective at one
field density. The coarse-to-fine driver runs it at a coarse density on
downsampled images, interpolates the coarse displacement up to the fine
density, distills a fresh network onto that field, and refines at the
fine density starting from the distilled parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dynamics import FlowConfig, rollout
from .objective import DistillationObjective, LossBreakdown, RegistrationObjective
from .velocity_net import MLPParams, NetConfig, ParamGradient, init_params
from .volume import VectorField3, Volume3, downsample_volume, resample_field, warp_volume


@dataclass(frozen=True)
class OptimConfig:
    """Adam hyperparameters and stopping rules for one stage."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_iters: int = 100
    plateau_tol: float = 1e-6
    plateau_window: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.plateau_tol < 0:
            raise ValueError(f"plateau_tol must be >= 0, got {self.plateau_tol}")
        if self.plateau_window < 1:
            raise ValueError(f"plateau_window must be >= 1, got {self.plateau_window}")


@dataclass
class OptimState:
    """Adam state: parameters plus first/second moment accumulators."""

    params: MLPParams
    first_moment: ParamGradient
    second_moment: ParamGradient
    step_count: int = 0

    @classmethod
    def fresh(cls, params: MLPParams) -> "OptimState":
        return cls(
            params=params.copy(),
            first_moment=ParamGradient.zeros_like(params),
            second_moment=ParamGradient.zeros_like(params),
            step_count=0,
        )


def adam_step(state: OptimState, grad: ParamGradient, cfg: OptimConfig) -> OptimState:
    """Standard bias-corrected Adam update; returns a new state."""
    if not grad.is_finite():
        raise FloatingPointError("adam_step received a non-finite gradient")
    t = state.step_count + 1
    new_params = state.params.copy()
    new_m = state.first_moment.copy()
    new_v = state.second_moment.copy()
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p, m, v, g in zip(new_params.arrays(), new_m.arrays(), new_v.arrays(), grad.arrays()):
        m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    return OptimState(new_params, new_m, new_v, t)


@dataclass
class StageResult:
    """Outcome of one optimization stage."""

    displacement: VectorField3
    params: MLPParams
    loss_history: list[LossBreakdown]
    iterations_run: int


LossSink = Callable[[str, int, LossBreakdown], None]


class DivergenceError(RuntimeError):
    """Raised when the objective stops being finite; carries the history."""

    def __init__(self, message: str, history: list[LossBreakdown]):
        super().__init__(message)
        self.history = history


def optimize_stage(objective, params0: MLPParams, cfg: OptimConfig,
                   stage: str = "stage", sink: LossSink | None = None,
                   stop: Callable[[LossBreakdown], bool] | None = None) -> StageResult:
    """Adam loop with plateau-based early exit.

    Runs until max_iters, until the best total fails to improve by at
    least plateau_tol over plateau_window consecutive iterations, until
    the optional `stop` predicate fires, or until the gradient vanishes
    identically (flat objective; Adam cannot move from there). Each
    iteration's breakdown is recorded and forwarded to `sink`.
    """
    state = OptimState.fresh(params0)
    history: list[LossBreakdown] = []
    best = math.inf
    stall = 0
    for it in range(1, cfg.max_iters + 1):
        try:
            breakdown, grad = objective.loss_and_grad(state.params)
        except FloatingPointError as exc:
            raise DivergenceError(f"{stage}: {exc}", history) from exc
        if not math.isfinite(breakdown.total):
            raise DivergenceError(f"{stage}: loss became non-finite at iteration {it}", history)
        history.append(breakdown)
        if sink is not None:
            sink(stage, it, breakdown)

        if breakdown.total < best - cfg.plateau_tol:
            best = breakdown.total
            stall = 0
        else:
            best = min(best, breakdown.total)
            stall += 1
        if stop is not None and stop(breakdown):
            break
        if stall >= cfg.plateau_window:
            break
        if grad.max_abs() == 0.0:
            break
        state = adam_step(state, grad, cfg)
    return StageResult(
        displacement=None,  # filled by the callers that run a flow
        params=state.params,
        loss_history=history,
        iterations_run=len(history),
    )


def inr_lddmm(field_dims, I1: Volume3, I2: Volume3, n: int, params0: MLPParams,
              optim: OptimConfig, metric: str = "ncc", lam: float = 0.1,
              gamma: float = 1.0, stage: str = "stage", sink: LossSink | None = None) -> StageResult:
    """Single-stage registration at one field density (the core driver)."""
    flow = FlowConfig(tuple(field_dims), int(n))
    objective = RegistrationObjective(I1, I2, flow, metric=metric, lam=lam, gamma=gamma)
    result = optimize_stage(objective, params0, optim, stage=stage, sink=sink)
    result.displacement = rollout(result.params, flow).displacement
    return result


@dataclass(frozen=True)
class RegistrationConfig:
    """Everything a full coarse-to-fine run needs."""

    coarse_dims: tuple[int, int, int] = (6, 6, 6)
    fine_dims: tuple[int, int, int] = (16, 16, 16)
    n_steps: int = 8
    metric: str = "ncc"
    lam: float = 0.1
    gamma: float = 1.0
    net: NetConfig = field(default_factory=NetConfig)
    coarse_optim: OptimConfig = field(default_factory=lambda: OptimConfig(max_iters=300))
    distill_optim: OptimConfig = field(default_factory=lambda: OptimConfig(max_iters=300))
    fine_optim: OptimConfig = field(default_factory=lambda: OptimConfig(max_iters=500))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "coarse_dims", tuple(int(d) for d in self.coarse_dims))
        object.__setattr__(self, "fine_dims", tuple(int(d) for d in self.fine_dims))
        if any(c > f for c, f in zip(self.coarse_dims, self.fine_dims)):
            raise ValueError(
                f"coarse_dims {self.coarse_dims} must be <= fine_dims {self.fine_dims} per axis"
            )
        if any(d < 2 for d in self.coarse_dims):
            raise ValueError(f"coarse_dims must be >= 2 per axis, got {self.coarse_dims}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.seed < 0:
            raise ValueError(f"seed must be unsigned, got {self.seed}")


# Distillation stops once the displacement residual drops below this
# fraction of its starting value.
DISTILL_TARGET_FRACTION = 0.1


def _coarse_image(vol: Volume3, coarse_dims) -> Volume3:
    """Downsample so min(image dims, 2 * coarse field dims) bounds resolution."""
    target = tuple(
        max(2, min(d, 2 * c)) for d, c in zip(vol.grid.dims, coarse_dims)
    )
    if target == vol.grid.dims:
        return vol
    return downsample_volume(vol, target)


def coarse_to_fine(cfg: RegistrationConfig, I1: Volume3, I2: Volume3,
                   sink: LossSink | None = None) -> StageResult:
    """Full pipeline: coarse stage, field interpolation, distillation, fine stage.

    The coarse and distillation stages each start from a fresh
    zero-output-layer network (seeds derived from cfg.seed); the fine
    stage is warm-started from the distilled parameters. Returns the fine
    stage result, whose displacement is the final field.
    """
    net_coarse = replace(cfg.net, seed=cfg.seed)
    net_distill = replace(cfg.net, seed=cfg.seed + 1)

    coarse = inr_lddmm(
        cfg.coarse_dims,
        _coarse_image(I1, cfg.coarse_dims),
        _coarse_image(I2, cfg.coarse_dims),
        cfg.n_steps,
        init_params(net_coarse),
        cfg.coarse_optim,
        metric=cfg.metric,
        lam=cfg.lam,
        gamma=cfg.gamma,
        stage="coarse",
        sink=sink,
    )

    s1p = resample_field(coarse.displacement, cfg.fine_dims)

    flow_fine = FlowConfig(cfg.fine_dims, cfg.n_steps)
    distill_obj = DistillationObjective(s1p, flow_fine, lam=cfg.lam, gamma=cfg.gamma)
    threshold = {}

    def distill_done(b: LossBreakdown) -> bool:
        if "value" not in threshold:
            threshold["value"] = DISTILL_TARGET_FRACTION * b.distill
        return b.distill <= threshold["value"]

    distilled = optimize_stage(
        distill_obj,
        init_params(net_distill),
        cfg.distill_optim,
        stage="distill",
        sink=sink,
        stop=distill_done,
    )

    fine = inr_lddmm(
        cfg.fine_dims,
        I1,
        I2,
        cfg.n_steps,
        distilled.params,
        cfg.fine_optim,
        metric=cfg.metric,
        lam=cfg.lam,
        gamma=cfg.gamma,
        stage="fine",
        sink=sink,
    )
    return fine


def apply_final(I1: Volume3, S_f: VectorField3) -> Volume3:
    """Produce the moved image by warping the moving image with the field."""
    return warp_volume(I1, S_f, I1.grid)

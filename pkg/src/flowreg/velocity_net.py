"""Three-layer coordinate MLP mapping (x, y, z, t) to a velocity vector.

The network is the continuous velocity model: inputs are a unit-cube
position plus a time scalar in [0, 1], the output is a velocity in
unit-coordinate units per unit time. The output layer is initialized to
zero so a fresh network encodes the identity transform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ACTIVATIONS = ("sine", "tanh")


@dataclass(frozen=True)
class NetConfig:
    """Architecture and initialization knobs for the velocity MLP."""

    hidden_width: int = 64
    activation: str = "sine"
    sine_frequency: float = 30.0  # first-layer frequency, sine only
    seed: int = 0

    def __post_init__(self):
        if self.hidden_width < 1:
            raise ValueError(f"hidden_width must be >= 1, got {self.hidden_width}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.sine_frequency <= 0:
            raise ValueError(f"sine_frequency must be > 0, got {self.sine_frequency}")
        if self.seed < 0:
            raise ValueError(f"seed must be unsigned, got {self.seed}")


@dataclass
class MLPParams:
    """Weights and biases of the three-layer velocity network.

    Shapes: w1 (h, 4), b1 (h,), w2 (h, h), b2 (h,), w3 (3, h), b3 (3,).
    The config rides along so forward evaluation knows the activation.
    """

    cfg: NetConfig
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        h = self.cfg.hidden_width
        expected = {"w1": (h, 4), "b1": (h,), "w2": (h, h), "b2": (h,), "w3": (3, h), "b3": (3,)}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)

    def copy(self) -> "MLPParams":
        return MLPParams(self.cfg, *(a.copy() for a in self.arrays()))


@dataclass
class ParamGradient:
    """Per-parameter values shaped exactly like MLPParams (gradients, moments)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)

    @classmethod
    def zeros_like(cls, params: MLPParams) -> "ParamGradient":
        return cls(*(np.zeros_like(a) for a in params.arrays()))

    def copy(self) -> "ParamGradient":
        return ParamGradient(*(a.copy() for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) if a.size else 0.0 for a in self.arrays())


def init_params(cfg: NetConfig) -> MLPParams:
    """Seeded initialization; the zero output layer makes the net emit 0.

    Layers 1-2 use the uniform fan-in scheme U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    With the sine activation, first-layer weights get an extra 1/sqrt(fan_in)
    factor (i.e. U(-1/fan_in, 1/fan_in), the standard first-layer convention
    for sine networks); the bias stays at the fan-in scale. Draw order is
    w1, b1, w2, b2, so fixed seeds give bit-identical parameters.
    """
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden_width

    bound1 = 1.0 / np.sqrt(4.0)
    w1 = rng.uniform(-bound1, bound1, size=(h, 4))
    b1 = rng.uniform(-bound1, bound1, size=(h,))
    if cfg.activation == "sine":
        w1 = w1 * bound1  # net effect: U(-1/fan_in, +1/fan_in)

    bound2 = 1.0 / np.sqrt(h)
    w2 = rng.uniform(-bound2, bound2, size=(h, h))
    b2 = rng.uniform(-bound2, bound2, size=(h,))

    w3 = np.zeros((3, h))
    b3 = np.zeros(3)
    return MLPParams(cfg, w1, b1, w2, b2, w3, b3)


def _act(cfg: NetConfig, z: np.ndarray, layer: int) -> np.ndarray:
    if cfg.activation == "sine":
        return np.sin(cfg.sine_frequency * z) if layer == 1 else np.sin(z)
    return np.tanh(z)


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum (non-optimized) keeps each output row's summation order fixed
    # regardless of batch size, so batched and single evaluations agree
    # bit-for-bit; BLAS matmul does not guarantee that.
    return np.einsum("nk,hk->nh", x, w) + b


def forward_batch(params: MLPParams, points: np.ndarray, t: float) -> np.ndarray:
    """Velocities at a batch of unit points for one time value, (n, 3)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    X = np.concatenate([pts, np.full((pts.shape[0], 1), float(t))], axis=1)
    a1 = _act(params.cfg, _affine(X, params.w1, params.b1), layer=1)
    a2 = _act(params.cfg, _affine(a1, params.w2, params.b2), layer=2)
    return _affine(a2, params.w3, params.b3)


def forward(params: MLPParams, X) -> np.ndarray:
    """Velocity at one (x, y, z, t) input; returns a (3,) array."""
    X = np.asarray(X, dtype=np.float64).reshape(4)
    return forward_batch(params, X[:3].reshape(1, 3), float(X[3]))[0]


def forward_batch_tape(params: MLPParams, points: np.ndarray, t: float):
    """forward_batch plus the intermediates the backward pass needs."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    X = np.concatenate([pts, np.full((pts.shape[0], 1), float(t))], axis=1)
    z1 = _affine(X, params.w1, params.b1)
    a1 = _act(params.cfg, z1, layer=1)
    z2 = _affine(a1, params.w2, params.b2)
    a2 = _act(params.cfg, z2, layer=2)
    out = _affine(a2, params.w3, params.b3)
    return out, (X, z1, a1, z2, a2)


def backward_batch(params: MLPParams, tape, upstream: np.ndarray):
    """Vector-Jacobian product through one forward_batch evaluation.

    upstream is (n, 3) = dL/d(output). Returns (ParamGradient, dL/dpoints)
    where dL/dpoints is (n, 3); the time column carries no gradient.
    """
    X, z1, a1, z2, a2 = tape
    cfg = params.cfg
    if cfg.activation == "sine":
        d1 = cfg.sine_frequency * np.cos(cfg.sine_frequency * z1)
        d2 = np.cos(z2)
    else:
        d1 = 1.0 - a1 * a1
        d2 = 1.0 - a2 * a2

    gw3 = upstream.T @ a2
    gb3 = upstream.sum(axis=0)
    ga2 = upstream @ params.w3
    gz2 = ga2 * d2
    gw2 = gz2.T @ a1
    gb2 = gz2.sum(axis=0)
    ga1 = gz2 @ params.w2
    gz1 = ga1 * d1
    gw1 = gz1.T @ X
    gb1 = gz1.sum(axis=0)
    gpts = (gz1 @ params.w1)[:, :3]
    return ParamGradient(gw1, gb1, gw2, gb2, gw3, gb3), gpts


def constant_velocity_params(cfg: NetConfig, velocity) -> MLPParams:
    """Parameters whose network emits a constant velocity everywhere.

    All weights are zero and the output bias holds the velocity; with an
    odd activation the hidden layers contribute nothing. Used for oracle
    checkpoints in tests and the snapshot time-lapse.
    """
    h = cfg.hidden_width
    v = np.asarray(velocity, dtype=np.float64).reshape(3)
    return MLPParams(
        cfg,
        np.zeros((h, 4)), np.zeros(h),
        np.zeros((h, h)), np.zeros(h),
        np.zeros((3, h)), v.copy(),
    )

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowreg.dynamics import FlowConfig, rollout
from flowreg.objective import (
    DistillationObjective,
    LossBreakdown,
    RegistrationObjective,
    distillation_loss,
    finite_diff_gradient,
    loss_gradient,
    mse,
    ncc,
    registration_loss,
    velocity_regularizer,
)
from flowreg.velocity_net import (
    NetConfig,
    ParamGradient,
    constant_velocity_params,
    init_params,
)
from flowreg.volume import (
    GridSpec,
    VectorField3,
    Volume3,
    grid_unit_points,
    sample_trilinear_many,
    zeros_field,
)


def smooth_volume(dims, seed):
    rng = np.random.default_rng(seed)
    coarse = Volume3(GridSpec((3, 3, 3)), rng.uniform(0.0, 1.0, size=(3, 3, 3)))
    return Volume3(GridSpec(dims), sample_trilinear_many(coarse, grid_unit_points(dims)))


def random_params(width=8, activation="sine", freq=5.0, seed=0, scale=0.15):
    params = init_params(NetConfig(hidden_width=width, activation=activation,
                                   sine_frequency=freq, seed=seed))
    rng = np.random.default_rng(seed + 500)
    params.w3[:] = rng.normal(scale=scale, size=(3, width))
    params.b3[:] = rng.normal(scale=scale, size=3)
    return params


class TestMse:
    def test_identical_volumes(self):
        v = smooth_volume((4, 4, 4), 0)
        assert mse(v, v) == 0.0

    def test_constant_offset(self):
        v = smooth_volume((4, 4, 4), 1)
        w = Volume3(v.grid, v.data + 1.0)
        assert mse(v, w) == pytest.approx(1.0, abs=1e-12)

    def test_hand_value(self):
        g = GridSpec((2, 2, 2))
        a = Volume3(g, np.zeros(8))
        b = Volume3(g, np.array([1.0, 3.0, 1.0, 3.0, 1.0, 3.0, 1.0, 3.0]))
        assert mse(a, b) == 5.0

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mse(smooth_volume((4, 4, 4), 2), smooth_volume((4, 4, 5), 3))


class TestNcc:
    def test_self_correlation(self):
        v = smooth_volume((5, 5, 5), 4)
        assert ncc(v, v) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0), st.integers(0, 1000))
    def test_affine_invariance(self, a, b, seed):
        v = smooth_volume((4, 5, 4), seed)
        w = Volume3(v.grid, a * v.data + b)
        assert ncc(v, w) == pytest.approx(1.0, abs=1e-10)

    def test_anticorrelation(self):
        v = smooth_volume((4, 4, 4), 5)
        w = Volume3(v.grid, -v.data)
        assert ncc(v, w) == pytest.approx(-1.0, abs=1e-12)

    def test_constant_volume_defined_as_zero(self):
        g = GridSpec((3, 3, 3))
        flat = Volume3(g, np.full(27, 2.0))
        v = smooth_volume((3, 3, 3), 6)
        assert ncc(flat, v) == 0.0


class TestVelocityRegularizer:
    def test_zero_snapshots(self):
        params = init_params(NetConfig(seed=7))
        r = rollout(params, FlowConfig((4, 4, 4), 3))
        assert velocity_regularizer(r.snapshots) == 0.0

    def test_constant_snapshots(self):
        c = np.array([0.2, -0.1, 0.3])
        vel = lambda pts, t: np.tile(c, (len(pts), 1))
        r = rollout(vel, FlowConfig((4, 4, 4), 3))
        expect = float(c @ c)  # gradient term vanishes for constant fields
        assert velocity_regularizer(r.snapshots, gamma=3.7) == pytest.approx(expect, abs=1e-14)

    def test_matches_direct_loop_oracle(self):
        rng = np.random.default_rng(8)
        dims = (3, 4, 2)
        n_steps = 3
        vel = lambda pts, t: rng.normal(size=(len(pts), 3))  # arbitrary fields
        r = rollout(vel, FlowConfig(dims, n_steps))
        gamma = 1.6

        # direct loop re-implementation
        nx, ny, nz = dims
        N = nx * ny * nz
        total = 0.0
        for snap in r.snapshots.fields:
            v = snap.data  # (nz, ny, nx, 3)
            val = 0.0
            for iz in range(nz):
                for iy in range(ny):
                    for ix in range(nx):
                        val += float(v[iz, iy, ix] @ v[iz, iy, ix])
            gterm = 0.0
            for iz in range(nz):
                for iy in range(ny):
                    for ix in range(nx):
                        for comp in range(3):
                            if ix + 1 < nx:
                                du = 2.0 / (nx - 1)
                                gterm += ((v[iz, iy, ix + 1, comp] - v[iz, iy, ix, comp]) / du) ** 2
                            if iy + 1 < ny:
                                du = 2.0 / (ny - 1)
                                gterm += ((v[iz, iy + 1, ix, comp] - v[iz, iy, ix, comp]) / du) ** 2
                            if iz + 1 < nz:
                                du = 2.0 / (nz - 1)
                                gterm += ((v[iz + 1, iy, ix, comp] - v[iz, iy, ix, comp]) / du) ** 2
            total += val / N + gamma * gterm / N
        expect = total / n_steps
        assert velocity_regularizer(r.snapshots, gamma=gamma) == pytest.approx(expect, rel=1e-12)

    def test_two_node_axis_case(self):
        # single snapshot, one axis with values 0 and d
        d = 0.7
        vel = lambda pts, t: np.where(pts[:, [0]] > 0, [[d, 0.0, 0.0]], [[0.0, 0.0, 0.0]])
        r = rollout(vel, FlowConfig((2, 2, 2), 1))
        # mean |v|^2 = d^2/2; gradient term: 4 x-edges with (d/2)^2, /8 nodes
        expect = d * d / 2 + 4 * (d / 2.0) ** 2 / 8
        assert velocity_regularizer(r.snapshots, gamma=1.0) == pytest.approx(expect, rel=1e-12)

    def test_nonnegative_and_zero_iff_zero(self):
        params = random_params(seed=9)
        r = rollout(params, FlowConfig((3, 3, 3), 2))
        assert velocity_regularizer(r.snapshots) > 0.0


class TestRegistrationLoss:
    def test_identity_pair_zero_init(self):
        v = smooth_volume((8, 8, 8), 10)
        params = init_params(NetConfig(seed=10))
        flow = FlowConfig((4, 4, 4), 2)
        for metric in ("mse", "ncc"):
            b = registration_loss(params, v, v, flow, metric=metric, lam=0.1)
            assert b.total == 0.0
            assert b.similarity == 0.0
            assert b.regularizer == 0.0

    def test_total_equals_sum_of_parts(self):
        I1 = smooth_volume((8, 8, 8), 11)
        I2 = smooth_volume((8, 8, 8), 12)
        params = random_params(seed=11)
        b = registration_loss(params, I1, I2, flow=FlowConfig((4, 4, 4), 2),
                              metric="ncc", lam=0.37, gamma=1.2)
        assert b.total == pytest.approx(b.similarity + 0.37 * b.regularizer + b.distill, abs=1e-10)
        assert b.distill == 0.0

    def test_matches_straight_line_oracle(self):
        # fully independent re-implementation: no shared sampling/flow code
        dims = (8, 8, 8)
        I1 = smooth_volume(dims, 13)
        I2 = smooth_volume(dims, 14)
        field_dims = (4, 4, 4)
        n = 3
        lam, gamma = 0.25, 1.4
        params = random_params(width=8, seed=15, scale=0.1)

        got = registration_loss(params, I1, I2, FlowConfig(field_dims, n),
                                metric="mse", lam=lam, gamma=gamma)

        def mlp(p, x, y, z, t):
            X = [x, y, z, t]
            h = len(p.b1)
            z1 = [sum(p.w1[i][k] * X[k] for k in range(4)) + p.b1[i] for i in range(h)]
            a1 = [math.sin(p.cfg.sine_frequency * v) for v in z1]
            z2 = [sum(p.w2[i][k] * a1[k] for k in range(h)) + p.b2[i] for i in range(h)]
            a2 = [math.sin(v) for v in z2]
            return [sum(p.w3[i][k] * a2[k] for k in range(h)) + p.b3[i] for i in range(3)]

        def tri_sample(arr, dims_, x, y, z):
            # arr indexed [iz][iy][ix], possibly with trailing component dim
            cs = []
            for p_, d_ in zip((x, y, z), dims_):
                c = (p_ + 1.0) * (d_ - 1) / 2.0
                c = min(max(c, 0.0), d_ - 1.0)
                i0 = min(int(math.floor(c)), d_ - 2)
                cs.append((i0, c - i0))
            (ix, fx), (iy, fy), (iz, fz) = cs
            out = 0.0
            for dz, wz in ((0, 1 - fz), (1, fz)):
                for dy, wy in ((0, 1 - fy), (1, fy)):
                    for dx, wx in ((0, 1 - fx), (1, fx)):
                        out += wx * wy * wz * arr[iz + dz][iy + dy][ix + dx]
            return out

        fx_, fy_, fz_ = field_dims
        nodes = [
            (2 * ix / (fx_ - 1) - 1, 2 * iy / (fy_ - 1) - 1, 2 * iz / (fz_ - 1) - 1)
            for iz in range(fz_) for iy in range(fy_) for ix in range(fx_)
        ]
        dt = 1.0 / n
        disp = [[0.0, 0.0, 0.0] for _ in nodes]
        snaps = []
        t = 1.0
        for _ in range(n):
            vs = []
            for node, d in zip(nodes, disp):
                vs.append(mlp(params, node[0] + d[0], node[1] + d[1], node[2] + d[2], t))
            for d, v in zip(disp, vs):
                for c in range(3):
                    d[c] += v[c] * dt
            snaps.append(vs)
            t -= dt

        # warp I1 by the displacement field, then mse against I2
        S = np.array(disp).reshape(fz_, fy_, fx_, 3)
        nx, ny, nz = dims
        se = 0.0
        for iz in range(nz):
            for iy in range(ny):
                for ix in range(nx):
                    x = 2 * ix / (nx - 1) - 1
                    y = 2 * iy / (ny - 1) - 1
                    z = 2 * iz / (nz - 1) - 1
                    d = [tri_sample(S[..., c], field_dims, x, y, z) for c in range(3)]
                    val = tri_sample(I1.data, dims, x + d[0], y + d[1], z + d[2])
                    se += (val - I2.data[iz, iy, ix]) ** 2
        sim = se / (nx * ny * nz)

        N = fx_ * fy_ * fz_
        reg = 0.0
        for vs in snaps:
            V = np.array(vs).reshape(fz_, fy_, fx_, 3)
            val = sum(float(V[izz, iyy, ixx] @ V[izz, iyy, ixx])
                      for izz in range(fz_) for iyy in range(fy_) for ixx in range(fx_))
            gterm = 0.0
            for izz in range(fz_):
                for iyy in range(fy_):
                    for ixx in range(fx_):
                        for c in range(3):
                            if ixx + 1 < fx_:
                                gterm += ((V[izz, iyy, ixx + 1, c] - V[izz, iyy, ixx, c]) / (2 / (fx_ - 1))) ** 2
                            if iyy + 1 < fy_:
                                gterm += ((V[izz, iyy + 1, ixx, c] - V[izz, iyy, ixx, c]) / (2 / (fy_ - 1))) ** 2
                            if izz + 1 < fz_:
                                gterm += ((V[izz + 1, iyy, ixx, c] - V[izz, iyy, ixx, c]) / (2 / (fz_ - 1))) ** 2
            reg += val / N + gamma * gterm / N
        reg /= n

        assert got.similarity == pytest.approx(sim, abs=1e-10)
        assert got.regularizer == pytest.approx(reg, abs=1e-10)
        assert got.total == pytest.approx(sim + lam * reg, abs=1e-10)


class TestDistillationLoss:
    def test_zero_target_zero_init(self):
        params = init_params(NetConfig(seed=16))
        flow = FlowConfig((4, 4, 4), 2)
        b = distillation_loss(params, zeros_field(GridSpec((4, 4, 4))), flow, lam=0.1)
        assert b.total == 0.0

    def test_self_target_gives_zero_distill(self):
        params = random_params(seed=17)
        flow = FlowConfig((4, 4, 4), 3)
        S = rollout(params, flow).displacement
        b = distillation_loss(params, S, flow, lam=0.1)
        assert b.distill == 0.0
        assert b.regularizer > 0.0

    def test_constant_flow_against_zero_target(self):
        c = np.array([0.12, -0.3, 0.05])
        params = constant_velocity_params(NetConfig(seed=0, activation="tanh"), c)
        flow = FlowConfig((4, 4, 4), 4)
        b = distillation_loss(params, zeros_field(GridSpec((4, 4, 4))), flow, lam=0.0)
        assert b.distill == pytest.approx(float(c @ c), rel=1e-12)

    def test_grid_mismatch_rejected(self):
        params = init_params(NetConfig(seed=18))
        with pytest.raises(ValueError):
            distillation_loss(params, zeros_field(GridSpec((5, 4, 4))), FlowConfig((4, 4, 4), 2))


class QuadraticObjective:
    """Toy objective L = sum(theta^2) for finite-difference sanity checks."""

    def loss(self, params):
        total = sum(float(np.sum(a * a)) for a in params.arrays())
        return LossBreakdown(total, total, 0.0, 0.0, 0.0)


class ZeroObjective:
    def loss(self, params):
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)


class TestFiniteDiffGradient:
    def test_exact_on_quadratic(self):
        params = random_params(width=4, seed=19)
        g = finite_diff_gradient(QuadraticObjective(), params, eps=1e-4)
        for garr, parr in zip(g.arrays(), params.arrays()):
            np.testing.assert_allclose(garr, 2.0 * parr, atol=1e-9)

    def test_zero_objective(self):
        params = random_params(width=4, seed=20)
        g = finite_diff_gradient(ZeroObjective(), params, eps=1e-4)
        assert g.max_abs() == 0.0

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(ZeroObjective(), random_params(width=4, seed=21), eps=0.0)


def max_rel_err(a: ParamGradient, f: ParamGradient) -> float:
    worst = 0.0
    for ga, gf in zip(a.arrays(), f.arrays()):
        denom = np.maximum(np.abs(gf), 1e-8)
        worst = max(worst, float(np.max(np.abs(ga - gf) / denom)))
    return worst


class TestLossGradient:
    def test_zero_gradient_at_flat_minimum(self):
        g = GridSpec((6, 6, 6))
        vol = Volume3(g, np.full(216, 0.5))
        params = init_params(NetConfig(seed=22))
        obj = RegistrationObjective(vol, vol, FlowConfig((3, 3, 3), 2), metric="mse", lam=0.0)
        grad = loss_gradient(obj, params)
        assert grad.max_abs() == 0.0

    def test_lambda_linearity(self):
        I1 = smooth_volume((8, 8, 8), 23)
        I2 = smooth_volume((8, 8, 8), 24)
        params = random_params(seed=23)
        flow = FlowConfig((4, 4, 4), 2)
        grads = {}
        for lam in (0.0, 1.0, 2.0):
            obj = RegistrationObjective(I1, I2, flow, metric="mse", lam=lam)
            grads[lam] = loss_gradient(obj, params)
        for g0, g1, g2 in zip(grads[0.0].arrays(), grads[1.0].arrays(), grads[2.0].arrays()):
            np.testing.assert_allclose(g2 - g0, 2.0 * (g1 - g0), rtol=1e-9, atol=1e-14)

    @pytest.mark.parametrize("metric", ["mse", "ncc"])
    def test_registration_gradcheck(self, metric):
        # frozen configuration: sample points stay clear of interpolation
        # cell faces, where the loss is only piecewise-smooth
        I1 = smooth_volume((8, 8, 8), 1)
        I2 = smooth_volume((8, 8, 8), 2)
        params = random_params(width=8, activation="sine", freq=5.0, seed=0, scale=0.15)
        obj = RegistrationObjective(I1, I2, FlowConfig((5, 5, 5), 2), metric=metric,
                                    lam=0.1, gamma=1.0)
        analytic = loss_gradient(obj, params)
        fd = finite_diff_gradient(obj, params, eps=1e-4)
        assert max_rel_err(analytic, fd) <= 1e-4

    def test_distillation_gradcheck(self):
        rng = np.random.default_rng(25)
        target = VectorField3(GridSpec((5, 5, 5)), rng.normal(scale=0.1, size=(5, 5, 5, 3)))
        params = random_params(width=8, activation="sine", freq=5.0, seed=0, scale=0.15)
        obj = DistillationObjective(target, FlowConfig((5, 5, 5), 2), lam=0.1, gamma=1.0)
        analytic = loss_gradient(obj, params)
        fd = finite_diff_gradient(obj, params, eps=1e-4)
        assert max_rel_err(analytic, fd) <= 1e-4

    def test_loss_and_grad_value_matches_loss(self):
        I1 = smooth_volume((8, 8, 8), 26)
        I2 = smooth_volume((8, 8, 8), 27)
        params = random_params(seed=26)
        obj = RegistrationObjective(I1, I2, FlowConfig((4, 4, 4), 2), metric="ncc", lam=0.2)
        b1, _ = obj.loss_and_grad(params)
        b2 = obj.loss(params)
        assert b1.total == b2.total

from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from shapebridge import bridge, volume
from shapebridge.errors import DataError, GeometryMismatchError
from shapebridge.volume import GridHeader, VoxelGrid

GOLDEN = Path(__file__).parent / "golden"


def rational_schedule(T):
    """Independent schedule oracle in exact rational arithmetic.

    Evaluates the defining formulas with Fractions for t = 1..T-1 and the
    closed forms of their t -> T limits (the quotients are 0/0 at t = T
    because delta_T = 0): c_x = 1, c_s = 0, c_f = 1/T,
    tilde_delta = 2(T-1)/T^2.
    """
    alpha = [Fraction(t, T) for t in range(T + 1)]
    delta = [2 * (a - a * a) for a in alpha]
    delta_step = [Fraction(0)] * (T + 1)
    c_x = [Fraction(0)] * (T + 1)
    c_s = [Fraction(0)] * (T + 1)
    c_f = [Fraction(0)] * (T + 1)
    tilde = [Fraction(0)] * (T + 1)
    for t in range(1, T + 1):
        shrink = (1 - alpha[t]) / (1 - alpha[t - 1])
        delta_step[t] = delta[t] - delta[t - 1] * shrink**2
    for t in range(1, T):
        shrink = (1 - alpha[t]) / (1 - alpha[t - 1])
        c_x[t] = (delta[t - 1] / delta[t]) * shrink + (delta_step[t] / delta[t]) * (
            1 - alpha[t - 1]
        )
        c_s[t] = alpha[t - 1] - alpha[t] * shrink * (delta[t - 1] / delta[t])
        c_f[t] = (1 - alpha[t - 1]) * delta_step[t] / delta[t]
        tilde[t] = delta_step[t] * delta[t - 1] / delta[t]
    c_x[T] = Fraction(1)
    c_s[T] = Fraction(0)
    c_f[T] = Fraction(1, T)
    tilde[T] = Fraction(2 * (T - 1), T * T)
    return alpha, delta, delta_step, c_x, c_s, c_f, tilde


def const_grid(value, dims=(4, 4, 4)):
    header = GridHeader(dims=dims, spacing=(1, 1, 1), origin=(0, 0, 0))
    return VoxelGrid(header=header, data=np.full(dims, value, dtype=np.float32))


def random_grid(rng, dims=(4, 4, 4)):
    header = GridHeader(dims=dims, spacing=(1, 1, 1), origin=(0, 0, 0))
    return VoxelGrid(header=header, data=rng.standard_normal(dims).astype(np.float32))


class TestSchedule:
    def test_matches_rational_oracle(self):
        for T in (2, 3, 10, 16, 101):
            sched = bridge.build_schedule(T)
            tables = rational_schedule(T)
            names = ("alpha", "delta", "delta_step", "coef_x", "coef_s", "coef_f", "tilde_delta")
            for name, exact in zip(names, tables):
                got = getattr(sched, name)
                want = np.array([float(v) for v in exact])
                # atol covers cancellation noise in coefficients that are
                # exactly zero (c_s) or one (c_x) in exact arithmetic
                assert np.allclose(got, want, rtol=1e-12, atol=3e-15), name

    def test_midpoint_variance_half(self):
        sched = bridge.build_schedule(1000)
        assert sched.delta[500] == 0.5
        assert sched.delta.max() == 0.5

    def test_endpoints(self):
        for T in (2, 7, 1000):
            sched = bridge.build_schedule(T)
            assert sched.alpha[0] == 0.0
            assert sched.delta[0] == 0.0
            assert sched.alpha[T] == 1.0
            assert sched.delta[T] == 0.0

    def test_hand_values_T10_t1(self):
        sched = bridge.build_schedule(10)
        assert sched.delta[1] == pytest.approx(0.18, abs=1e-15)
        assert sched.delta_step[1] == pytest.approx(0.18, abs=1e-15)
        assert sched.coef_x[1] == pytest.approx(1.0, abs=1e-12)
        assert sched.coef_s[1] == pytest.approx(0.0, abs=1e-12)
        assert sched.coef_f[1] == pytest.approx(1.0, abs=1e-12)
        assert sched.tilde_delta[1] == 0.0

    def test_symmetry(self):
        sched = bridge.build_schedule(50)
        assert np.allclose(sched.delta, sched.delta[::-1], atol=1e-15)

    def test_transition_variance_nonnegative(self):
        sched = bridge.build_schedule(37)
        assert np.all(sched.delta_step >= 0.0)

    def test_closed_forms(self):
        # for the linear schedule the reverse coefficients collapse to
        # c_x = 1, c_s = 0, c_f = 1/t, tilde = 2(t-1)/(tT); derived by
        # substituting alpha = t/T into the quotient formulas
        T = 24
        sched = bridge.build_schedule(T)
        t = np.arange(1, T + 1)
        assert np.allclose(sched.coef_x[1:], 1.0, atol=1e-12)
        assert np.allclose(sched.coef_s[1:], 0.0, atol=1e-12)
        assert np.allclose(sched.coef_f[1:], 1.0 / t, rtol=1e-12)
        assert np.allclose(sched.tilde_delta[1:], 2.0 * (t - 1) / (t * T), rtol=1e-12, atol=1e-15)

    def test_rejects_tiny_T(self):
        with pytest.raises(DataError):
            bridge.build_schedule(1)

    def test_golden_table_T10(self):
        sched = bridge.build_schedule(10)
        frozen = (GOLDEN / "schedule_T10.txt").read_text()
        assert bridge.schedule_table(sched) == frozen


class TestNoise:
    def test_deterministic_per_seed_and_step(self):
        a = bridge.noise_for(7, 3, (4, 4, 4))
        b = bridge.noise_for(7, 3, (4, 4, 4))
        c = bridge.noise_for(7, 4, (4, 4, 4))
        d = bridge.noise_for(8, 3, (4, 4, 4))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)
        assert a.shape == (4, 4, 4)


class TestForwardSample:
    def test_endpoint_t0_bit_faithful(self):
        rng = np.random.default_rng(1)
        sched = bridge.build_schedule(10)
        x0, xT = random_grid(rng), random_grid(rng)
        out = bridge.forward_sample(sched, x0, xT, 0, eps=17)
        assert out.data.tobytes() == x0.data.tobytes()

    def test_endpoint_tT_bit_faithful(self):
        rng = np.random.default_rng(2)
        sched = bridge.build_schedule(10)
        x0, xT = random_grid(rng), random_grid(rng)
        out = bridge.forward_sample(sched, x0, xT, 10, eps=17)
        assert out.data.tobytes() == xT.data.tobytes()

    def test_midpoint_interpolation(self):
        sched = bridge.build_schedule(8)
        out = bridge.forward_sample(sched, const_grid(0.0), const_grid(1.0), 4)
        assert np.all(out.data == 0.5)

    def test_geometry_mismatch(self):
        sched = bridge.build_schedule(4)
        a = const_grid(0.0)
        header = GridHeader(dims=(4, 4, 4), spacing=(2, 1, 1), origin=(0, 0, 0))
        b = VoxelGrid(header=header, data=np.zeros((4, 4, 4), dtype=np.float32))
        with pytest.raises(GeometryMismatchError):
            bridge.forward_sample(sched, a, b, 2)

    def test_step_out_of_range(self):
        sched = bridge.build_schedule(4)
        with pytest.raises(DataError):
            bridge.forward_sample(sched, const_grid(0.0), const_grid(1.0), 5)

    def test_marginal_mean_and_variance(self):
        sched = bridge.build_schedule(10)
        t = 3
        x0, xT = 0.3, -0.2
        n = 2000
        draws = np.stack(
            [
                bridge.forward_sample_values(
                    sched, x0, xT, t, bridge.noise_for(1234, t + 17 * i, (4, 4, 4))
                )
                for i in range(n)
            ]
        ).ravel()
        expected_mean = (1 - sched.alpha[t]) * x0 + sched.alpha[t] * xT
        delta = sched.delta[t]
        se_mean = np.sqrt(delta / draws.size)
        assert abs(draws.mean() - expected_mean) <= 5 * se_mean
        se_var = delta * np.sqrt(2.0 / (draws.size - 1))
        assert abs(draws.var(ddof=1) - delta) <= 5 * se_var


class TestTrainingTarget:
    def test_t0_zero(self):
        rng = np.random.default_rng(3)
        sched = bridge.build_schedule(10)
        out = bridge.training_target(sched, random_grid(rng), random_grid(rng), 0)
        assert np.all(out.data == 0.0)

    def test_unit_gap_gives_alpha(self):
        sched = bridge.build_schedule(8)
        out = bridge.training_target(sched, const_grid(0.0), const_grid(1.0), 2)
        assert np.allclose(out.data, sched.alpha[2], atol=1e-7)

    def test_denoising_identity(self):
        rng = np.random.default_rng(4)
        sched = bridge.build_schedule(12)
        x0, xT = random_grid(rng), random_grid(rng)
        for t in (1, 5, 11, 12):
            eps = bridge.noise_for(99, t, x0.dims)
            x_t = bridge.forward_sample(sched, x0, xT, t, eps=eps)
            target = bridge.training_target(sched, x0, xT, t, eps=eps)
            assert np.abs(volume.sub(x_t, target).data - x0.data).max() <= 1e-6


class TestReverseStep:
    def test_final_step_subtracts_prediction(self):
        rng = np.random.default_rng(5)
        sched = bridge.build_schedule(10)
        x1, s_c, f_out = random_grid(rng), random_grid(rng), random_grid(rng)
        out = bridge.reverse_step(sched, x1, s_c, f_out, 1, eps=31)
        assert np.allclose(out.data, x1.data - f_out.data, atol=1e-6)

    def test_zero_everything_stays_zero(self):
        sched = bridge.build_schedule(6)
        z = const_grid(0.0)
        out = bridge.reverse_step(sched, z, z, z, 3)
        assert np.all(out.data == 0.0)

    def test_t_out_of_range(self):
        sched = bridge.build_schedule(6)
        z = const_grid(0.0)
        for bad_t in (0, 7):
            with pytest.raises(DataError):
                bridge.reverse_step(sched, z, z, z, bad_t)

    def test_exact_chain_telescopes_to_x0(self):
        # feeding the reverse chain the exact target computed from the
        # realized noise of the current state lands on x_0 no matter what
        # noise the intermediate steps inject: the final step subtracts the
        # whole accumulated displacement
        rng = np.random.default_rng(6)
        T = 16
        sched = bridge.build_schedule(T)
        x0 = rng.standard_normal((4, 4, 4))
        xT = rng.standard_normal((4, 4, 4))
        x = xT.copy()
        for t in range(T, 0, -1):
            if sched.delta[t] > 0:
                realized_eps = (
                    x - (1 - sched.alpha[t]) * x0 - sched.alpha[t] * xT
                ) / np.sqrt(sched.delta[t])
            else:
                realized_eps = np.zeros_like(x)
            f_star = bridge.training_target_values(sched, x0, xT, t, realized_eps)
            step_noise = bridge.noise_for(2024, t, x.shape)
            x = bridge.reverse_step_values(sched, x, xT, f_star, t, step_noise)
        assert np.abs(x - x0).max() < 1e-10


class TestBridgeLoss:
    def test_zero_on_match(self):
        rng = np.random.default_rng(7)
        g = random_grid(rng)
        assert bridge.bridge_loss(g, g) == 0.0

    def test_constant_offset(self):
        rng = np.random.default_rng(8)
        g = random_grid(rng)
        shifted = volume.add(g, const_grid(1.0))
        assert bridge.bridge_loss(shifted, g) == pytest.approx(1.0, abs=1e-6)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(9)
        a = random_grid(rng, dims=(2, 2, 2))
        b = random_grid(rng, dims=(2, 2, 2))
        total = 0.0
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    total += abs(float(a.data[i, j, k]) - float(b.data[i, j, k]))
        assert bridge.bridge_loss(a, b) == pytest.approx(total / 8.0, rel=1e-12)


class TestSamplingPlan:
    def test_uniform_plan_shape(self):
        sched = bridge.build_schedule(1000)
        plan = bridge.uniform_plan(sched, 10)
        assert len(plan.taus) == 10
        assert plan.taus[0] == 1000
        assert plan.taus[-1] == 1
        assert all(a > b for a, b in zip(plan.taus, plan.taus[1:]))

    def test_full_plan(self):
        sched = bridge.build_schedule(12)
        plan = bridge.uniform_plan(sched, 12)
        assert plan.taus == tuple(range(12, 0, -1))

    def test_validation(self):
        with pytest.raises(DataError):
            bridge.SamplingPlan(taus=(5, 5, 1))
        with pytest.raises(DataError):
            bridge.SamplingPlan(taus=(5, 3, 0))
        with pytest.raises(DataError):
            bridge.SamplingPlan(taus=(5, 1), eta=1.5)
        sched = bridge.build_schedule(8)
        with pytest.raises(DataError):
            bridge.check_plan(sched, bridge.SamplingPlan(taus=(7, 1)))


class TestSampler:
    def oracle_setup(self, T, dims=(8, 8, 8), seed=11):
        rng = np.random.default_rng(seed)
        sched = bridge.build_schedule(T)
        x0 = rng.uniform(-1, 1, size=dims)
        s_c = rng.uniform(-1, 1, size=dims)

        def oracle(x, t):
            # noise-free part of the target: alpha_t (x_T - x_0)
            return sched.alpha[t] * (s_c - x0)

        return sched, x0, s_c, oracle

    def test_oracle_denoiser_recovers_x0(self):
        for T, lengths in ((20, (1, 2, 10, 20)), (1000, (1, 2, 10))):
            sched, x0, s_c, oracle = self.oracle_setup(T)
            for n in lengths:
                plan = bridge.uniform_plan(sched, n, eta=0.0)
                out = bridge.sample_values(sched, plan, s_c, oracle)
                assert np.abs(out - x0).max() < 1e-4, (T, n)

    def test_single_step_plan_is_exact(self):
        sched, x0, s_c, oracle = self.oracle_setup(50)
        plan = bridge.SamplingPlan(taus=(50,), eta=0.0)
        out = bridge.sample_values(sched, plan, s_c, oracle)
        assert np.array_equal(out, x0)

    def test_full_stochastic_plan_matches_markov_chain(self):
        T = 16
        sched = bridge.build_schedule(T)
        rng = np.random.default_rng(12)
        s_c = rng.standard_normal((4, 4, 4))

        def denoiser(x, t):
            return 0.3 * np.tanh(x) + 0.05 * t / T

        seed = 555
        plan = bridge.uniform_plan(sched, T, eta=1.0, seed=seed)
        accelerated = bridge.sample_values(sched, plan, s_c, denoiser)

        x = s_c.copy()
        for t in range(T, 0, -1):
            eps = bridge.noise_for(seed, t, x.shape)
            x = bridge.reverse_step_values(sched, x, s_c, denoiser(x, t), t, eps)
        scale = max(np.abs(x).max(), 1e-12)
        assert np.abs(accelerated - x).max() / scale < 1e-4

    def test_eta_zero_is_deterministic(self):
        sched, _, s_c, oracle = self.oracle_setup(20)
        plan_a = bridge.uniform_plan(sched, 5, eta=0.0, seed=1)
        plan_b = bridge.uniform_plan(sched, 5, eta=0.0, seed=2)
        a = bridge.sample_values(sched, plan_a, s_c, oracle)
        b = bridge.sample_values(sched, plan_b, s_c, oracle)
        assert np.array_equal(a, b)

    def test_grid_wrapper_and_geometry_contract(self):
        rng = np.random.default_rng(13)
        sched = bridge.build_schedule(10)
        s_c = random_grid(rng)

        def good(x_grid, cset, t):
            return volume.scale(x_grid, 0.1)

        out = bridge.sample(sched, bridge.uniform_plan(sched, 4, eta=0.0), s_c, None, good)
        assert out.header.same_geometry(s_c.header)

        def bad(x_grid, cset, t):
            header = GridHeader(dims=(2, 2, 2), spacing=(1, 1, 1), origin=(0, 0, 0))
            return VoxelGrid(header=header, data=np.zeros((2, 2, 2), dtype=np.float32))

        with pytest.raises(DataError, match="geometry"):
            bridge.sample(sched, bridge.uniform_plan(sched, 4, eta=0.0), s_c, None, bad)

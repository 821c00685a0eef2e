import math

import numpy as np
import pytest

from genbound.bounds import (
    BoundObserver,
    BoundOptions,
    GaussianConvolutionCase,
    RateModel,
    StepStats,
    clipped_bounded_bound,
    clipped_bounded_general,
    clipped_subgaussian_bound,
    clipped_subgaussian_general,
    delta_factor,
    flatness_estimate,
    flatness_t1pm,
    grad_variance_trace,
    hutchinson_trace,
    kl_gaussian,
    lemma1_check,
    random_convolution_cases,
    rate_sweep,
    traj_bounded_bound,
    traj_bounded_general,
    traj_subgaussian_bound,
    traj_subgaussian_general,
    tv_gaussian_1d,
)
from genbound.data import synth_gaussian_mixture
from genbound.exceptions import ShapeError
from genbound.nn import CrossEntropy, PureQuadratic, flatten_params, init_mlp, set_flat_params
from genbound.optim import NoiseSchedule, TrainConfig, run_training
from genbound.rng import STREAM_FLATNESS, StreamKey, make_rng

from test_quadrature import delta_closed_form_half


def quadratic_model(d=10, seed=5):
    """Single-layer model with exactly d parameters, for the analytic loss."""
    model = init_mlp((d - 1, 1), seed=seed)
    assert model.num_params == d
    theta = make_rng(seed, 8).normal(size=d)
    set_flat_params(model, theta)
    probe_x = np.zeros((2, d - 1))
    probe_y = np.zeros(2, dtype=int)
    return model, theta, probe_x, probe_y


class TestFlatnessEstimate:
    def test_quadratic_oracle_within_three_se(self):
        model, theta, x, y = quadratic_model(d=10)
        noise = NoiseSchedule.isotropic(0.1)
        xi, se = flatness_estimate(
            PureQuadratic(), model, theta, x, y, noise, 1, 256, StreamKey(0, STREAM_FLATNESS)
        )
        assert abs(xi - 0.1) <= 3 * se
        assert se < 0.02

    def test_vanishing_sigma_gives_vanishing_flatness(self):
        model, theta, x, y = quadratic_model(d=10)
        noise = NoiseSchedule.isotropic(1e-12)
        xi, _ = flatness_estimate(
            PureQuadratic(), model, theta, x, y, noise, 1, 32, StreamKey(0, STREAM_FLATNESS)
        )
        assert abs(xi) < 1e-8

    def test_linear_component_contributes_nothing(self):
        # The flatness of the linear loss a.theta equals the difference of two
        # shifted quadratic flatness estimates sharing the same draws; the
        # antithetic pairs cancel the odd term, so the difference vanishes.
        model, theta, x, y = quadratic_model(d=10)
        noise = NoiseSchedule.isotropic(0.1)
        key = StreamKey(3, STREAM_FLATNESS)
        shift = make_rng(4, 8).normal(size=10)
        xi_a, _ = flatness_estimate(PureQuadratic(), model, theta, x, y, noise, 1, 64, key)
        xi_b, _ = flatness_estimate(PureQuadratic(), model, theta + shift, x, y, noise, 1, 64, key)
        assert abs(xi_b - xi_a) < 1e-12

    def test_estimate_is_deterministic_per_key(self):
        model, theta, x, y = quadratic_model(d=10)
        noise = NoiseSchedule.isotropic(0.05)
        a = flatness_estimate(PureQuadratic(), model, theta, x, y, noise, 1, 32, StreamKey(1, 2))
        b = flatness_estimate(PureQuadratic(), model, theta, x, y, noise, 1, 32, StreamKey(1, 2))
        assert a == b

    def test_thread_count_does_not_change_result(self, monkeypatch):
        model, theta, x, y = quadratic_model(d=10)
        noise = NoiseSchedule.isotropic(0.05)
        serial = flatness_estimate(
            PureQuadratic(), model, theta, x, y, noise, 1, 32, StreamKey(1, 2)
        )
        monkeypatch.setenv("GENBOUND_THREADS", "4")
        threaded = flatness_estimate(
            PureQuadratic(), model, theta, x, y, noise, 1, 32, StreamKey(1, 2)
        )
        assert serial == threaded


class TestFlatnessT1pm:
    def test_first_step_is_identical_to_fresh_noise(self):
        model, theta, x, y = quadratic_model(d=10)
        noise = NoiseSchedule.isotropic(0.05)
        key = StreamKey(2, STREAM_FLATNESS)
        fresh = flatness_estimate(PureQuadratic(), model, theta, x, y, noise, 1, 64, key)
        acc = flatness_t1pm(PureQuadratic(), model, theta, x, y, noise, 1, 64, key)
        assert fresh == acc

    def test_accumulated_scale_at_k100_matches_analytic_value(self):
        model, theta, x, y = quadratic_model(d=10)
        noise = NoiseSchedule.isotropic(0.005)
        xi, se = flatness_t1pm(
            PureQuadratic(), model, theta, x, y, noise, 100, 256, StreamKey(0, STREAM_FLATNESS)
        )
        assert abs(xi - 0.025) <= 3 * se  # d * k * sigma^2

    @pytest.mark.parametrize("k", [10, 100])
    def test_ratio_to_fresh_flatness_is_k(self, k):
        model, theta, x, y = quadratic_model(d=10)
        noise = NoiseSchedule.isotropic(0.005)
        key = StreamKey(0, STREAM_FLATNESS)
        fresh, _ = flatness_estimate(PureQuadratic(), model, theta, x, y, noise, k, 256, key)
        acc, _ = flatness_t1pm(PureQuadratic(), model, theta, x, y, noise, k, 256, key)
        assert acc / fresh == pytest.approx(k, rel=0.10)


class TestGradVarianceTrace:
    def test_two_point_example(self):
        stats = grad_variance_trace([np.array([1.0, 0.0]), np.array([-1.0, 0.0])])
        assert np.array_equal(stats.mean, np.zeros(2))
        assert stats.trace_variance == 1.0
        assert stats.count == 2

    def test_identical_gradients_have_zero_variance(self):
        g = np.array([0.3, -0.7, 2.0])
        stats = grad_variance_trace([g] * 5)
        assert stats.trace_variance == 0.0

    def test_matches_bruteforce_coordinate_variances(self):
        grads = make_rng(11, 0).normal(size=(50, 7))
        stats = grad_variance_trace(list(grads))
        brute = 0.0
        for j in range(7):
            col = grads[:, j]
            mean = col.mean()
            brute += sum((v - mean) ** 2 for v in col) / len(col)
        assert abs(stats.trace_variance - brute) < 1e-12

    def test_requires_two_gradients(self):
        with pytest.raises(ShapeError):
            grad_variance_trace([np.zeros(3)])


class TestTrajSubgaussian:
    def test_zero_variance_gives_zero_trajectory(self):
        records = [StepStats(eta=0.01, trace_var=0.0, batch_size=4, sigma=0.005)] * 10
        assert traj_subgaussian_bound(records, 1.0, 100, 1000) == 0.0

    def test_single_step_closed_form(self):
        records = [StepStats(eta=0.01, trace_var=2.5, batch_size=1, sigma=0.005)]
        value = traj_subgaussian_bound(records, 1.0, 100, 1000)
        expected = math.sqrt(100 / 1000 * math.log(1.1))
        assert value == pytest.approx(expected, rel=1e-12)
        assert value == pytest.approx(0.09763, rel=1e-4)

    def test_doubling_r_doubles_trajectory(self):
        records = [StepStats(eta=0.01, trace_var=1.3, batch_size=8, sigma=0.01)] * 5
        one = traj_subgaussian_bound(records, 1.0, 50, 400)
        two = traj_subgaussian_bound(records, 2.0, 50, 400)
        assert two == pytest.approx(2 * one, rel=1e-15)

    def test_general_equals_isotropic_for_scaled_identity(self):
        iso = [StepStats(eta=0.02, trace_var=1.0, batch_size=2, sigma=0.01)] * 8
        gen = [
            StepStats(eta=0.02, trace_var=1.0, batch_size=2, diag=np.full(30, 1e-4))
        ] * 8
        a = traj_subgaussian_bound(iso, 1.5, 30, 900)
        b = traj_subgaussian_general(gen, 1.5, 30, 900)
        assert b == pytest.approx(a, rel=1e-14)

    def test_geometric_mean_of_anisotropic_diagonal(self):
        rec = StepStats(eta=0.01, trace_var=1.0, batch_size=1, diag=np.array([1e-4, 1e-6]))
        assert rec.variance_geomean() == pytest.approx(1e-5, rel=1e-12)

    def test_matched_geometric_means_give_identical_bounds(self):
        mixed = [
            StepStats(eta=0.01, trace_var=1.0, batch_size=1, diag=np.array([1e-4, 1e-6]))
        ] * 4
        iso = [StepStats(eta=0.01, trace_var=1.0, batch_size=1, sigma=math.sqrt(1e-5))] * 4
        a = traj_subgaussian_general(mixed, 1.0, 2, 100)
        b = traj_subgaussian_general(iso, 1.0, 2, 100)
        assert a == pytest.approx(b, rel=1e-12)

    def test_record_needs_exactly_one_noise_spec(self):
        with pytest.raises(ShapeError):
            StepStats(eta=0.01, trace_var=1.0, batch_size=1).variance_geomean()
        with pytest.raises(ShapeError):
            StepStats(
                eta=0.01, trace_var=1.0, batch_size=1, sigma=0.1, diag=np.ones(2)
            ).variance_geomean()


class TestTrajBounded:
    def test_hundred_step_chain_against_delta_oracle(self):
        k, eta, sigma, alpha, n = 100, 0.01, 0.005, 0.5, 1000
        value = traj_bounded_bound(1.0, 1.0, n, [(eta, sigma, alpha)] * k)
        delta = delta_closed_form_half(eta)
        expected = math.sqrt(k * 2 * delta * eta / sigma**2) / n
        assert value == pytest.approx(expected, rel=1e-8)
        assert value == pytest.approx(0.02782, rel=1e-3)

    def test_empty_schedule_gives_zero(self):
        assert traj_bounded_bound(1.0, 1.0, 1000, []) == 0.0

    def test_doubling_n_halves_the_bound(self):
        schedule = [(0.01, 0.005, 0.5)] * 20
        a = traj_bounded_bound(1.0, 1.0, 1000, schedule)
        b = traj_bounded_bound(1.0, 1.0, 2000, schedule)
        assert b == pytest.approx(a / 2, rel=1e-15)

    def test_general_reduces_to_isotropic(self):
        sigma = 0.005
        iso = traj_bounded_bound(1.0, 2.0, 500, [(0.01, sigma, 0.5)] * 6)
        gen = traj_bounded_general(1.0, 2.0, 500, [(0.01, sigma**2, sigma**2, 0.5)] * 6)
        assert gen == pytest.approx(iso, rel=1e-12)

    def test_zero_sigma_rejected(self):
        with pytest.raises(ShapeError):
            traj_bounded_bound(1.0, 1.0, 100, [(0.01, 0.0, 0.5)])


class TestClippedSubgaussian:
    def test_frozen_example(self):
        value = clipped_subgaussian_bound(1.0, 2, 100, 5.0, [(0.1, 0.1)] * 4)
        expected = math.sqrt(2 / 100 * 4 * math.log(26.0))
        assert value == pytest.approx(expected, rel=1e-12)
        assert value == pytest.approx(0.5105, rel=1e-3)

    def test_threshold_to_zero_kills_the_bound(self):
        values = [
            clipped_subgaussian_bound(1.0, 2, 100, a, [(0.1, 0.1)] * 4)
            for a in (1e-1, 1e-3, 1e-6)
        ]
        assert values[0] > values[1] > values[2]
        assert values[2] < 1e-5

    def test_constant_schedule_scales_as_sqrt_k(self):
        one = clipped_subgaussian_bound(1.0, 3, 200, 2.0, [(0.05, 0.01)])
        for k in (4, 16, 64):
            acc = clipped_subgaussian_bound(1.0, 3, 200, 2.0, [(0.05, 0.01)] * k)
            assert acc == pytest.approx(math.sqrt(k) * one, rel=1e-12)

    def test_general_variant_matches_isotropic(self):
        sigma = 0.02
        a = clipped_subgaussian_bound(1.0, 4, 300, 3.0, [(0.01, sigma)] * 5)
        b = clipped_subgaussian_general(1.0, 4, 300, 3.0, [(0.01, sigma**2)] * 5)
        assert b == pytest.approx(a, rel=1e-14)


class TestClippedBounded:
    def test_empty_schedule_gives_zero(self):
        assert clipped_bounded_bound(1.0, 5.0, 64, 1000, []) == 0.0

    def test_doubling_batch_size_doubles_the_bound(self):
        schedule = [(0.001, 0.005, 0.5)] * 10
        a = clipped_bounded_bound(1.0, 5.0, 32, 10_000, schedule)
        b = clipped_bounded_bound(1.0, 5.0, 64, 10_000, schedule)
        assert b == pytest.approx(2 * a, rel=1e-14)

    def test_fifty_step_chain_against_delta_oracle(self):
        c0, clip, b, n, eta, sigma, alpha, k = 1.0, 5.0, 64, 10_000, 0.001, 0.005, 0.5, 50
        value = clipped_bounded_bound(c0, clip, b, n, [(eta, sigma, alpha)] * k)
        delta = delta_closed_form_half(eta)
        expected = 2 * c0 * math.sqrt(k * 2 * delta * clip**2 * b**2 * eta / (n**2 * sigma**2))
        assert value == pytest.approx(expected, rel=1e-8)

    def test_general_reduces_to_isotropic(self):
        sigma = 0.005
        iso = clipped_bounded_bound(1.0, 5.0, 16, 500, [(0.01, sigma, 0.5)] * 6)
        gen = clipped_bounded_general(1.0, 5.0, 16, 500, [(0.01, sigma**2, sigma**2, 0.5)] * 6)
        assert gen == pytest.approx(iso, rel=1e-12)


class TestHutchinson:
    def test_quadratic_loss_trace_is_dimension_exactly(self):
        d = 10
        model, _, x, y = quadratic_model(d=d)
        theta = np.zeros(d)
        set_flat_params(model, theta)
        for probes in (1, 3):
            est = hutchinson_trace(
                PureQuadratic(), model, theta, x, y, probes, StreamKey(0, 5)
            )
            assert est == float(d)

    def test_quadratic_trace_is_center_independent(self):
        # The linear part of the loss has zero Hessian and cannot contribute.
        d = 10
        model, theta, x, y = quadratic_model(d=d)
        est = hutchinson_trace(PureQuadratic(), model, theta, x, y, 4, StreamKey(0, 5))
        assert est == pytest.approx(float(d), abs=1e-8)

    def test_saturated_cross_entropy_has_zero_curvature(self):
        # Huge-margin logits make softmax exactly one-hot in float64: the
        # loss is locally constant, so gradients and the trace vanish.
        model = init_mlp((3, 2), seed=0)
        set_flat_params(model, np.array([1e4, -1e4, 1e4, -1e4, 1e4, -1e4, 0.0, 0.0]))
        x = np.eye(3)[:2]
        y = np.array([0, 0])
        est = hutchinson_trace(
            CrossEntropy(), model, flatten_params(model), x, y, 3, StreamKey(1, 5), fd_step=1e-3
        )
        assert est == 0.0

    def test_taylor_consistency_with_flatness_on_trained_mlp(self):
        # Trained to its loss plateau but not driven into softmax saturation,
        # where piecewise-linear kinks would dominate both finite-scale
        # curvature estimates.
        data = synth_gaussian_mixture(128, 6, 3, seed=2)
        model = init_mlp((6, 8, 3), seed=2)
        config = TrainConfig(eta=0.02, batch_size=32, epochs=10, seed=2)
        run_training(config, model, data)
        theta = flatten_params(model)
        sigma = 1e-3
        noise = NoiseSchedule.isotropic(sigma)
        xi, se = flatness_estimate(
            CrossEntropy(), model, theta, data.features, data.labels,
            noise, 1, 512, StreamKey(0, STREAM_FLATNESS),
        )
        trace = hutchinson_trace(
            CrossEntropy(), model, theta, data.features, data.labels,
            128, StreamKey(0, 5), fd_step=1e-4,
        )
        # Taylor: flatness ~ sigma^2 * trace(H) for small sigma.
        assert xi / sigma**2 == pytest.approx(trace, rel=0.15)


class TestKlGaussian:
    def test_unit_shift(self):
        assert kl_gaussian(1.0, 1.0, 0.0, 1.0) == pytest.approx(0.5, abs=1e-15)

    def test_identical_distributions(self):
        assert kl_gaussian(0.3, 2.0, 0.3, 2.0) == 0.0

    def test_variance_mismatch(self):
        expected = 0.5 * (2.0 - 1.0 - math.log(2.0))
        assert kl_gaussian(0.0, 2.0, 0.0, 1.0) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.1534, abs=5e-5)

    def test_diagonal_case_sums_coordinates(self):
        value = kl_gaussian([1.0, 0.0], [1.0, 2.0], [0.0, 0.0], [1.0, 1.0])
        assert value == pytest.approx(0.5 + 0.5 * (2 - 1 - math.log(2)), abs=1e-14)

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(ShapeError):
            kl_gaussian(0.0, 0.0, 0.0, 1.0)


class TestTvGaussian:
    @pytest.mark.parametrize(
        "mu1,v1,mu2,v2",
        [(0.0, 1.0, 1.0, 1.0), (0.0, 1.0, 0.0, 4.0), (-1.0, 0.5, 2.0, 3.0), (0.3, 2.0, 0.3, 2.0)],
    )
    def test_matches_numeric_integration(self, mu1, v1, mu2, v2):
        xs = np.linspace(-30, 30, 2_000_001)
        p = np.exp(-((xs - mu1) ** 2) / (2 * v1)) / math.sqrt(2 * math.pi * v1)
        q = np.exp(-((xs - mu2) ** 2) / (2 * v2)) / math.sqrt(2 * math.pi * v2)
        numeric = 0.5 * np.trapezoid(np.abs(p - q), xs)
        assert tv_gaussian_1d(mu1, v1, mu2, v2) == pytest.approx(numeric, abs=1e-9)

    def test_symmetry(self):
        assert tv_gaussian_1d(0.0, 1.0, 2.0, 3.0) == pytest.approx(
            tv_gaussian_1d(2.0, 3.0, 0.0, 1.0), abs=1e-14
        )

    def test_pinsker_inequality_on_grid(self):
        rng = make_rng(31, 0)
        for _ in range(100):
            mu1, mu2 = rng.uniform(-3, 3, size=2)
            v1, v2 = rng.uniform(0.05, 5.0, size=2)
            tv = tv_gaussian_1d(mu1, v1, mu2, v2)
            assert tv <= math.sqrt(kl_gaussian(mu1, v1, mu2, v2) / 2.0) + 1e-12


class TestLemma1:
    def test_analytic_case(self):
        # X' ~ N(1,1), X ~ N(0,1), Y' = Y ~ N(0,1) independent of X.
        res = lemma1_check(GaussianConvolutionCase(0.0, 1.0, 1.0, 1.0))
        assert res["lhs"] == pytest.approx(0.25, abs=1e-14)
        assert res["rhs"] == pytest.approx(0.5, abs=1e-14)
        assert res["holds"]

    def test_identical_pair_gives_zero_on_both_sides(self):
        case = GaussianConvolutionCase(0.7, 2.0, 0.7, 2.0, 0.1, 0.3, 1.5, 0.1, 0.3, 1.5)
        res = lemma1_check(case)
        assert res["lhs"] == 0.0
        assert res["rhs"] == 0.0
        assert res["holds"]

    def test_randomized_grid_of_100_cases(self):
        for case in random_convolution_cases(100, seed=17):
            res = lemma1_check(case)
            assert res["holds"], f"violated at {case}"
            assert res["lhs"] >= 0.0 and res["rhs"] >= 0.0


class TestRateSweep:
    def test_one_third_gamma_gives_minus_two_thirds(self):
        res = rate_sweep([100, 1000, 10_000, 100_000], gamma=1.0 / 3.0)
        assert res.slope == pytest.approx(-2.0 / 3.0, abs=0.05)

    def test_low_gamma_top_decade_slope(self):
        res = rate_sweep([100, 1000, 10_000, 100_000], gamma=0.2)
        assert res.top_decade_slope == pytest.approx(-0.4, abs=0.05)

    def test_pure_power_law_is_recovered_exactly(self):
        # c1 = 0 removes the trajectory term, leaving flatness_scale * n^(-2/3).
        model = RateModel(c1=0.0)
        res = rate_sweep([100, 1000, 10_000, 100_000], gamma=1.0 / 3.0, model=model)
        assert res.slope == pytest.approx(-2.0 / 3.0, abs=1e-10)

    def test_too_few_values_rejected(self):
        with pytest.raises(ShapeError):
            rate_sweep([100, 1000, 10_000], gamma=0.3)

    def test_narrow_span_rejected(self):
        with pytest.raises(ShapeError):
            rate_sweep([100, 200, 400, 800], gamma=0.3)


class TestBoundObserver:
    @pytest.fixture
    def run_with_observer(self):
        def factory(clip=None, subgaussian=True, bounded=True, epochs=3):
            data = synth_gaussian_mixture(48, 6, 3, seed=1)
            probe = synth_gaussian_mixture(32, 6, 3, seed=9)
            model = init_mlp((6, 8, 3), seed=4)
            config = TrainConfig(
                eta=0.05, batch_size=16, epochs=epochs, seed=7, clip_threshold=clip
            )
            observer = BoundObserver(
                probe.features, probe.labels, data.n, StreamKey(7, STREAM_FLATNESS),
                BoundOptions(subgaussian=subgaussian, bounded=bounded, m_samples=8),
            )
            noise = NoiseSchedule.isotropic(0.01)
            run_training(config, model, data, test=probe, observers=[observer], noise=noise)
            return observer.rows, config, data.n, model.num_params

        return factory

    def test_one_row_per_epoch_with_additive_decomposition(self, run_with_observer):
        rows, _, _, _ = run_with_observer()
        assert len(rows) == 3
        assert [r.epoch for r in rows] == [1, 2, 3]
        for row in rows:
            traj = row.bound_subg_t2pm - abs(row.flatness_t2pm)
            assert traj >= 0
            assert row.bound_subg_t1pm == pytest.approx(abs(row.flatness_t1pm) + traj, rel=1e-12)
            assert row.gap == pytest.approx(row.test_loss - row.train_loss, rel=1e-12)
            assert row.traj_increment >= 0
            assert row.sigma_k == 0.01

    def test_trajectory_terms_are_non_decreasing(self, run_with_observer):
        rows, _, _, _ = run_with_observer(clip=5.0, epochs=4)
        subg_traj = [r.bound_subg_t2pm - abs(r.flatness_t2pm) for r in rows]
        bounded_traj = [r.bound_bounded - abs(r.flatness_t2pm) for r in rows]
        clipped = [r.bound_clipped for r in rows]
        for seq in (subg_traj, bounded_traj, clipped):
            assert all(b >= a - 1e-15 for a, b in zip(seq, seq[1:]))

    def test_clipped_column_matches_closed_form(self, run_with_observer):
        rows, config, n, d = run_with_observer(clip=5.0)
        for row in rows:
            closed = math.sqrt(
                config.R**2 * d * row.step
                * math.log1p(config.clip_threshold**2 * 0.05**2 / 0.01**2) / n
            )
            assert row.bound_clipped == pytest.approx(closed, rel=1e-12)

    def test_bounded_column_matches_standalone_function(self, run_with_observer):
        rows, config, n, _ = run_with_observer()
        last = rows[-1]
        expected = traj_bounded_bound(
            config.c0, config.c1, n, [(0.05, 0.01, config.alpha)] * last.step
        )
        assert last.bound_bounded - abs(last.flatness_t2pm) == pytest.approx(expected, rel=1e-12)

    def test_disabled_bounds_leave_columns_empty(self, run_with_observer):
        rows, _, _, _ = run_with_observer(subgaussian=False, bounded=False)
        for row in rows:
            assert row.bound_subg_t2pm is None
            assert row.bound_bounded is None
            assert row.flatness_t2pm is None
            assert row.bound_clipped is None

    def test_increments_reconstruct_accumulated_trajectory(self, run_with_observer):
        rows, config, n, d = run_with_observer()
        total = sum(r.traj_increment for r in rows)
        traj_last = rows[-1].bound_subg_t2pm - abs(rows[-1].flatness_t2pm)
        assert traj_last == pytest.approx(math.sqrt(config.R**2 * d / n * total), rel=1e-10)

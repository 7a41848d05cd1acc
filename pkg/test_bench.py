"""
Benchmark problems, their closed forms and the Euler-Maruyama oracle.
"""

import math

import numpy as np
import pandas as pd
import pytest
import torch
from scipy import integrate

from bench import (
    ParticleCloud,
    ProblemSpec,
    build_problem,
    compare_histogram,
    density_gap,
    euler_maruyama,
    fp_log_residual,
    histogram_density,
    initial_cloud,
    noise_matrix,
    sup_bound_factor,
    write_histogram_csv,
)
from diffengine import DTYPE
from errors import ConfigurationError
from fpcore import FPProblem, effective_drift


def problem(name, dim, **kw):
    return build_problem(ProblemSpec(name=name, dim=dim, **kw))


# ═══════════════════════════════════════════════════════════════════════════════
# CLOSED FORMS
# ═══════════════════════════════════════════════════════════════════════════════

class TestAnalyticSolutions:

    def test_toy_peak(self):
        _, solution = problem("toy", 1)
        assert solution.density([[0.0]], 1.0)[0] == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-12)
        assert solution.density([[0.0]], 1.0)[0] == pytest.approx(0.3989423, abs=1e-7)

    def test_toy_starts_at_minus_one(self):
        _, solution = problem("toy", 3)
        assert solution.density([[-1.0, -1.0, -1.0]], 0.0)[0] == pytest.approx((2 * math.pi) ** -1.5, rel=1e-12)

    def test_diffusive_gaussian_peak(self):
        _, solution = problem("tfp-gauss", 10)
        assert solution.density(np.full((1, 10), 2.0), 1.0)[0] == pytest.approx((4 * math.pi) ** -5, rel=1e-12)

    def test_ou_peak(self):
        _, solution = problem("sfp-ou", 30)
        assert solution.density(np.zeros((1, 30)))[0] == pytest.approx(math.pi**-15, rel=1e-12)

    def test_ou_parameters(self):
        _, solution = problem("sfp-ou", 1, a=2.0, sigma=0.5)
        var = 0.5**2 / (2 * 2.0)
        assert solution.density([[0.3]])[0] == pytest.approx(math.exp(-0.09 / (2 * var)) / math.sqrt(2 * math.pi * var))

    def test_ou_ignores_time(self):
        _, solution = problem("sfp-ou", 2)
        x = torch.randn(5, 2, dtype=DTYPE)
        assert torch.equal(solution(x, 0.0), solution(x, 3.0))

    @pytest.mark.parametrize("name,t", [("toy", 0.0), ("toy", 0.7), ("tfp-gauss", 0.3), ("tfp-gauss", 1.0), ("sfp-ou", 0.0)])
    def test_normalized(self, name, t):
        _, solution = problem(name, 1)
        mass, _ = integrate.quad(lambda v: float(solution.density([[v]], t)[0]), -20.0, 20.0, epsabs=1e-12, limit=200)
        assert mass == pytest.approx(1.0, abs=1e-8)

    def test_unknown_problem(self):
        with pytest.raises(ConfigurationError):
            build_problem(ProblemSpec(name="heat"))

    def test_spec_aliases(self):
        spec = ProblemSpec(d=4, T=2.5)
        assert spec.dim == 4 and spec.horizon == 2.5
        assert problem("tfp-gauss", 2, horizon=2.5)[0].horizon == 2.5


class TestPdeResiduals:

    @pytest.mark.parametrize("name", ["toy", "tfp-gauss", "sfp-ou"])
    def test_solutions_satisfy_their_equations(self, name, gen):
        fp, solution = problem(name, 3)
        x = 2 * torch.randn(100, 3, generator=gen, dtype=DTYPE)
        t = torch.rand(100, generator=gen, dtype=DTYPE)
        assert fp_log_residual(fp, solution, x, t).abs().max() < 1e-6

    def test_wrong_solution_is_caught(self, gen):
        fp, _ = problem("tfp-gauss", 2)
        _, toy_solution = problem("toy", 2)
        x = torch.randn(20, 2, generator=gen, dtype=DTYPE)
        assert fp_log_residual(fp, toy_solution, x, 0.5).abs().max() > 0.1

    def test_steady_state_drift_vanishes(self, ou2, gen):
        fp, solution = ou2
        x = torch.randn(30, 2, generator=gen, dtype=DTYPE)
        assert effective_drift(fp, solution, x, 0.0).abs().max() < 1e-10


# ═══════════════════════════════════════════════════════════════════════════════
# EULER-MARUYAMA
# ═══════════════════════════════════════════════════════════════════════════════

class TestEulerMaruyama:

    def test_zero_diffusion_toy_shift(self, toy2):
        fp, _ = toy2
        cloud = initial_cloud(fp, 100, seed=3)
        dt = 0.01
        out = euler_maruyama(fp, cloud, dt, 1.0)
        shift = out.positions - cloud.positions
        # left Riemann sum of 2t over [0, 1]
        assert np.allclose(shift, 1.0 - dt, atol=1e-12)
        assert out.time == 1.0

    def test_no_drift_no_diffusion_keeps_particles(self):
        still = FPProblem(name="still", dim=2, drift=lambda x, t: torch.zeros_like(x))
        cloud = ParticleCloud(positions=np.random.default_rng(0).normal(size=(50, 2)), seed=1)
        out = euler_maruyama(still, cloud, 0.1, 2.0)
        assert np.array_equal(out.positions, cloud.positions)

    def test_seeded_and_deterministic(self, gauss2):
        fp, _ = gauss2
        cloud = initial_cloud(fp, 200, seed=9)
        a = euler_maruyama(fp, cloud, 0.05, 0.5)
        b = euler_maruyama(fp, cloud, 0.05, 0.5)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(cloud.positions, initial_cloud(fp, 200, seed=9).positions)

    def test_ou_variance(self):
        fp, _ = problem("sfp-ou", 1)
        cloud = initial_cloud(fp, 20_000, seed=4, std=2.0)
        out = euler_maruyama(fp, cloud, 0.01, 10.0)
        assert abs(out.positions.var() - 0.5) < 0.03
        assert abs(out.positions.mean()) < 0.03

    def test_diffusive_gaussian_moments(self):
        fp, _ = problem("tfp-gauss", 1)
        out = euler_maruyama(fp, initial_cloud(fp, 20_000, seed=2), 0.01, 1.0)
        assert abs(out.positions.mean() - 2.0) < 0.05
        assert abs(out.positions.var() - 2.0) < 0.1

    def test_general_diffusion_noise_matrix(self, gen):
        fp = FPProblem(
            name="aniso", dim=2, drift=lambda x, t: -x,
            diffusion=lambda x, t: torch.tensor([[1.0, 0.3], [0.3, 0.5]], dtype=DTYPE).expand(x.shape[0], 2, 2),
        )
        x = torch.randn(3, 2, generator=gen, dtype=DTYPE)
        sigma = noise_matrix(fp, x, torch.zeros(3, dtype=DTYPE))
        assert torch.allclose(sigma @ sigma.transpose(1, 2), 2 * fp.diffusion_matrix(x, torch.zeros(3, dtype=DTYPE)))

    def test_isotropic_noise_is_a_scalar(self, gauss2):
        fp, _ = gauss2
        assert noise_matrix(fp, torch.zeros(1, 2, dtype=DTYPE), torch.zeros(1, dtype=DTYPE)) == 1.0

    def test_indefinite_diffusion_is_rejected(self):
        fp = FPProblem(
            name="flip", dim=2, drift=lambda x, t: -x,
            diffusion=lambda x, t: torch.diag(torch.tensor([1.0, -1.0], dtype=DTYPE)).expand(x.shape[0], 2, 2),
        )
        cloud = ParticleCloud(positions=np.zeros((10, 2)), seed=0)
        with pytest.raises(ConfigurationError):
            euler_maruyama(fp, cloud, 0.1, 1.0)

    def test_rejects_bad_inputs(self, gauss2):
        fp, _ = gauss2
        with pytest.raises(ConfigurationError):
            initial_cloud(fp, 0)
        with pytest.raises(ConfigurationError):
            euler_maruyama(fp, initial_cloud(fp, 4), 0.0, 1.0)


# ═══════════════════════════════════════════════════════════════════════════════
# HISTOGRAMS
# ═══════════════════════════════════════════════════════════════════════════════

class TestHistograms:

    def test_single_particle(self):
        cloud = ParticleCloud(positions=np.array([[0.33]]))
        hist = histogram_density(cloud, 10, [(0.0, 1.0)])
        assert hist.density[3] == pytest.approx(10.0)
        assert hist.density.sum() == pytest.approx(10.0)

    def test_mass_outside_range_is_missing(self):
        cloud = ParticleCloud(positions=np.array([[0.5], [7.0]]))
        hist = histogram_density(cloud, 4, [(0.0, 1.0)])
        assert hist.density.sum() * hist.bin_volume == pytest.approx(0.5)

    def test_uniform_cloud_is_flat(self):
        centers = (np.arange(20) + 0.5) / 20
        cloud = ParticleCloud(positions=np.repeat(centers, 5)[:, None])
        hist = histogram_density(cloud, 20, [(0.0, 1.0)])
        assert np.allclose(hist.density, 1.0)

    def test_two_dimensional(self):
        cloud = ParticleCloud(positions=np.array([[0.1, 0.9], [0.6, 0.2]]))
        hist = histogram_density(cloud, [2, 2], [(0.0, 1.0), (0.0, 1.0)], coords=(0, 1))
        assert hist.density.shape == (2, 2)
        assert hist.density[0, 1] == pytest.approx(2.0) and hist.density[1, 0] == pytest.approx(2.0)
        assert hist.center_points().shape == (4, 2)

    def test_empty_cloud(self):
        with pytest.raises(ConfigurationError):
            histogram_density(ParticleCloud(positions=np.zeros((0, 1))), 10, [(0.0, 1.0)])

    def test_csv_columns(self, tmp_path):
        cloud = ParticleCloud(positions=np.array([[0.1, 0.9]]))
        hist = histogram_density(cloud, 3, [(0.0, 1.0), (0.0, 1.0)], coords=(0, 1))
        path = write_histogram_csv(hist, tmp_path / "h.csv", {"density_exact": np.ones(9)})
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["bin_center_0", "bin_center_1", "density", "density_exact"]
        assert len(frame) == 9


class TestComparison:

    def test_bound_factor(self):
        assert sup_bound_factor(1, 3.0) == pytest.approx(3.0, abs=1e-9)
        assert 3.0 < sup_bound_factor(100) < sup_bound_factor(10_000)

    def test_density_gap(self):
        sup, l1 = density_gap(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.5, 2.0, 2.0, 4.0]), 0.25)
        assert sup == 1.0
        assert l1 == pytest.approx(0.375)

    def test_comparison_errors_match_density_gap(self):
        _, solution = problem("sfp-ou", 1)
        samples = np.random.default_rng(3).normal(scale=math.sqrt(0.5), size=(5_000, 1))
        hist = histogram_density(ParticleCloud(positions=samples), 20, [(-3.0, 3.0)])
        result = compare_histogram(hist, solution, 0.0)
        assert (result.sup_error, result.l1_error) == density_gap(hist.density, result.exact, hist.bin_volume)

    def test_exact_samples_pass(self):
        _, solution = problem("sfp-ou", 1)
        samples = np.random.default_rng(7).normal(scale=math.sqrt(0.5), size=(50_000, 1))
        hist = histogram_density(ParticleCloud(positions=samples), 60, [(-3.0, 3.0)])
        result = compare_histogram(hist, solution, 0.0)
        assert result.passed
        assert result.l1_error < 0.05

    def test_shifted_samples_fail(self):
        _, solution = problem("sfp-ou", 1)
        samples = np.random.default_rng(7).normal(loc=0.3, scale=math.sqrt(0.5), size=(50_000, 1))
        hist = histogram_density(ParticleCloud(positions=samples), 60, [(-3.0, 3.0)])
        assert not compare_histogram(hist, solution, 0.0).passed

    @pytest.mark.slow
    @pytest.mark.parametrize("name,dim", [("toy", 1), ("tfp-gauss", 1), ("tfp-gauss", 2), ("sfp-ou", 1), ("sfp-ou", 2)])
    def test_oracle_agrees_with_closed_forms(self, name, dim):
        fp, solution = problem(name, dim)
        steady = fp.is_steady_state
        cloud = initial_cloud(fp, 100_000, seed=0, std=2.0 if steady else None)
        t1 = 10.0 if steady else 1.0
        cloud = euler_maruyama(fp, cloud, 1e-3, t1)
        low, high = (-3.0, 3.0) if steady else (-5.0, 5.0)
        bins = 100 if dim == 1 else 30
        hist = histogram_density(cloud, bins, [(low, high)] * dim, tuple(range(dim)))
        result = compare_histogram(hist, solution, 0.0 if steady else t1)
        assert result.passed, f"worst z {result.worst_z:.2f} > {result.z_bound:.2f}"

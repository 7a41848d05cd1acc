"""
Effective drift and augmented characteristic dynamics on the benchmark
problems, checked against their closed-form solutions.
"""

import math

import pytest
import torch
from pydantic import ValidationError

from bench import ProblemSpec, build_problem
from diffengine import DTYPE, central_difference_divergence
from errors import ConfigurationError
from fpcore import (
    AugmentedState,
    FPProblem,
    augmented_dynamics,
    characteristic_dynamics,
    effective_drift,
    scale_invariance_check,
)
from networks import LogDensityTFP, PotentialNet, exact_ou_flow
from odesolve import SolverConfig, ode_solve


def zero_state(x):
    return AugmentedState(x, torch.zeros(x.shape[0], dtype=DTYPE))


def random_tfp_model(problem, gen, scale=0.3):
    return LogDensityTFP(problem.p0_log, PotentialNet(problem.dim, width=8, n_layers=2, init_scale=scale, generator=gen))


class TestEffectiveDrift:

    def test_zero_diffusion_ignores_the_model(self, toy2, gen):
        problem, _ = toy2
        x = torch.randn(5, 2, generator=gen, dtype=DTYPE)
        expected = torch.full((5, 2), 2 * 0.3, dtype=DTYPE)
        assert torch.equal(effective_drift(problem, None, x, 0.3), expected)
        assert torch.equal(effective_drift(problem, random_tfp_model(problem, gen), x, 0.3), expected)

    def test_diffusive_gaussian_exact_solution(self, gen):
        problem, solution = build_problem(ProblemSpec(name="tfp-gauss", dim=3))
        t = 0.7
        x = torch.randn(6, 3, generator=gen, dtype=DTYPE)
        expected = 2.0 + (x - 2 * t) / (2 * (t + 1))
        assert torch.allclose(effective_drift(problem, solution, x, t), expected, atol=1e-14)
        at_mean = torch.full((1, 3), 2 * t, dtype=DTYPE)
        assert torch.allclose(effective_drift(problem, solution, at_mean, t), torch.full((1, 3), 2.0, dtype=DTYPE))

    def test_ou_exact_solution_is_stationary(self, ou2, gen):
        problem, solution = ou2
        x = 3 * torch.randn(50, 2, generator=gen, dtype=DTYPE)
        assert effective_drift(problem, solution, x, 0.0).abs().max() < 1e-12

    def test_single_point(self, ou2):
        problem, solution = ou2
        out = effective_drift(problem, solution, torch.ones(2, dtype=DTYPE), 0.0)
        assert out.shape == (2,)

    def test_diffusion_needs_a_model(self, gauss2):
        problem, _ = gauss2
        with pytest.raises(ConfigurationError):
            effective_drift(problem, None, torch.zeros(1, 2, dtype=DTYPE), 0.5)


class TestAugmentedDynamics:

    def test_toy_characteristics(self, toy2):
        problem, _ = toy2
        rates = augmented_dynamics(problem, None, zero_state(torch.randn(4, 2, dtype=DTYPE)), 0.4)
        assert torch.equal(rates.x, torch.full((4, 2), 0.8, dtype=DTYPE))
        assert torch.equal(rates.logp, torch.zeros(4, dtype=DTYPE))

    def test_ou_exact_solution_is_a_fixed_point(self, ou2, gen):
        problem, solution = ou2
        rates = augmented_dynamics(problem, solution, zero_state(torch.randn(10, 2, generator=gen, dtype=DTYPE)), 0.0)
        assert rates.x.abs().max() < 1e-12
        assert rates.logp.abs().max() < 1e-12

    def test_diffusive_gaussian_log_density_rate(self, gen):
        problem, solution = build_problem(ProblemSpec(name="tfp-gauss", dim=10))
        x = torch.randn(3, 10, generator=gen, dtype=DTYPE)
        rates = augmented_dynamics(problem, solution, zero_state(x), 0.0)
        assert torch.allclose(rates.logp, torch.full((3,), -5.0, dtype=DTYPE), atol=1e-12)

    def test_hutchinson_matches_exact_trace_for_isotropic_gaussian(self, gen):
        problem, solution = build_problem(ProblemSpec(name="tfp-gauss", dim=4))
        x = torch.randn(3, 4, generator=gen, dtype=DTYPE)
        exact = augmented_dynamics(problem, solution, zero_state(x), 0.5)
        # the Hessian of a isotropic Gaussian log-density is diagonal, so one probe is exact
        probe = augmented_dynamics(problem, solution, zero_state(x), 0.5, estimator="hutchinson", generator=gen)
        assert torch.allclose(probe.logp, exact.logp, atol=1e-13)

    def test_divergence_against_finite_differences(self, gen):
        problem, _ = build_problem(ProblemSpec(name="tfp-gauss", dim=3))
        model = random_tfp_model(problem, gen, scale=0.5)
        t = 0.6

        def drift(y):
            with torch.enable_grad():
                return effective_drift(problem, model, y, t)

        x = torch.randn(20, 3, generator=gen, dtype=DTYPE)
        rates = augmented_dynamics(problem, model, zero_state(x), t)
        fd = central_difference_divergence(drift, x)
        assert ((-rates.logp - fd).abs().max() / fd.abs().max()) < 1e-4

    def test_general_diffusion_matches_isotropic_branch(self, gauss2, gen):
        iso, solution = gauss2
        general = FPProblem(
            name="tfp-gauss-matrix", dim=2, drift=iso.drift, drift_div=iso.drift_div,
            diffusion=lambda x, t: 0.5 * torch.eye(2, dtype=DTYPE).expand(x.shape[0], 2, 2),
            p0_log=iso.p0_log, p0_sample=iso.p0_sample, horizon=1.0,
        )
        state = zero_state(torch.randn(5, 2, generator=gen, dtype=DTYPE))
        a = augmented_dynamics(iso, solution, state, 0.3)
        b = augmented_dynamics(general, solution, state, 0.3)
        assert torch.allclose(a.x, b.x, atol=1e-14)
        assert torch.allclose(a.logp, b.logp, atol=1e-12)

    def test_state_dependent_diffusion_row_divergence(self, gen):
        problem = FPProblem(
            name="multiplicative", dim=2, drift=lambda x, t: -x,
            diffusion=lambda x, t: (1.0 + x[:, :1] ** 2).unsqueeze(-1) * torch.eye(2, dtype=DTYPE),
        )
        x = torch.randn(4, 2, generator=gen, dtype=DTYPE)
        row_div = problem.row_divergence(x.clone().requires_grad_(True), torch.zeros(4, dtype=DTYPE))
        expected = torch.stack([2 * x[:, 0], torch.zeros(4, dtype=DTYPE)], dim=-1)
        assert torch.allclose(row_div, expected, atol=1e-14)

    def test_time_scaled_closure(self, toy2):
        problem, _ = toy2
        scale = torch.tensor([1.0, 2.0], dtype=DTYPE)
        f = characteristic_dynamics(problem, None, time_scale=scale)
        rates = f(0.5, zero_state(torch.zeros(2, 2, dtype=DTYPE)))
        # physical times 0.5 and 1.0, chain rule factor 1 and 2
        assert torch.equal(rates.x[:, 0], torch.tensor([1.0, 4.0], dtype=DTYPE))

    def test_transport_conserves_log_density_along_toy_characteristics(self, toy2, gen):
        problem, solution = toy2
        x0 = problem.p0_sample(32, gen)
        state = ode_solve(
            characteristic_dynamics(problem, None), AugmentedState(x0, problem.p0_log(x0)),
            0.0, 1.0, SolverConfig(method="rk4", steps=4),
        )
        assert torch.allclose(state.logp, solution(state.x, 1.0), atol=1e-12)


class TestScaleInvariance:

    def test_unit_constant(self, gauss2, gen):
        problem, _ = gauss2
        x = torch.randn(4, 2, generator=gen, dtype=DTYPE)
        assert scale_invariance_check(problem, random_tfp_model(problem, gen), 1.0, x, 0.5) == (0.0, 0.0)

    def test_random_model(self, gauss2, gen):
        problem, _ = gauss2
        x = torch.randn(16, 2, generator=gen, dtype=DTYPE)
        drift_diff, div_diff = scale_invariance_check(problem, random_tfp_model(problem, gen, 0.5), 7.5, x, 0.8)
        assert drift_diff <= 1e-12 and div_diff <= 1e-12

    def test_exact_ou_model(self, ou2, gen):
        problem, _ = ou2
        flow = exact_ou_flow(2, n_layers=2, hidden=8)
        x = torch.randn(8, 2, generator=gen, dtype=DTYPE)
        assert scale_invariance_check(problem, flow.log_density, math.e, x, 0.0) == (0.0, 0.0)

    def test_constant_must_be_positive(self, gauss2):
        problem, solution = gauss2
        with pytest.raises(ConfigurationError):
            scale_invariance_check(problem, solution, 0.0, torch.zeros(1, 2, dtype=DTYPE), 0.0)


class TestProblemRecord:

    def test_one_kind_of_diffusion(self):
        with pytest.raises(ValidationError):
            FPProblem(name="bad", dim=1, drift=lambda x, t: x, diffusion_scale=1.0,
                      diffusion=lambda x, t: torch.ones(x.shape[0], 1, 1, dtype=DTYPE))

    def test_zero_diffusion_tag(self, toy2, gauss2, ou2):
        assert toy2[0].is_zero_diffusion
        assert not gauss2[0].is_zero_diffusion
        assert ou2[0].is_steady_state and not gauss2[0].is_steady_state

    def test_diffusion_checks(self):
        skew = FPProblem(name="skew", dim=2, drift=lambda x, t: x,
                         diffusion=lambda x, t: torch.tensor([[1.0, 1.0], [0.0, 1.0]], dtype=DTYPE).expand(x.shape[0], 2, 2))
        negative = FPProblem(name="neg", dim=2, drift=lambda x, t: x,
                             diffusion=lambda x, t: -torch.eye(2, dtype=DTYPE).expand(x.shape[0], 2, 2))
        for problem in (skew, negative):
            with pytest.raises(ConfigurationError):
                problem.check_diffusion(torch.zeros(3, 2, dtype=DTYPE))
        build_problem(ProblemSpec(name="sfp-ou", dim=3))[0].check_diffusion(torch.zeros(3, 3, dtype=DTYPE))

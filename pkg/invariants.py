"""
INVARIANT SUITE
Machine checks behind the `check` command. Each check returns a measured
value and the threshold it must stay under.
"""

import logging
import math
from typing import Callable

import torch
from pydantic import BaseModel
from scipy import integrate

from bench import ProblemSpec, build_problem, fp_log_residual
from diffengine import (
    DTYPE,
    central_difference_gradient,
    divergence,
    gradient,
    hessian_trace,
    input_gradient,
)
from fpcore import AugmentedState, effective_drift, scale_invariance_check
from networks import CouplingFlow, LogDensityTFP, PotentialNet
from odesolve import SolverConfig, ode_solve
from training import TrainConfig, train_tfp

logger = logging.getLogger(__name__)


class CheckResult(BaseModel):
    name: str
    value: float
    threshold: float
    higher_is_better: bool = False

    @property
    def passed(self) -> bool:
        if math.isnan(self.value):
            return False
        return self.value >= self.threshold if self.higher_is_better else self.value < self.threshold


def _rel(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).abs().max() / b.abs().max().clamp_min(1e-300))


def check_gradient_fd(seed: int) -> CheckResult:
    """Exact input and parameter gradients against central differences."""
    gen = torch.Generator().manual_seed(seed)
    net = PotentialNet(3, width=8, n_layers=2, init_scale=0.5, generator=gen)
    s = torch.randn(4, generator=gen, dtype=DTYPE)

    exact_x = _single_input_gradient(net, s)
    fd_x = central_difference_gradient(lambda y: net(y.unsqueeze(0))[0], s)

    w = net.variables["w"]
    exact_w = gradient(net(s.unsqueeze(0))[0], net.variables, ["w"])

    def with_w(value: torch.Tensor) -> torch.Tensor:
        saved = w.detach().clone()
        w.data.copy_(value)
        out = net(s.unsqueeze(0))[0]
        w.data.copy_(saved)
        return out

    fd_w = central_difference_gradient(with_w, w.detach())
    return CheckResult(name="gradient vs finite difference", value=max(_rel(exact_x, fd_x), _rel(exact_w, fd_w)), threshold=1e-5)


def _single_input_gradient(net: PotentialNet, s: torch.Tensor) -> torch.Tensor:
    xs = s.detach().clone().unsqueeze(0).requires_grad_(True)
    return input_gradient(net(xs), xs, create_graph=False)[0]


def check_laplacian_consistency(seed: int) -> CheckResult:
    """Hessian trace against the divergence of the input gradient."""
    gen = torch.Generator().manual_seed(seed)
    net = PotentialNet(3, width=8, n_layers=2, init_scale=0.5, generator=gen)
    x = torch.randn(16, 4, generator=gen, dtype=DTYPE)

    def grad_field(y: torch.Tensor) -> torch.Tensor:
        return input_gradient(net(y), y, create_graph=True)

    lap = hessian_trace(net, x)
    div = divergence(grad_field, x)
    return CheckResult(name="divergence / hessian trace", value=_rel(lap, div), threshold=1e-10)


def check_flow_round_trip(seed: int) -> CheckResult:
    gen = torch.Generator().manual_seed(seed)
    flow = CouplingFlow(5, n_layers=4, hidden=8, init_scale=0.3, generator=gen)
    z = torch.randn(64, 5, generator=gen, dtype=DTYPE)
    with torch.no_grad():
        # move off the identity initialization
        for p in flow.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=DTYPE))
        x, logp_x = flow(z, flow.base_log_prob(z))
        z_back, logp_back = flow.inverse(x)
    err = max(float((z_back - z).abs().max()), float((logp_back - logp_x).abs().max()))
    return CheckResult(name="flow round trip", value=err, threshold=1e-10)


def check_initial_constraint(seed: int) -> CheckResult:
    problem, _ = build_problem(ProblemSpec(name="tfp-gauss", dim=3))
    gen = torch.Generator().manual_seed(seed)
    model = LogDensityTFP(problem.p0_log, PotentialNet(3, init_scale=0.5, generator=gen))
    x = torch.randn(32, 3, generator=gen, dtype=DTYPE)
    with torch.no_grad():
        err = float((model(x, 0.0) - problem.p0_log(x)).abs().max())
    # exact equality; any nonzero gap fails
    return CheckResult(name="hard initial constraint", value=err, threshold=1e-300)


def check_pde_residuals(seed: int) -> CheckResult:
    """Every analytic solution satisfies its Fokker-Planck equation."""
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for name in ("toy", "tfp-gauss", "sfp-ou"):
        problem, solution = build_problem(ProblemSpec(name=name, dim=3))
        x = 2.0 * torch.randn(100, 3, generator=gen, dtype=DTYPE)
        t = torch.rand(100, generator=gen, dtype=DTYPE)
        worst = max(worst, float(fp_log_residual(problem, solution, x, t).abs().max()))
    return CheckResult(name="analytic solutions satisfy their PDEs", value=worst, threshold=1e-6)


def check_steady_fixed_point(seed: int) -> CheckResult:
    problem, solution = build_problem(ProblemSpec(name="sfp-ou", dim=4, a=1.5, sigma=0.8))
    x = torch.randn(50, 4, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)
    mu_star = effective_drift(problem, solution, x, 0.0)
    return CheckResult(name="steady solution is a fixed point", value=float(mu_star.abs().max()), threshold=1e-10)


def check_normalization(seed: int) -> CheckResult:
    """1-d analytic densities integrate to one."""
    worst = 0.0
    for name, times in (("toy", (0.0, 0.5, 1.0)), ("tfp-gauss", (0.0, 0.5, 1.0)), ("sfp-ou", (0.0,))):
        _, solution = build_problem(ProblemSpec(name=name, dim=1))
        for t in times:
            mass, _ = integrate.quad(lambda v: float(solution.density([[v]], t)[0]), -20.0, 20.0,
                                     epsabs=1e-12, epsrel=1e-12, limit=200)
            worst = max(worst, abs(mass - 1.0))
    return CheckResult(name="analytic densities are normalized", value=worst, threshold=1e-8)


def check_shift_invariance(seed: int) -> CheckResult:
    """Adding log c to the model leaves the augmented dynamics unchanged."""
    problem, _ = build_problem(ProblemSpec(name="tfp-gauss", dim=3))
    gen = torch.Generator().manual_seed(seed)
    model = LogDensityTFP(problem.p0_log, PotentialNet(3, init_scale=0.3, generator=gen))
    x = torch.randn(16, 3, generator=gen, dtype=DTYPE)
    drift_diff, div_diff = scale_invariance_check(problem, model, 7.5, x, 0.6)
    return CheckResult(name="shift invariance of augmented dynamics", value=max(drift_diff, div_diff), threshold=1e-12)


def rk4_observed_order(steps: tuple[int, ...] = (20, 40, 80)) -> float:
    """Order of rk4 on dx/dt = cos(t) x, dlogp/dt = -cos(t), solved exactly."""
    def dynamics(t: float, state: AugmentedState) -> AugmentedState:
        c = math.cos(t)
        return AugmentedState(c * state.x, torch.full_like(state.logp, -c))

    t1 = 2.0
    state0 = AugmentedState(torch.ones(1, 1, dtype=DTYPE), torch.zeros(1, dtype=DTYPE))
    exact = math.exp(math.sin(t1))
    errors = []
    for n in steps:
        out = ode_solve(dynamics, state0, 0.0, t1, SolverConfig(method="rk4", steps=n))
        errors.append(abs(float(out.x[0, 0]) - exact))
    orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    return min(orders)


def check_rk4_order(seed: int) -> CheckResult:
    return CheckResult(name="rk4 observed order", value=rk4_observed_order(), threshold=3.9, higher_is_better=True)


def check_training_determinism(seed: int) -> CheckResult:
    """Two identically seeded runs give bit-identical loss traces."""
    problem, _ = build_problem(ProblemSpec(name="tfp-gauss", dim=2))
    cfg = TrainConfig(iterations=3, lr=0.01, batch=16, seed=seed)
    solver = SolverConfig(method="rk4", steps=4)
    traces = []
    for _ in range(2):
        gen = torch.Generator().manual_seed(seed)
        model = LogDensityTFP(problem.p0_log, PotentialNet(2, width=8, n_layers=2, generator=gen))
        traces.append(train_tfp(problem, model, cfg, solver).losses)
    mismatches = sum(a != b for a, b in zip(*traces)) + abs(len(traces[0]) - len(traces[1]))
    return CheckResult(name="seeded training determinism", value=float(mismatches), threshold=0.5)


CHECKS: tuple[Callable[[int], CheckResult], ...] = (
    check_gradient_fd,
    check_laplacian_consistency,
    check_flow_round_trip,
    check_initial_constraint,
    check_pde_residuals,
    check_steady_fixed_point,
    check_normalization,
    check_shift_invariance,
    check_rk4_order,
    check_training_determinism,
)


def run_checks(seed: int = 0) -> list[CheckResult]:
    results = []
    for check in CHECKS:
        result = check(seed)
        mark = "✅" if result.passed else "❌"
        logger.info("%s %s: %.3e (threshold %.1e)", mark, result.name, result.value, result.threshold)
        results.append(result)
    return results

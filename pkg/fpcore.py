"""
FOKKER-PLANCK CORE
Problem records, the effective drift mu* = mu - (grad log p) D - div D and the
augmented characteristic dynamics on (x, log p).

Convention: (grad log p) D is a row vector times a matrix, so component j is
sum_i (d_i log p) D_ij. This keeps non-symmetric user diffusions well defined.
"""

import logging
import math
from typing import Callable, NamedTuple, Optional, Union

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import Tensor

from diffengine import DTYPE, input_gradient, jacobian_trace, trace_of_jacobian, track
from errors import ConfigurationError, NumericFailureError, ShapeError
from networks import LogDensity, as_time

logger = logging.getLogger(__name__)

SpaceTimeField = Callable[[Tensor, Tensor], Tensor]
Dynamics = Callable[[float, "AugmentedState"], "AugmentedState"]


class AugmentedState(NamedTuple):
    x: Tensor      # (B, d)
    logp: Tensor   # (B,)


def check_finite(state: AugmentedState, time: Optional[float] = None) -> None:
    bad = ~(torch.isfinite(state.x).all(dim=-1) & torch.isfinite(state.logp))
    if bad.any():
        index = int(torch.nonzero(bad)[0, 0])
        raise NumericFailureError("non-finite augmented state", time=time, index=index)


# ============================================================================
# PROBLEM DEFINITION
# ============================================================================

class FPProblem(BaseModel):
    """One Fokker-Planck equation instance.

    Diffusion is either absent (Liouville transport), a constant isotropic
    `diffusion_scale * I`, or a general callable returning (B, d, d).
    Steady-state problems carry no initial density.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str
    dim: int = Field(ge=1)
    drift: SpaceTimeField
    drift_div: Optional[SpaceTimeField] = None
    diffusion_scale: Optional[float] = Field(default=None, ge=0.0)
    diffusion: Optional[SpaceTimeField] = None
    diffusion_row_div: Optional[SpaceTimeField] = None
    p0_log: Optional[Callable[[Tensor], Tensor]] = None
    p0_sample: Optional[Callable[[int, torch.Generator], Tensor]] = None
    horizon: Optional[float] = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _one_diffusion(self) -> "FPProblem":
        if self.diffusion_scale is not None and self.diffusion is not None:
            raise ValueError("give either diffusion_scale or diffusion, not both")
        if self.p0_sample is not None and self.p0_log is None:
            raise ValueError("an initial sampler needs an initial log-density")
        return self

    @property
    def is_zero_diffusion(self) -> bool:
        return self.diffusion is None and not self.diffusion_scale

    @property
    def is_steady_state(self) -> bool:
        return self.p0_log is None

    def diffusion_matrix(self, x: Tensor, t: Tensor) -> Tensor:
        batch = x.shape[0]
        if self.diffusion is not None:
            D = self.diffusion(x, t)
            if D.shape != (batch, self.dim, self.dim):
                raise ShapeError(f"diffusion returned {tuple(D.shape)}, expected ({batch}, {self.dim}, {self.dim})")
            return D
        scale = self.diffusion_scale or 0.0
        return scale * torch.eye(self.dim, dtype=DTYPE).expand(batch, self.dim, self.dim)

    def row_divergence(self, x: Tensor, t: Tensor) -> Tensor:
        """(div D)_j = sum_i dD_ij/dx_i; zero for constant diffusion."""
        if self.diffusion_row_div is not None:
            return self.diffusion_row_div(x, t)
        if self.diffusion is None:
            return torch.zeros_like(x)
        xs = track(x)
        D = self.diffusion(xs, t)
        cols = [trace_of_jacobian(D[:, :, j], xs, create_graph=True) for j in range(self.dim)]
        return torch.stack(cols, dim=-1)

    def check_diffusion(self, x: Tensor, t: Union[Tensor, float] = 0.0, tol: float = 1e-12) -> None:
        """Raise unless D is symmetric positive semidefinite at the given points."""
        if self.diffusion is None:
            return
        with torch.no_grad():
            D = self.diffusion_matrix(x, as_time(t, x.shape[0]))
            if (D - D.transpose(1, 2)).abs().max() > tol:
                raise ConfigurationError(f"diffusion of '{self.name}' is not symmetric")
            if torch.linalg.eigvalsh(D).min() < -tol:
                raise ConfigurationError(f"diffusion of '{self.name}' is not positive semidefinite")


# ============================================================================
# EFFECTIVE DRIFT AND AUGMENTED DYNAMICS
# ============================================================================

def _apply_diffusion(problem: FPProblem, grad: Tensor, x: Tensor, t: Tensor) -> Tensor:
    if problem.diffusion is None:
        return (problem.diffusion_scale or 0.0) * grad
    return torch.einsum("bi,bij->bj", grad, problem.diffusion_matrix(x, t))


def _batched(x: Tensor, dim: int) -> tuple[Tensor, bool]:
    single = x.dim() == 1
    xb = x.unsqueeze(0) if single else x
    if xb.dim() != 2 or xb.shape[1] != dim:
        raise ShapeError(f"point has shape {tuple(x.shape)}, problem dimension is {dim}")
    return xb, single


def effective_drift(
    problem: FPProblem,
    logp_model: Optional[LogDensity],
    x: Tensor,
    t: Union[Tensor, float],
    *,
    create_graph: bool = False,
) -> Tensor:
    xb, single = _batched(x, problem.dim)
    tb = as_time(t, xb.shape[0])
    xs = track(xb)
    mu = problem.drift(xs, tb)
    if problem.is_zero_diffusion:
        out = mu
    else:
        if logp_model is None:
            raise ConfigurationError(f"problem '{problem.name}' has diffusion; a log-density model is required")
        grad = input_gradient(logp_model(xs, tb), xs, create_graph=True)
        out = mu - _apply_diffusion(problem, grad, xs, tb) - problem.row_divergence(xs, tb)
    if not create_graph:
        out = out.detach()
    return out[0] if single else out


def augmented_dynamics(
    problem: FPProblem,
    logp_model: Optional[LogDensity],
    state: AugmentedState,
    t: Union[Tensor, float],
    *,
    create_graph: bool = False,
    estimator: str = "exact",
    probes: int = 1,
    generator: Optional[torch.Generator] = None,
) -> AugmentedState:
    """(dx/dt, dlogp/dt) = (mu*, -div mu*) with the model parameters held fixed."""
    xb, single = _batched(state.x, problem.dim)
    tb = as_time(t, xb.shape[0])
    x = track(xb)
    trace = dict(create_graph=create_graph, estimator=estimator, probes=probes, generator=generator)

    mu = problem.drift(x, tb)
    if problem.drift_div is not None:
        div_mu = problem.drift_div(x, tb)
    else:
        div_mu = jacobian_trace(mu, x, create_graph=create_graph)

    if problem.is_zero_diffusion:
        dx, dlogp = mu, -div_mu
    elif logp_model is None:
        raise ConfigurationError(f"problem '{problem.name}' has diffusion; a log-density model is required")
    elif problem.diffusion is None:
        # constant isotropic D: div mu* = div mu - scale * laplacian(log p)
        scale = problem.diffusion_scale
        grad = input_gradient(logp_model(x, tb), x, create_graph=True)
        dx = mu - scale * grad
        dlogp = -div_mu + scale * jacobian_trace(grad, x, **trace)
    else:
        grad = input_gradient(logp_model(x, tb), x, create_graph=True)
        dx = mu - _apply_diffusion(problem, grad, x, tb) - problem.row_divergence(x, tb)
        dlogp = -jacobian_trace(dx, x, **trace)

    dlogp = dlogp.expand(xb.shape[0]) if dlogp.dim() == 0 else dlogp
    if not create_graph:
        dx, dlogp = dx.detach(), dlogp.detach()
    if single:
        return AugmentedState(dx[0], dlogp[0])
    return AugmentedState(dx, dlogp)


def characteristic_dynamics(
    problem: FPProblem,
    logp_model: Optional[LogDensity],
    *,
    create_graph: bool = False,
    estimator: str = "exact",
    probes: int = 1,
    generator: Optional[torch.Generator] = None,
    time_scale: Optional[Tensor] = None,
) -> Dynamics:
    """Closure f(t, state) for the ODE solvers.

    With `time_scale` (B,) the closure runs on normalized time tau in [0, 1]:
    sample b sits at physical time tau * time_scale[b] and its derivatives are
    multiplied by time_scale[b], so one shared grid serves different end times.
    """

    def f(t: float, state: AugmentedState) -> AugmentedState:
        if time_scale is None:
            return augmented_dynamics(
                problem, logp_model, state, t,
                create_graph=create_graph, estimator=estimator, probes=probes, generator=generator,
            )
        rates = augmented_dynamics(
            problem, logp_model, state, t * time_scale,
            create_graph=create_graph, estimator=estimator, probes=probes, generator=generator,
        )
        return AugmentedState(rates.x * time_scale.unsqueeze(-1), rates.logp * time_scale)

    return f


def scale_invariance_check(
    problem: FPProblem,
    logp_model: LogDensity,
    c: float,
    x: Tensor,
    t: Union[Tensor, float],
) -> tuple[float, float]:
    """Max-norm differences of mu* and div mu* between log p and log p + log c."""
    if not c > 0:
        raise ConfigurationError("scale constant must be positive")
    shift = math.log(c)

    def shifted(y: Tensor, s: Union[Tensor, float]) -> Tensor:
        return logp_model(y, s) + shift

    xb, _ = _batched(x, problem.dim)
    state = AugmentedState(xb, torch.zeros(xb.shape[0], dtype=DTYPE))
    base = augmented_dynamics(problem, logp_model, state, t)
    moved = augmented_dynamics(problem, shifted, state, t)
    drift_diff = (effective_drift(problem, logp_model, xb, t) - effective_drift(problem, shifted, xb, t)).abs().max()
    drift_diff = torch.maximum(drift_diff, (base.x - moved.x).abs().max())
    div_diff = (base.logp - moved.logp).abs().max()
    return float(drift_diff), float(div_diff)

"""
SELF-SUPERVISED TRAINING
Sample points, transport them along characteristics, and pull the network's
direct log-density prediction towards the transported value.

    loss = mean_b (log p_ode(x_b) - phi_theta(x_b, t_b))^2

The ODE target depends on theta through the effective drift, so gradients
flow through the whole fixed-step solve unless `detach_ode_target` is set.
A batch is processed `micro_batch` rows at a time and the weighted chunk
gradients are summed, so at most one chunk's graph is alive.
"""

import logging
import math
import time
from pathlib import Path
from typing import Optional, Union

import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor

from diffengine import DTYPE, VariableSet, gradients
from errors import ConfigurationError, NumericFailureError, SolverDivergenceError, TrainingAbortedError
from fpcore import AugmentedState, FPProblem, characteristic_dynamics
from networks import CouplingFlow, LogDensityTFP, save_checkpoint
from odesolve import SolverConfig, ode_solve_with_grad

logger = logging.getLogger(__name__)


# ============================================================================
# CONFIG + TRACE
# ============================================================================

class TrainConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    iterations: int = Field(default=1000, ge=0)
    learning_rate: float = Field(default=0.01, gt=0.0, alias="lr")
    batch_size: int = Field(default=2000, ge=1, alias="batch")
    micro_batch: Optional[int] = Field(default=100, ge=1, alias="micro-batch")
    horizon: Optional[float] = Field(default=None, gt=0.0)
    seed: int = 0
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    detach_ode_target: bool = Field(default=False, alias="detach-ode-target")
    per_sample_times: bool = Field(default=False, alias="per-sample-times")
    sfp_horizon: float = Field(default=1.0, gt=0.0, alias="sfp-horizon")
    max_consecutive_failures: int = Field(default=5, ge=1, alias="max-failures")
    checkpoint_every: Optional[int] = Field(default=None, ge=1, alias="checkpoint-every")
    checkpoint_dir: Optional[Path] = None
    log_every: int = Field(default=100, ge=1, alias="log-every")


class TrainTrace(BaseModel):
    iterations: list[int] = Field(default_factory=list)
    losses: list[float] = Field(default_factory=list)
    seconds: list[float] = Field(default_factory=list)
    skipped: list[int] = Field(default_factory=list)
    checkpoint: Optional[Path] = None

    def record(self, iteration: int, loss: float, seconds: float) -> None:
        if not math.isfinite(loss) or loss < 0:
            raise NumericFailureError(f"invalid loss {loss}", index=iteration)
        self.iterations.append(iteration)
        self.losses.append(loss)
        self.seconds.append(seconds)

    @property
    def initial_loss(self) -> Optional[float]:
        return self.losses[0] if self.losses else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None

    def smoothed(self, window: int = 50) -> list[float]:
        """Trailing moving average of the loss."""
        if not self.losses:
            return []
        return pd.Series(self.losses).rolling(window, min_periods=1).mean().tolist()

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Columns: iteration, loss, seconds."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame({"iteration": self.iterations, "loss": self.losses, "seconds": self.seconds})
        frame.to_csv(path, index=False, float_format="%.17g")
        return path


# ============================================================================
# ADAM
# ============================================================================

class AdamState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int = 0
    m: dict[str, Tensor] = Field(default_factory=dict)
    v: dict[str, Tensor] = Field(default_factory=dict)


@torch.no_grad()
def adam_step(
    params: Union[VariableSet, dict[str, Tensor]],
    grads: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to `params` in place.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    named = list(params) if isinstance(params, VariableSet) else list(params.items())
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericFailureError("non-finite gradient", parameter=name)
    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step
    for name, p in named:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient of '{name}' has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = torch.zeros_like(p) if m is None else m
        v = torch.zeros_like(p) if v is None else v
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.sub_(lr * (m / bias1) / ((v / bias2).sqrt() + eps))
    return state


# ============================================================================
# LOOPS
# ============================================================================

def _fixed_step(solver: SolverConfig) -> SolverConfig:
    if solver.method == "rk4":
        return solver
    logger.debug("training integrates with rk4 (%d steps) instead of %s", solver.steps, solver.method)
    return solver.model_copy(update={"method": "rk4"})


def _checkpoint(model, cfg: TrainConfig, name: str, iteration: int) -> Optional[Path]:
    if cfg.checkpoint_dir is None:
        return None
    return save_checkpoint(model, Path(cfg.checkpoint_dir) / name, extra={"iteration": iteration, "seed": cfg.seed})


def micro_batches(batch_size: int, micro_batch: Optional[int]) -> list[slice]:
    """Consecutive row ranges covering the batch, in a fixed order."""
    size = micro_batch or batch_size
    return [slice(lo, min(lo + size, batch_size)) for lo in range(0, batch_size, size)]


def _accumulate(variables: VariableSet, cfg: TrainConfig, batch, chunk_loss) -> tuple[float, dict[str, Tensor]]:
    """Full-batch loss and gradient, one micro-batch graph alive at a time.

    Each chunk's mean loss is weighted by its share of the batch, so the sum
    equals the full-batch mean. A non-finite chunk loss stops early with NaN.
    """
    total = 0.0
    grads: dict[str, Tensor] = {}
    for rows in micro_batches(cfg.batch_size, cfg.micro_batch):
        loss = chunk_loss(batch, rows) * ((rows.stop - rows.start) / cfg.batch_size)
        if not torch.isfinite(loss):
            return math.nan, {}
        part = gradients(loss, variables, retain_graph=False)
        total += float(loss.detach())
        grads = part if not grads else {name: grads[name] + g for name, g in part.items()}
        del loss, part
    return total, grads


def _run(model, cfg: TrainConfig, sample, chunk_loss) -> TrainTrace:
    """Shared loop: sample a batch, accumulate exact gradients over its
    micro-batches, Adam, failure bookkeeping.

    `sample()` draws everything random for one iteration; `chunk_loss(batch,
    rows)` is the mean loss over `rows` of that batch.
    """
    trace = TrainTrace()
    if cfg.iterations == 0:
        return trace
    variables = model.variables
    adam = AdamState()
    failures = 0

    for it in range(1, cfg.iterations + 1):
        started = time.perf_counter()
        try:
            loss, grads = _accumulate(variables, cfg, sample(), chunk_loss)
        except (SolverDivergenceError, NumericFailureError) as exc:
            failures += 1
            trace.skipped.append(it)
            logger.warning("⚠️ iteration %d skipped: %s", it, exc)
            if failures >= cfg.max_consecutive_failures:
                raise TrainingAbortedError(
                    f"{failures} consecutive failed batches, last at iteration {it}: {exc}"
                ) from exc
            continue
        failures = 0
        if not math.isfinite(loss):
            raise NumericFailureError("non-finite training loss", index=it)
        adam_step(variables, grads, adam, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        trace.record(it, loss, time.perf_counter() - started)
        del grads

        if it % cfg.log_every == 0 or it == 1:
            logger.info("iteration %d/%d loss %.4e", it, cfg.iterations, trace.final_loss)
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0 and it != cfg.iterations:
            _checkpoint(model, cfg, f"checkpoint_{it:06d}.pt", it)

    if not trace.losses:
        raise TrainingAbortedError("no iteration produced a usable batch")
    trace.checkpoint = _checkpoint(model, cfg, "checkpoint.pt", cfg.iterations)
    return trace


def train_tfp(problem: FPProblem, model: LogDensityTFP, cfg: TrainConfig, solver: SolverConfig) -> TrainTrace:
    """Time-dependent training on [0, T].

    Each iteration draws x0 ~ p0 and one time t_k ~ U[0, T] shared by the batch
    (or one time per sample with `per_sample_times`), solves the augmented
    dynamics 0 -> t_k from (x0, log p0(x0)) and regresses phi(x_k, t_k) onto
    the transported log-density.
    """
    if problem.is_steady_state or problem.p0_sample is None:
        raise ConfigurationError(f"problem '{problem.name}' has no initial density to train from")
    if model.dim != problem.dim:
        raise ConfigurationError(f"model dimension {model.dim} does not match problem dimension {problem.dim}")
    horizon = cfg.horizon or problem.horizon
    if horizon is None:
        raise ConfigurationError("time-dependent training needs a horizon")
    solver = _fixed_step(solver)
    generator = torch.Generator().manual_seed(cfg.seed)
    full_graph = not cfg.detach_ode_target

    check = torch.Generator().manual_seed(cfg.seed)
    problem.check_diffusion(problem.p0_sample(64, check), horizon * torch.rand(64, generator=check, dtype=DTYPE))

    def sample() -> tuple[Tensor, Tensor, Union[Tensor, float], SolverConfig]:
        x0 = problem.p0_sample(cfg.batch_size, generator)
        logp0 = problem.p0_log(x0).detach()
        if cfg.per_sample_times:
            return x0, logp0, horizon * torch.rand(cfg.batch_size, generator=generator, dtype=DTYPE), solver
        t_k = horizon * float(torch.rand((), generator=generator, dtype=DTYPE))
        # steps scale with the interval: `solver.steps` over the whole horizon
        steps = solver.model_copy(update={"steps": max(1, math.ceil(solver.steps * t_k / horizon))})
        return x0, logp0, t_k, steps

    def chunk_loss(batch, rows: slice) -> Tensor:
        x0, logp0, times, steps = batch
        if cfg.per_sample_times:
            at = times[rows]
            t0, t1 = 0.0, 1.0
        else:
            at = times
            t0, t1 = 0.0, times
        dynamics = characteristic_dynamics(
            problem, model, create_graph=full_graph, estimator=solver.trace, probes=solver.probes,
            generator=generator, time_scale=at if cfg.per_sample_times else None,
        )
        state, _ = ode_solve_with_grad(dynamics, AugmentedState(x0[rows], logp0[rows]), t0, t1, steps, model.variables)
        x, target = state.x, state.logp
        if not full_graph:
            x, target = x.detach(), target.detach()
        return (target - model(x, at)).pow(2).mean()

    logger.info(
        "training '%s' d=%d for %d iterations (batch %d in chunks of %s, lr %g, T=%g)",
        problem.name, problem.dim, cfg.iterations, cfg.batch_size, cfg.micro_batch or cfg.batch_size,
        cfg.learning_rate, horizon,
    )
    return _run(model, cfg, sample, chunk_loss)


def train_sfp(problem: FPProblem, flow: CouplingFlow, cfg: TrainConfig, solver: SolverConfig) -> TrainTrace:
    """Steady-state training of a coupling flow.

    z ~ N(0, I) is pushed through the flow to (x0, log p(x0)), transported
    over [0, sfp_horizon] with the flow's own density in the effective drift,
    and compared against the flow's inverse density at the end point.
    """
    if not problem.is_steady_state:
        raise ConfigurationError(f"problem '{problem.name}' is time-dependent; use train_tfp")
    if flow.dim != problem.dim:
        raise ConfigurationError(f"flow dimension {flow.dim} does not match problem dimension {problem.dim}")
    solver = _fixed_step(solver)
    generator = torch.Generator().manual_seed(cfg.seed)
    full_graph = not cfg.detach_ode_target
    dynamics = characteristic_dynamics(
        problem, flow.log_density, create_graph=full_graph, estimator=solver.trace,
        probes=solver.probes, generator=generator,
    )

    check = torch.Generator().manual_seed(cfg.seed)
    problem.check_diffusion(3.0 * torch.randn(64, problem.dim, generator=check, dtype=DTYPE))

    def sample() -> Tensor:
        return torch.randn(cfg.batch_size, problem.dim, generator=generator, dtype=DTYPE)

    def chunk_loss(z: Tensor, rows: slice) -> Tensor:
        z = z[rows]
        x0, logp0 = flow(z, flow.base_log_prob(z))
        if not full_graph:
            x0, logp0 = x0.detach(), logp0.detach()
        state, _ = ode_solve_with_grad(
            dynamics, AugmentedState(x0, logp0), 0.0, cfg.sfp_horizon, solver, flow.variables
        )
        x, target = state.x, state.logp
        if not full_graph:
            x, target = x.detach(), target.detach()
        return (target - flow.log_density(x)).pow(2).mean()

    logger.info(
        "training flow for '%s' d=%d for %d iterations (batch %d in chunks of %s, lr %g, %d layers)",
        problem.name, problem.dim, cfg.iterations, cfg.batch_size, cfg.micro_batch or cfg.batch_size,
        cfg.learning_rate, flow.n_layers,
    )
    return _run(flow, cfg, sample, chunk_loss)

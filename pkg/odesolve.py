"""
ODE INTEGRATION
Fixed-step RK4 (differentiable, used for training) and adaptive
Dormand-Prince 5(4) (used for prediction) over augmented states.
Both integrate forward or backward in time.
"""

import logging
from typing import Callable, Literal, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor

from diffengine import VariableSet, gradient
from errors import ConfigurationError, NumericFailureError, SolverDivergenceError
from fpcore import AugmentedState, Dynamics, check_finite

logger = logging.getLogger(__name__)


class SolverConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    method: Literal["rk4", "dopri5"] = "rk4"
    steps: int = Field(default=20, ge=1)
    rtol: float = Field(default=1e-6, gt=0.0)
    atol: float = Field(default=1e-8, gt=0.0)
    max_steps: int = Field(default=10_000, ge=1)
    trace: Literal["exact", "hutchinson"] = "exact"
    probes: int = Field(default=1, ge=1)


def _axpy(state: AugmentedState, h: float, *rates: tuple[float, AugmentedState]) -> AugmentedState:
    x, logp = state.x, state.logp
    for coeff, k in rates:
        if coeff == 0.0:
            continue
        x = x + (h * coeff) * k.x
        logp = logp + (h * coeff) * k.logp
    return AugmentedState(x, logp)


# ============================================================================
# FIXED STEP
# ============================================================================

def _rk4(dynamics: Dynamics, state: AugmentedState, t0: float, t1: float, steps: int) -> AugmentedState:
    h = (t1 - t0) / steps
    for n in range(steps):
        t = t0 + n * h
        k1 = dynamics(t, state)
        k2 = dynamics(t + 0.5 * h, _axpy(state, h, (0.5, k1)))
        k3 = dynamics(t + 0.5 * h, _axpy(state, h, (0.5, k2)))
        k4 = dynamics(t + h, _axpy(state, h, (1.0, k3)))
        state = _axpy(state, h, (1 / 6, k1), (1 / 3, k2), (1 / 3, k3), (1 / 6, k4))
        check_finite(state, time=t + h)
    return state


# ============================================================================
# ADAPTIVE DORMAND-PRINCE
# ============================================================================

_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


def _error_ratio(err: AugmentedState, y0: AugmentedState, y1: AugmentedState, rtol: float, atol: float) -> float:
    """max over components of |err| / (atol + rtol * max(|y0|, |y1|))"""
    ratio_x = err.x.abs() / (atol + rtol * torch.maximum(y0.x.abs(), y1.x.abs()))
    ratio_l = err.logp.abs() / (atol + rtol * torch.maximum(y0.logp.abs(), y1.logp.abs()))
    return float(torch.maximum(ratio_x.max(), ratio_l.max()))


def _initial_step(dynamics: Dynamics, state: AugmentedState, t0: float, direction: float,
                  k0: AugmentedState, rtol: float, atol: float) -> float:
    scale_x = atol + rtol * state.x.abs()
    scale_l = atol + rtol * state.logp.abs()
    d0 = max(float((state.x / scale_x).abs().max()), float((state.logp / scale_l).abs().max()))
    d1 = max(float((k0.x / scale_x).abs().max()), float((k0.logp / scale_l).abs().max()))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    probe = dynamics(t0 + direction * h0, _axpy(state, direction * h0, (1.0, k0)))
    d2 = max(
        float(((probe.x - k0.x) / scale_x).abs().max()),
        float(((probe.logp - k0.logp) / scale_l).abs().max()),
    ) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def _dopri5(dynamics: Dynamics, state: AugmentedState, t0: float, t1: float, cfg: SolverConfig) -> AugmentedState:
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t = t0
    k_first = dynamics(t, state)
    h = min(_initial_step(dynamics, state, t0, direction, k_first, cfg.rtol, cfg.atol), span)
    accepted = rejected = 0

    while direction * (t1 - t) > 0:
        if accepted + rejected >= cfg.max_steps:
            raise SolverDivergenceError(f"dopri5 exceeded {cfg.max_steps} steps", last_good_time=t)
        h = min(h, abs(t1 - t))
        hs = direction * h
        ks = [k_first]
        for stage in range(1, 7):
            y_stage = _axpy(state, hs, *zip(_A[stage], ks))
            ks.append(dynamics(t + _C[stage] * hs, y_stage))
        y_new = _axpy(state, hs, *zip(_B5, ks))
        err = AugmentedState(
            hs * sum(e * k.x for e, k in zip(_E, ks) if e != 0.0),
            hs * sum(e * k.logp for e, k in zip(_E, ks) if e != 0.0),
        )
        ratio = _error_ratio(err, state, y_new, cfg.rtol, cfg.atol)
        if ratio != ratio:
            raise NumericFailureError("non-finite error estimate in adaptive solve", time=t)

        if ratio <= 1.0:
            t = t1 if abs(t1 - (t + hs)) <= 1e-14 * max(1.0, abs(t1)) else t + hs
            state = y_new
            check_finite(state, time=t)
            k_first = ks[-1]
            accepted += 1
            factor = _MAX_FACTOR if ratio == 0.0 else min(_MAX_FACTOR, _SAFETY * ratio ** (-1 / 5))
        else:
            rejected += 1
            logger.debug("dopri5 rejected step h=%.3g at t=%.6g (ratio %.3g)", h, t, ratio)
            factor = max(_MIN_FACTOR, _SAFETY * ratio ** (-1 / 5))
        h = h * factor

    logger.debug("dopri5 finished: %d accepted, %d rejected", accepted, rejected)
    return state


# ============================================================================
# PUBLIC ENTRY POINTS
# ============================================================================

def ode_solve(dynamics: Dynamics, state0: AugmentedState, t0: float, t1: float, cfg: SolverConfig) -> AugmentedState:
    """State at t1. RK4 keeps the autograd graph; dopri5 is for prediction."""
    check_finite(state0, time=t0)
    if t0 == t1:
        return state0
    if cfg.method == "rk4":
        return _rk4(dynamics, state0, t0, t1, cfg.steps)
    if cfg.method == "dopri5":
        return _dopri5(dynamics, state0, t0, t1, cfg)
    raise ConfigurationError(f"unknown solver method '{cfg.method}'")


class GradientHandle:
    """Answers parameter-gradient queries about the final state of a solve."""

    def __init__(self, state: AugmentedState, variables: VariableSet):
        self.state = state
        self.variables = variables

    def grad(self, objective: Callable[[AugmentedState], Tensor], names: Optional[list[str]] = None) -> Tensor:
        return gradient(objective(self.state), self.variables, names)


def ode_solve_with_grad(
    dynamics: Dynamics,
    state0: AugmentedState,
    t0: float,
    t1: float,
    cfg: SolverConfig,
    variables: VariableSet,
) -> tuple[AugmentedState, GradientHandle]:
    if cfg.method != "rk4":
        raise ConfigurationError("gradients flow only through the fixed-step rk4 solver")
    state = ode_solve(dynamics, state0, t0, t1, cfg)
    return state, GradientHandle(state, variables)

"""
GRID EVALUATION + REPORTS
Test grids, density predictions (direct network and ODE transport back to
t = 0), error rows against analytic solutions, and the CSV + metadata files.
"""

import hashlib
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Optional, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import Tensor

from diffengine import DTYPE
from errors import ConfigurationError, NumericFailureError, SolverDivergenceError
from fpcore import AugmentedState, FPProblem, characteristic_dynamics
from networks import LogDensity, as_log_density
from odesolve import SolverConfig, ode_solve

logger = logging.getLogger(__name__)

# exact densities below this are left out of relative-error aggregates
DENSITY_FLOOR = 1e-300


# ============================================================================
# GRIDS
# ============================================================================

class GridSpec(BaseModel):
    """Uniform grid over the leading coordinates; the rest held fixed."""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    lows: list[float] = Field(default_factory=lambda: [-5.0])
    highs: list[float] = Field(default_factory=lambda: [5.0])
    counts: list[int] = Field(default_factory=lambda: [1000])
    fixed: Optional[list[float]] = None
    fill: float = 0.0
    time: float = Field(default=1.0, ge=0.0, alias="t")

    @model_validator(mode="after")
    def _axes_agree(self) -> "GridSpec":
        if not (len(self.lows) == len(self.highs) == len(self.counts)) or not self.lows:
            raise ValueError("lows, highs and counts need one entry per swept axis")
        if any(c < 2 for c in self.counts):
            raise ValueError("every swept axis needs at least 2 grid points")
        if any(lo >= hi for lo, hi in zip(self.lows, self.highs)):
            raise ValueError("every swept axis needs low < high")
        return self

    @property
    def swept(self) -> int:
        return len(self.counts)

    def fixed_values(self, dim: int) -> list[float]:
        rest = dim - self.swept
        if rest < 0:
            raise ConfigurationError(f"grid sweeps {self.swept} axes but the problem has only {dim}")
        if self.fixed is None:
            return [self.fill] * rest
        if len(self.fixed) != rest:
            raise ConfigurationError(f"grid fixes {len(self.fixed)} coordinates, expected d - swept = {rest}")
        return list(self.fixed)


def build_grid(spec: GridSpec, dim: int) -> Tensor:
    """(N, d) points: swept axes first (row-major), then the fixed values."""
    fixed = spec.fixed_values(dim)
    axes = [torch.linspace(lo, hi, n, dtype=DTYPE) for lo, hi, n in zip(spec.lows, spec.highs, spec.counts)]
    mesh = torch.meshgrid(*axes, indexing="ij")
    swept = torch.stack([m.reshape(-1) for m in mesh], dim=-1)
    rest = torch.tensor(fixed, dtype=DTYPE).expand(swept.shape[0], len(fixed))
    return torch.cat([swept, rest], dim=-1)


# ============================================================================
# PREDICTIONS
# ============================================================================

def predict_net(model: Union[LogDensity, Any], points: Tensor, t: float, chunk: int = 4096) -> np.ndarray:
    """log p from the network directly."""
    logp = as_log_density(model)
    out = []
    with torch.no_grad():
        for start in range(0, points.shape[0], chunk):
            out.append(logp(points[start:start + chunk], t))
    return torch.cat(out).numpy()


def _transport_chunk(problem: FPProblem, logp_model: Optional[LogDensity], x: Tensor, t: float,
                     solver: SolverConfig) -> np.ndarray:
    if t == 0.0:
        return problem.p0_log(x).detach().numpy()
    dynamics = characteristic_dynamics(problem, logp_model, estimator="exact")
    state = ode_solve(dynamics, AugmentedState(x, torch.zeros(x.shape[0], dtype=DTYPE)), t, 0.0, solver)
    with torch.no_grad():
        return (problem.p0_log(state.x) - state.logp).numpy()


def predict_transport(
    problem: FPProblem,
    logp_model: Optional[LogDensity],
    points: Tensor,
    t: float,
    solver: SolverConfig,
    chunk: int = 1000,
) -> tuple[np.ndarray, np.ndarray]:
    """log p(x', t') = log p0(x0) - delta, integrating (x', 0) from t' back to 0.

    A failing chunk is retried point by point; points that still fail come
    back as NaN with their flag set.
    """
    if problem.is_steady_state:
        raise ConfigurationError(f"problem '{problem.name}' has no initial density to transport back to")
    problem.check_diffusion(points[:chunk], t)
    logp = np.full(points.shape[0], np.nan)
    flagged = np.zeros(points.shape[0], dtype=bool)
    for start in range(0, points.shape[0], chunk):
        x = points[start:start + chunk]
        try:
            logp[start:start + x.shape[0]] = _transport_chunk(problem, logp_model, x, t, solver)
            continue
        except (SolverDivergenceError, NumericFailureError) as exc:
            logger.warning("⚠️ chunk at %d failed (%s); retrying point by point", start, exc)
        for i in range(x.shape[0]):
            try:
                logp[start + i] = _transport_chunk(problem, logp_model, x[i:i + 1], t, solver)[0]
            except (SolverDivergenceError, NumericFailureError) as exc:
                flagged[start + i] = True
                logger.warning("❌ point %d flagged: %s", start + i, exc)
    return logp, flagged


# ============================================================================
# REPORTS
# ============================================================================

class EvalReport(BaseModel):
    """One row per grid point.

    Columns: x_0..x_{d-1}, t, p_exact (when known), p_<mode>, abs_err_<mode>,
    rel_err_<mode> for each predicted mode, flagged.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    frame: pd.DataFrame
    dim: int
    modes: list[str]

    @property
    def has_exact(self) -> bool:
        return "p_exact" in self.frame.columns

    def aggregates(self) -> dict[str, float]:
        """Per mode: MAPE (%), mean and max relative error, MSE of log-density."""
        if not self.has_exact:
            return {}
        usable = (self.frame["p_exact"] >= DENSITY_FLOOR) & ~self.frame["flagged"].astype(bool)
        rows = self.frame[usable]
        out: dict[str, float] = {"points": float(len(rows))}
        for mode in self.modes:
            rel = rows[f"rel_err_{mode}"]
            log_gap = np.log(rows[f"p_{mode}"]) - np.log(rows["p_exact"])
            out[f"{mode}_mape"] = float(100.0 * rel.mean())
            out[f"{mode}_mean_rel"] = float(rel.mean())
            out[f"{mode}_max_rel"] = float(rel.max())
            out[f"{mode}_mse_log"] = float((log_gap**2).mean())
        return out


def make_report(
    points: Tensor,
    t: float,
    predictions: dict[str, np.ndarray],
    exact: Optional[Callable[[Tensor, float], Tensor]] = None,
    flagged: Optional[np.ndarray] = None,
) -> EvalReport:
    """Rows from log-density predictions keyed by mode."""
    x = points.detach().numpy()
    frame = pd.DataFrame({f"x_{i}": x[:, i] for i in range(x.shape[1])})
    frame["t"] = t
    if exact is not None:
        with torch.no_grad():
            frame["p_exact"] = np.exp(exact(points, t).numpy())
    for mode, logp in predictions.items():
        p = np.exp(logp)
        frame[f"p_{mode}"] = p
        if exact is not None:
            frame[f"abs_err_{mode}"] = np.abs(p - frame["p_exact"])
            frame[f"rel_err_{mode}"] = frame[f"abs_err_{mode}"] / frame["p_exact"].abs()
    frame["flagged"] = np.zeros(len(frame), dtype=bool) if flagged is None else flagged
    return EvalReport(frame=frame, dim=x.shape[1], modes=list(predictions))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_report(report: EvalReport, path: Union[str, Path], config: Optional[dict[str, Any]] = None) -> Path:
    """CSV at `path` and `<stem>.meta.json` next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.frame.to_csv(path, index=False, float_format="%.17g")
    meta = {
        "config": config or {},
        "dim": report.dim,
        "modes": report.modes,
        "sha256": _sha256(path),
        "aggregates": report.aggregates(),
        "created_at": datetime.now().isoformat(),
    }
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, default=str))
    logger.info("✅ report written to %s", path)
    return path


def read_report(path: Union[str, Path]) -> tuple[EvalReport, dict[str, Any]]:
    """Re-read a CSV report; aggregates are recomputed from its rows."""
    path = Path(path)
    meta_path = path.with_suffix(".meta.json")
    if not path.exists() or not meta_path.exists():
        raise ConfigurationError(f"report {path} or its metadata is missing")
    meta = json.loads(meta_path.read_text())
    if meta.get("sha256") != _sha256(path):
        logger.warning("⚠️ %s does not match the hash recorded in its metadata", path)
    frame = pd.read_csv(path, float_precision="round_trip")
    frame["flagged"] = frame["flagged"].astype(bool)
    return EvalReport(frame=frame, dim=meta["dim"], modes=meta["modes"]), meta

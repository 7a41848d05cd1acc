"""
RUN CONFIGURATION
One pydantic record for a CLI run, layered as

    defaults < YAML file < --set key=value pairs < dedicated flags

Keys are dotted paths into the record (`train.lr`, `solver.steps`,
`grid.counts`); values given on the command line are parsed as YAML scalars
or lists, so `--set grid.counts=[50,50]` works.
"""

import logging
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from bench import ProblemSpec
from errors import ConfigurationError
from evaluation import GridSpec
from odesolve import SolverConfig
from training import TrainConfig

logger = logging.getLogger(__name__)


class ModelSpec(BaseModel):
    """Network hyperparameters for both model families."""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    width: int = Field(default=32, ge=1, alias="m")
    n_layers: int = Field(default=4, ge=1, alias="L")
    flow_layers: int = Field(default=4, ge=1, alias="flow-layers")
    hidden: int = Field(default=32, ge=1)
    s_max: Optional[float] = Field(default=None, gt=0.0, alias="s-max")
    init_scale: float = Field(default=0.01, ge=0.0, alias="init-scale")


class McSpec(BaseModel):
    """Euler-Maruyama oracle settings."""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    particles: int = Field(default=100_000, ge=1)
    dt: float = Field(default=1e-3, gt=0.0)
    t1: Optional[float] = Field(default=None, gt=0.0)
    bins: int = Field(default=100, ge=1)
    low: Optional[float] = None
    high: Optional[float] = None
    init_std: Optional[float] = Field(default=None, gt=0.0, alias="init-std")
    sigmas: float = Field(default=3.0, gt=0.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    problem: ProblemSpec = Field(default_factory=ProblemSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    eval_solver: SolverConfig = Field(
        default_factory=lambda: SolverConfig(method="dopri5", rtol=1e-10, atol=1e-12), alias="eval-solver"
    )
    grid: Optional[GridSpec] = None
    mc: McSpec = Field(default_factory=McSpec)
    mode: Optional[Literal["net", "ode", "both"]] = None
    out: Path = Path("runs")
    checkpoint: Optional[Path] = None
    parallel: bool = False

    @property
    def is_steady_state(self) -> bool:
        return self.problem.name == "sfp-ou"

    def resolved_grid(self) -> GridSpec:
        return self.grid if self.grid is not None else default_grid(self.problem.name, self.problem.dim)

    def resolved_mode(self) -> str:
        if self.is_steady_state:
            if self.mode not in (None, "net"):
                raise ConfigurationError("steady-state problems only have the net prediction mode")
            return "net"
        return self.mode or "both"

    def echo(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)


def default_grid(problem: str, dim: int) -> GridSpec:
    """Benchmark test grids: 1000 points on a line, or 50 x 50 over two axes."""
    if problem == "toy" or dim == 1:
        return GridSpec(lows=[-5.0], highs=[5.0], counts=[1000], fill=0.0, time=1.0)
    if problem == "tfp-gauss":
        return GridSpec(lows=[-5.0, -5.0], highs=[5.0, 5.0], counts=[50, 50], fill=2.0, time=1.0)
    return GridSpec(lows=[-3.0, -3.0], highs=[3.0, 3.0], counts=[50, 50], fill=0.0, time=0.0)


# ============================================================================
# LAYERED LOADING
# ============================================================================

def _assign(data: dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"cannot set '{dotted}': '{key}' is not a section")
        node = child
    node[keys[-1]] = value


def parse_assignment(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigurationError(f"expected key=value, got '{item}'")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse value of '{key}': {exc}") from exc
    return key.strip(), value


def _read_yaml(path: Union[str, Path]) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    return data


def validate(data: dict[str, Any]) -> RunConfig:
    """Build a RunConfig, reporting every invalid field at once."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        problems = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()]
        raise ConfigurationError(
            f"{len(problems)} configuration error(s):\n  " + "\n  ".join(problems), problems
        ) from exc


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    assignments: Optional[list[str]] = None,
    flags: Optional[dict[str, Any]] = None,
) -> RunConfig:
    data: dict[str, Any] = _read_yaml(path) if path is not None else {}
    for item in assignments or []:
        _assign(data, *parse_assignment(item))
    for dotted, value in (flags or {}).items():
        if value is not None:
            _assign(data, dotted, value)
    cfg = validate(data)
    logger.debug("run config: %s", cfg.echo())
    return cfg

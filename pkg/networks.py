"""
LOG-DENSITY NETWORKS
Quadratic-potential ResNet for time-dependent problems and a Real NVP
coupling flow for steady-state problems, plus checkpoint I/O.
"""

import logging
import math
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Protocol, Union

import torch
from pydantic import BaseModel, Field
from torch import Tensor, nn

from diffengine import DTYPE, VariableSet, activation, input_gradient, track
from errors import ConfigurationError, NumericFailureError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pinf-checkpoint"
CHECKPOINT_VERSION = 1

LOG_2PI = math.log(2 * math.pi)


class LogDensity(Protocol):
    def __call__(self, x: Tensor, t: Union[Tensor, float]) -> Tensor: ...


def as_time(t: Union[Tensor, float], batch: int) -> Tensor:
    """Broadcast a time (float, 0-dim or (B,)) to a (B,) float64 tensor."""
    if not isinstance(t, Tensor):
        return torch.full((batch,), float(t), dtype=DTYPE)
    if t.dim() == 0:
        return t.to(DTYPE).expand(batch)
    if t.shape != (batch,):
        raise ShapeError(f"time has shape {tuple(t.shape)}, expected ({batch},)")
    return t.to(DTYPE)


def _randomize(module: nn.Module, scale: float, generator: Optional[torch.Generator]) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=generator, dtype=DTYPE))


class _Parameterized(nn.Module):
    """Module whose parameters form one VariableSet, built on first use."""

    @property
    def variables(self) -> VariableSet:
        cached = self.__dict__.get("_variables")
        if cached is None:
            cached = VariableSet.from_module(self)
            self.__dict__["_variables"] = cached
        return cached


# ============================================================================
# POTENTIAL NETWORK (TIME-DEPENDENT PROBLEMS)
# ============================================================================

class PotentialNet(_Parameterized):
    """u(s) = w.N(s) + 1/2 s^T A^T A s + b.s + c on space-time points s = (x, t).

    N is a ResNet with one opening layer and `n_layers` residual layers of
    step 1/n_layers, using the log-cosh activation.
    """

    def __init__(
        self,
        dim: int,
        width: int = 32,
        n_layers: int = 4,
        init_scale: float = 0.01,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if dim < 1 or width < 1 or n_layers < 1:
            raise ConfigurationError("potential net needs dim, width and n_layers >= 1")
        self.dim = dim
        self.width = width
        self.n_layers = n_layers
        self.rank = min(10, dim + 1)
        self.step_size = 1.0 / n_layers

        self.opening = nn.Linear(dim + 1, width, dtype=DTYPE)
        self.blocks = nn.ModuleList(nn.Linear(width, width, dtype=DTYPE) for _ in range(n_layers))
        self.w = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        self.A = nn.Parameter(torch.zeros(self.rank, dim + 1, dtype=DTYPE))
        self.b = nn.Parameter(torch.zeros(dim + 1, dtype=DTYPE))
        self.c = nn.Parameter(torch.zeros((), dtype=DTYPE))
        _randomize(self, init_scale, generator)

    def resnet(self, s: Tensor) -> Tensor:
        a = activation(self.opening(s))
        for layer in self.blocks:
            a = a + self.step_size * activation(layer(a))
        return a

    def forward(self, s: Tensor) -> Tensor:
        if s.shape[-1] != self.dim + 1:
            raise ShapeError(f"space-time point has {s.shape[-1]} entries, expected {self.dim + 1}")
        quadratic = 0.5 * (s @ self.A.T).pow(2).sum(-1)
        return self.resnet(s) @ self.w + quadratic + s @ self.b + self.c


def potential_u(net: PotentialNet, s: Tensor) -> Tensor:
    return net(s)


class LogDensityTFP(_Parameterized):
    """phi(x, t) = log p0(x) + t * u((x, t)); exact at t = 0 for every theta."""

    def __init__(self, p0_log: Callable[[Tensor], Tensor], net: PotentialNet):
        super().__init__()
        self.p0_log = p0_log
        self.net = net

    @property
    def dim(self) -> int:
        return self.net.dim

    def forward(self, x: Tensor, t: Union[Tensor, float]) -> Tensor:
        single = x.dim() == 1
        xb = x.unsqueeze(0) if single else x
        if xb.shape[-1] != self.dim:
            raise ShapeError(f"point has {xb.shape[-1]} coordinates, expected {self.dim}")
        tb = as_time(t, xb.shape[0])
        s = torch.cat([xb, tb.unsqueeze(-1)], dim=-1)
        out = self.p0_log(xb) + tb * self.net(s)
        return out[0] if single else out


def log_density_tfp(model: LogDensityTFP, x: Tensor, t: Union[Tensor, float]) -> Tensor:
    return model(x, t)


# ============================================================================
# REAL NVP COUPLING FLOW (STEADY-STATE PROBLEMS)
# ============================================================================

def _subnetwork(dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(dim, hidden, dtype=DTYPE),
        nn.Tanh(),
        nn.Linear(hidden, hidden, dtype=DTYPE),
        nn.Tanh(),
        nn.Linear(hidden, dim, dtype=DTYPE),
    )


def half_masks(dim: int, n_layers: int) -> list[Tensor]:
    """First-half mask, complemented on every following layer."""
    base = torch.zeros(dim, dtype=DTYPE)
    base[: dim // 2] = 1.0
    return [base.clone() if k % 2 == 0 else 1.0 - base for k in range(n_layers)]


class CouplingLayer(nn.Module):
    """Affine coupling: coordinates with mask 1 pass through and condition
    the scale/shift applied to the rest."""

    def __init__(
        self,
        mask: Tensor,
        hidden: int,
        s_max: Optional[float] = None,
        init_scale: float = 0.01,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        dim = mask.numel()
        self.register_buffer("mask", mask.to(DTYPE))
        self.s_max = s_max
        self.scale_net = _subnetwork(dim, hidden)
        self.shift_net = _subnetwork(dim, hidden)
        _randomize(self, init_scale, generator)
        with torch.no_grad():
            for net in (self.scale_net, self.shift_net):
                net[-1].weight.zero_()
                net[-1].bias.zero_()

    def _scale_shift(self, conditioner: Tensor) -> tuple[Tensor, Tensor]:
        s = self.scale_net(conditioner)
        if self.s_max is not None:
            s = torch.clamp(s, -self.s_max, self.s_max)
        shift = self.shift_net(conditioner)
        if not (torch.isfinite(s).all() and torch.isfinite(shift).all()):
            raise NumericFailureError("coupling subnetwork produced non-finite output", primitive="coupling")
        free = 1.0 - self.mask
        return s * free, shift * free

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x_b = self.mask * x
        s, shift = self._scale_shift(x_b)
        y = x_b + (1.0 - self.mask) * (x * torch.exp(s) + shift)
        return y, s.sum(-1)

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        y_b = self.mask * y
        s, shift = self._scale_shift(y_b)
        x = y_b + (1.0 - self.mask) * ((y - shift) * torch.exp(-s))
        return x, -s.sum(-1)


class CouplingFlow(_Parameterized):
    """Stack of coupling layers pushing N(0, I) forward to the model density."""

    def __init__(
        self,
        dim: int,
        n_layers: int = 4,
        hidden: int = 32,
        s_max: Optional[float] = None,
        init_scale: float = 0.01,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if dim < 1 or n_layers < 1 or hidden < 1:
            raise ConfigurationError("coupling flow needs dim, n_layers and hidden >= 1")
        self.dim = dim
        self.hidden = hidden
        self.s_max = s_max
        self.layers = nn.ModuleList(
            CouplingLayer(mask, hidden, s_max, init_scale, generator) for mask in half_masks(dim, n_layers)
        )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def base_log_prob(self, z: Tensor) -> Tensor:
        return -0.5 * z.pow(2).sum(-1) - 0.5 * self.dim * LOG_2PI

    def _check(self, x: Tensor) -> None:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"point has {x.shape[-1]} coordinates, expected {self.dim}")

    def forward(self, z: Tensor, logp_z: Tensor) -> tuple[Tensor, Tensor]:
        self._check(z)
        x, total = z, torch.zeros_like(logp_z)
        for layer in self.layers:
            x, logdet = layer(x)
            total = total + logdet
        return x, logp_z - total

    def inverse(self, x: Tensor) -> tuple[Tensor, Tensor]:
        self._check(x)
        z = x
        total = torch.zeros(x.shape[:-1], dtype=x.dtype)
        for layer in reversed(self.layers):
            z, logdet = layer.inverse(z)
            total = total + logdet
        return z, self.base_log_prob(z) + total

    def log_density(self, x: Tensor, t: Union[Tensor, float, None] = None) -> Tensor:
        return self.inverse(x)[1]


def flow_forward(flow: CouplingFlow, z: Tensor, logp_z: Tensor) -> tuple[Tensor, Tensor]:
    return flow(z, logp_z)


def flow_backward(flow: CouplingFlow, x: Tensor) -> tuple[Tensor, Tensor]:
    return flow.inverse(x)


def exact_ou_flow(dim: int, a: float = 1.0, sigma: float = 1.0, n_layers: int = 2, hidden: int = 32) -> CouplingFlow:
    """Coupling flow whose density is exactly N(0, sigma^2/(2a) I)."""
    flow = CouplingFlow(dim, n_layers=n_layers, hidden=hidden)
    log_scale = math.log(sigma / math.sqrt(2.0 * a))
    masks = torch.stack([layer.mask for layer in flow.layers])
    transforms = (1.0 - masks).sum(0)
    if (transforms == 0).any():
        raise ConfigurationError("every coordinate must be transformed at least once")
    with torch.no_grad():
        for layer in flow.layers:
            layer.scale_net[-1].bias.copy_(log_scale / transforms)
    return flow


def as_log_density(model: Union[LogDensityTFP, CouplingFlow, LogDensity]) -> LogDensity:
    if isinstance(model, CouplingFlow):
        return model.log_density
    return model


def spatial_grad_logp(model: Union[LogDensityTFP, CouplingFlow, LogDensity], x: Tensor, t: Union[Tensor, float]) -> Tensor:
    """Exact grad_x log p of any log-density model."""
    logp = as_log_density(model)
    single = x.dim() == 1
    xs = track((x.unsqueeze(0) if single else x).detach())
    grad = input_gradient(logp(xs, t), xs, create_graph=False)
    return grad[0] if single else grad


# ============================================================================
# CHECKPOINTS
# ============================================================================

class ArchSpec(BaseModel):
    kind: Literal["potential", "coupling"]
    dim: int = Field(ge=1)
    n_layers: int = Field(ge=1)
    width: int = Field(ge=1)
    rank: Optional[int] = None
    mask_pattern: str = "half-alternating"
    s_max: Optional[float] = None


def describe(model: Union[LogDensityTFP, CouplingFlow]) -> ArchSpec:
    if isinstance(model, LogDensityTFP):
        net = model.net
        return ArchSpec(kind="potential", dim=net.dim, n_layers=net.n_layers, width=net.width, rank=net.rank)
    if isinstance(model, CouplingFlow):
        return ArchSpec(kind="coupling", dim=model.dim, n_layers=model.n_layers, width=model.hidden, s_max=model.s_max)
    raise ConfigurationError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model: Union[LogDensityTFP, CouplingFlow], path: Union[str, Path], extra: Optional[dict[str, Any]] = None) -> Path:
    """Write a versioned container: architecture + named parameter arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch = describe(model)
    module = model.net if isinstance(model, LogDensityTFP) else model
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": arch.model_dump(),
        "params": {k: v.detach().clone() for k, v in module.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    logger.debug("checkpoint written to %s", path)
    return path


def load_checkpoint(
    path: Union[str, Path], p0_log: Optional[Callable[[Tensor], Tensor]] = None
) -> tuple[Union[LogDensityTFP, CouplingFlow], ArchSpec, dict[str, Any]]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a PINF checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {payload.get('version')}")
    arch = ArchSpec(**payload["arch"])
    if arch.kind == "potential":
        if p0_log is None:
            raise ConfigurationError("a potential checkpoint needs the problem's initial log-density")
        net = PotentialNet(arch.dim, width=arch.width, n_layers=arch.n_layers)
        net.load_state_dict(payload["params"])
        model: Union[LogDensityTFP, CouplingFlow] = LogDensityTFP(p0_log, net)
    else:
        model = CouplingFlow(arch.dim, n_layers=arch.n_layers, hidden=arch.width, s_max=arch.s_max)
        model.load_state_dict(payload["params"])
    return model, arch, payload.get("extra", {})

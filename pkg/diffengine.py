"""
DIFFERENTIATION ENGINE
Exact derivatives on top of torch.autograd: parameter gradients, input
gradients, Jacobian traces (divergence) and Hessian traces.

All spatial inputs are batched as (B, d); a single point of shape (d,) is
accepted and the result squeezed back. Scalars are 0-dim float64 tensors.
The central-difference helpers at the bottom exist only as test oracles.
"""

import logging
import re
import weakref
from typing import Callable, Iterable, Iterator, Optional, Sequence

import torch
from torch import Tensor, nn

from errors import ConfigurationError, NumericFailureError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

Field = Callable[[Tensor], Tensor]

# id(tensor) -> owning VariableSet
_OWNERS: dict[int, "weakref.ref[VariableSet]"] = {}

_ANOMALY_PATTERN = re.compile(r"Function '(\w+)'")


# ============================================================================
# ACTIVATION
# ============================================================================

def activation(x: Tensor) -> Tensor:
    """sigma(x) = log(e^x + e^-x), with sigma' = tanh.

    logaddexp evaluates |x| + log1p(exp(-2|x|)) without overflow and keeps a
    smooth second derivative at x = 0.
    """
    return torch.logaddexp(x, -x)


# ============================================================================
# VARIABLE SETS
# ============================================================================

class VariableSet:
    """Ordered, named real tensors that gradient queries may target.

    A tensor belongs to at most one live set.
    """

    def __init__(self, named: Iterable[tuple[str, Tensor]]):
        self._vars: dict[str, Tensor] = {}
        for name, tensor in named:
            if name in self._vars:
                raise ConfigurationError(f"duplicate variable name '{name}'")
            if not tensor.requires_grad:
                if not tensor.is_leaf:
                    raise ConfigurationError(f"variable '{name}' is not differentiable")
                tensor.requires_grad_(True)
            owner = _OWNERS.get(id(tensor))
            other = owner() if owner is not None else None
            if other is not None and other is not self and other.holds(tensor):
                raise ConfigurationError(f"variable '{name}' is already registered in another set")
            self._vars[name] = tensor
        for tensor in self._vars.values():
            _OWNERS[id(tensor)] = weakref.ref(self)
        weakref.finalize(self, _release, [id(t) for t in self._vars.values()])

    @classmethod
    def from_module(cls, module: nn.Module, prefix: str = "") -> "VariableSet":
        return cls((prefix + name, p) for name, p in module.named_parameters())

    def holds(self, tensor: Tensor) -> bool:
        return any(t is tensor for t in self._vars.values())

    def numel(self) -> int:
        return sum(t.numel() for t in self._vars.values())

    def select(self, names: Optional[Sequence[str]] = None) -> list[tuple[str, Tensor]]:
        if names is None:
            return list(self._vars.items())
        missing = [n for n in names if n not in self._vars]
        if missing:
            raise ConfigurationError(f"unregistered variable(s): {', '.join(missing)}")
        return [(n, self._vars[n]) for n in names]

    def unflatten(self, flat: Tensor, names: Optional[Sequence[str]] = None) -> dict[str, Tensor]:
        out, offset = {}, 0
        for name, tensor in self.select(names):
            n = tensor.numel()
            out[name] = flat[offset:offset + n].view_as(tensor)
            offset += n
        if offset != flat.numel():
            raise ShapeError(f"flat vector has {flat.numel()} entries, expected {offset}")
        return out

    def __getitem__(self, name: str) -> Tensor:
        return self.select([name])[0][1]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._vars.items())

    def __len__(self) -> int:
        return len(self._vars)

    def __contains__(self, name: object) -> bool:
        return name in self._vars


def _release(ids: list[int]) -> None:
    for i in ids:
        ref = _OWNERS.get(i)
        if ref is not None and ref() is None:
            del _OWNERS[i]


# ============================================================================
# GRADIENTS
# ============================================================================

def _check_finite_output(f: Tensor) -> None:
    if not torch.isfinite(f).all():
        primitive = f.grad_fn.name() if f.grad_fn is not None else "input"
        raise NumericFailureError("non-finite value in computation", primitive=primitive)


def _locate_anomaly(outputs: Tensor, inputs: list[Tensor]) -> str:
    try:
        with torch.autograd.detect_anomaly(check_nan=True):
            torch.autograd.grad(outputs, inputs, retain_graph=True, allow_unused=True)
    except RuntimeError as exc:
        match = _ANOMALY_PATTERN.search(str(exc))
        if match:
            return match.group(1)
    return "unknown"


def gradients(
    f: Tensor,
    variables: VariableSet,
    names: Optional[Sequence[str]] = None,
    *,
    create_graph: bool = False,
    retain_graph: bool = True,
) -> dict[str, Tensor]:
    """df/dvar for every selected variable, shaped like the variable.

    With `retain_graph=False` the graph of f is freed as the reverse pass
    runs; a non-finite result then reports an unknown primitive.
    """
    if f.numel() != 1:
        raise ShapeError(f"gradient needs a scalar, got shape {tuple(f.shape)}")
    selected = variables.select(names)
    _check_finite_output(f)
    tensors = [t for _, t in selected]
    if not f.requires_grad:
        return {n: torch.zeros_like(t) for n, t in selected}
    grads = torch.autograd.grad(
        f.reshape(()), tensors, retain_graph=retain_graph or create_graph, create_graph=create_graph,
        allow_unused=True,
    )
    out = {}
    for (name, tensor), g in zip(selected, grads):
        out[name] = torch.zeros_like(tensor) if g is None else g
    if not all(torch.isfinite(g).all() for g in out.values()):
        raise NumericFailureError(
            "non-finite gradient",
            primitive=_locate_anomaly(f.reshape(()), tensors) if retain_graph else "unknown",
        )
    return out


def gradient(
    f: Tensor,
    variables: VariableSet,
    names: Optional[Sequence[str]] = None,
    *,
    create_graph: bool = False,
) -> Tensor:
    """Flat df/dvars in registration order (exact, not a difference quotient)."""
    grads = gradients(f, variables, names, create_graph=create_graph)
    return torch.cat([g.reshape(-1) for g in grads.values()])


def track(x: Tensor) -> Tensor:
    """Make x differentiable without cutting it out of an existing graph."""
    if x.requires_grad:
        return x
    return x.detach().requires_grad_(True)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.dim() == 1:
        return x.unsqueeze(0), True
    if x.dim() != 2:
        raise ShapeError(f"expected a point (d,) or batch (B, d), got {tuple(x.shape)}")
    return x, False


def input_gradient(values: Tensor, x: Tensor, *, create_graph: bool = True) -> Tensor:
    """Per-sample grad of values (B,) w.r.t. x (B, d); samples are independent."""
    if not values.requires_grad:
        return torch.zeros_like(x)
    (g,) = torch.autograd.grad(
        values.sum(), x, create_graph=create_graph, retain_graph=True, allow_unused=True
    )
    return torch.zeros_like(x) if g is None else g


def trace_of_jacobian(outputs: Tensor, x: Tensor, *, create_graph: bool = False) -> Tensor:
    """sum_i dF_i/dx_i per sample, one reverse pass per coordinate."""
    if outputs.shape != x.shape:
        raise ShapeError(f"field shape {tuple(outputs.shape)} does not match input {tuple(x.shape)}")
    trace = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
    if not outputs.requires_grad:
        return trace
    for i in range(x.shape[1]):
        (g,) = torch.autograd.grad(
            outputs[:, i].sum(), x, create_graph=create_graph, retain_graph=True, allow_unused=True
        )
        if g is not None:
            trace = trace + g[:, i]
    return trace


def hutchinson_trace(
    outputs: Tensor,
    x: Tensor,
    *,
    probes: int = 1,
    generator: Optional[torch.Generator] = None,
    create_graph: bool = False,
) -> Tensor:
    """Unbiased Rademacher estimate of the Jacobian trace."""
    if outputs.shape != x.shape:
        raise ShapeError(f"field shape {tuple(outputs.shape)} does not match input {tuple(x.shape)}")
    if probes < 1:
        raise ConfigurationError("hutchinson estimator needs at least one probe")
    estimate = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
    if not outputs.requires_grad:
        return estimate
    for _ in range(probes):
        noise = torch.randint(0, 2, x.shape, generator=generator).to(x) * 2 - 1
        (vjp,) = torch.autograd.grad(
            outputs, x, noise, create_graph=create_graph, retain_graph=True, allow_unused=True
        )
        if vjp is not None:
            estimate = estimate + (vjp * noise).sum(dim=1)
    return estimate / probes


def jacobian_trace(
    outputs: Tensor,
    x: Tensor,
    *,
    create_graph: bool = False,
    estimator: str = "exact",
    probes: int = 1,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    if estimator == "exact":
        return trace_of_jacobian(outputs, x, create_graph=create_graph)
    if estimator == "hutchinson":
        return hutchinson_trace(outputs, x, probes=probes, generator=generator, create_graph=create_graph)
    raise ConfigurationError(f"unknown trace estimator '{estimator}'")


def divergence(
    field: Field,
    x: Tensor,
    *,
    create_graph: bool = False,
    estimator: str = "exact",
    probes: int = 1,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """div F at x: (B,) for a batch, 0-dim for a single point."""
    xb, squeeze = _as_batch(x)
    xs = track(xb)
    outputs = field(xs)
    if outputs.shape != xs.shape:
        raise ShapeError(f"field maps R^{xs.shape[1]} to shape {tuple(outputs.shape[1:])}")
    div = jacobian_trace(
        outputs, xs, create_graph=create_graph, estimator=estimator, probes=probes, generator=generator
    )
    return div[0] if squeeze else div


def hessian_trace(
    g: Field,
    x: Tensor,
    *,
    create_graph: bool = False,
    estimator: str = "exact",
    probes: int = 1,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """Laplacian of a scalar field: divergence of its input gradient."""
    xb, squeeze = _as_batch(x)
    xs = track(xb)
    values = g(xs)
    if values.shape != (xs.shape[0],):
        raise ShapeError(f"scalar field returned shape {tuple(values.shape)}")
    grad = input_gradient(values, xs, create_graph=True)
    lap = jacobian_trace(
        grad, xs, create_graph=create_graph, estimator=estimator, probes=probes, generator=generator
    )
    return lap[0] if squeeze else lap


# ============================================================================
# FINITE-DIFFERENCE ORACLES
# ============================================================================

@torch.no_grad()
def central_difference_gradient(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> Tensor:
    """Central differences of a scalar function of a flat or shaped tensor."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = fn(x).item()
        flat[i] = orig - step
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


@torch.no_grad()
def central_difference_divergence(field: Field, x: Tensor, step: float = 1e-5) -> Tensor:
    xb, squeeze = _as_batch(x.detach().clone())
    div = torch.zeros(xb.shape[0], dtype=xb.dtype)
    for i in range(xb.shape[1]):
        shift = torch.zeros_like(xb)
        shift[:, i] = step
        div += (field(xb + shift)[:, i] - field(xb - shift)[:, i]) / (2 * step)
    return div[0] if squeeze else div


@torch.no_grad()
def central_difference_laplacian(g: Field, x: Tensor, step: float = 1e-4) -> Tensor:
    xb, squeeze = _as_batch(x.detach().clone())
    center = g(xb)
    lap = torch.zeros(xb.shape[0], dtype=xb.dtype)
    for i in range(xb.shape[1]):
        shift = torch.zeros_like(xb)
        shift[:, i] = step
        lap += (g(xb + shift) - 2 * center + g(xb - shift)) / step**2
    return lap[0] if squeeze else lap

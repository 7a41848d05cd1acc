"""
BENCHMARK PROBLEMS + MONTE-CARLO ORACLE
The three closed-form benchmarks (toy transport, diffusive Gaussian, OU
steady state), a registry keyed by name, an Euler-Maruyama particle
simulator and histogram density estimates for independent validation.
"""

import logging
import math
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats
from torch import Tensor

from diffengine import DTYPE, input_gradient, jacobian_trace, track
from errors import ConfigurationError, NumericFailureError
from fpcore import FPProblem
from networks import as_time

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


# ============================================================================
# ANALYTIC SOLUTIONS
# ============================================================================

class AnalyticSolution:
    """Closed-form log p(x, t) in torch, so it is differentiable and can stand
    in for a trained model."""

    def __init__(self, name: str, log_density: Callable[[Tensor, Tensor], Tensor], note: str = "unbounded domain"):
        self.name = name
        self._log_density = log_density
        self.note = note

    def __call__(self, x: Tensor, t: Union[Tensor, float] = 0.0) -> Tensor:
        single = x.dim() == 1
        xb = x.unsqueeze(0) if single else x
        out = self._log_density(xb, as_time(t, xb.shape[0]))
        return out[0] if single else out

    def density(self, x: Union[np.ndarray, Tensor], t: float = 0.0) -> np.ndarray:
        xt = torch.as_tensor(np.asarray(x, dtype=np.float64))
        with torch.no_grad():
            return torch.exp(self(xt, t)).numpy()


class ProblemSpec(BaseModel):
    """Registry overrides: dimension, OU parameters, horizon."""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    name: str = "toy"
    dim: int = Field(default=2, ge=1, alias="d")
    a: float = Field(default=1.0, gt=0.0)
    sigma: float = Field(default=1.0, gt=0.0)
    horizon: Optional[float] = Field(default=None, gt=0.0, alias="T")


def _gaussian_sampler(shift: float) -> Callable[[int, int, torch.Generator], Tensor]:
    def sample(dim: int, n: int, generator: torch.Generator) -> Tensor:
        return torch.randn(n, dim, generator=generator, dtype=DTYPE) + shift
    return sample


def toy_problem(dim: int, horizon: float = 1.0) -> tuple[FPProblem, AnalyticSolution]:
    """dp/dt + 2t div(p 1) = 0 with p0 = N(-1, I); zero diffusion."""

    def drift(x: Tensor, t: Tensor) -> Tensor:
        return (2.0 * t).unsqueeze(-1).expand_as(x)

    def drift_div(x: Tensor, t: Tensor) -> Tensor:
        return torch.zeros(x.shape[0], dtype=x.dtype)

    def p0_log(x: Tensor) -> Tensor:
        return -0.5 * (x + 1.0).pow(2).sum(-1) - 0.5 * dim * LOG_2PI

    def exact(x: Tensor, t: Tensor) -> Tensor:
        return -0.5 * (x + (1.0 - t * t).unsqueeze(-1)).pow(2).sum(-1) - 0.5 * dim * LOG_2PI

    sample = _gaussian_sampler(-1.0)
    problem = FPProblem(
        name="toy", dim=dim, drift=drift, drift_div=drift_div, p0_log=p0_log,
        p0_sample=lambda n, g: sample(dim, n, g), horizon=horizon,
    )
    return problem, AnalyticSolution("toy", exact)


def tfp_gauss_problem(dim: int, horizon: float = 1.0) -> tuple[FPProblem, AnalyticSolution]:
    """dp/dt - 1/2 lap p + 2 div(p 1) = 0 with p0 = N(0, I)."""

    def drift(x: Tensor, t: Tensor) -> Tensor:
        return torch.full_like(x, 2.0)

    def drift_div(x: Tensor, t: Tensor) -> Tensor:
        return torch.zeros(x.shape[0], dtype=x.dtype)

    def p0_log(x: Tensor) -> Tensor:
        return -0.5 * x.pow(2).sum(-1) - 0.5 * dim * LOG_2PI

    def exact(x: Tensor, t: Tensor) -> Tensor:
        var = t + 1.0
        return -(x - 2.0 * t.unsqueeze(-1)).pow(2).sum(-1) / (2.0 * var) - 0.5 * dim * torch.log(2 * math.pi * var)

    sample = _gaussian_sampler(0.0)
    problem = FPProblem(
        name="tfp-gauss", dim=dim, drift=drift, drift_div=drift_div, diffusion_scale=0.5,
        p0_log=p0_log, p0_sample=lambda n, g: sample(dim, n, g), horizon=horizon,
    )
    return problem, AnalyticSolution("tfp-gauss", exact)


def sfp_ou_problem(dim: int, a: float = 1.0, sigma: float = 1.0) -> tuple[FPProblem, AnalyticSolution]:
    """Stationary OU: mu = -a x, D = sigma^2/2 I, p = N(0, sigma^2/(2a) I)."""

    def drift(x: Tensor, t: Tensor) -> Tensor:
        return -a * x

    def drift_div(x: Tensor, t: Tensor) -> Tensor:
        return torch.full((x.shape[0],), -a * dim, dtype=x.dtype)

    def exact(x: Tensor, t: Tensor) -> Tensor:
        return 0.5 * dim * math.log(a / (math.pi * sigma**2)) - a * x.pow(2).sum(-1) / sigma**2

    problem = FPProblem(name="sfp-ou", dim=dim, drift=drift, drift_div=drift_div, diffusion_scale=0.5 * sigma**2)
    return problem, AnalyticSolution("sfp-ou", exact)


PROBLEMS = ("toy", "tfp-gauss", "sfp-ou")


def build_problem(spec: ProblemSpec) -> tuple[FPProblem, AnalyticSolution]:
    horizon = spec.horizon if spec.horizon is not None else 1.0
    if spec.name == "toy":
        return toy_problem(spec.dim, horizon)
    if spec.name == "tfp-gauss":
        return tfp_gauss_problem(spec.dim, horizon)
    if spec.name == "sfp-ou":
        return sfp_ou_problem(spec.dim, spec.a, spec.sigma)
    raise ConfigurationError(f"unknown problem '{spec.name}' (known: {', '.join(PROBLEMS)})")


def fp_log_residual(problem: FPProblem, solution: AnalyticSolution, x: Tensor, t: Union[Tensor, float]) -> Tensor:
    """Fokker-Planck residual divided by p, for constant isotropic diffusion:

    dt log p + div mu + mu . grad log p - k (lap log p + |grad log p|^2)
    """
    if problem.diffusion is not None:
        raise ConfigurationError("log residual is implemented for constant isotropic diffusion")
    xs = track(x.detach())
    ts = as_time(t, x.shape[0]).detach().clone().requires_grad_(True)
    logp = solution(xs, ts)
    (dt,) = torch.autograd.grad(logp.sum(), ts, create_graph=True, retain_graph=True, allow_unused=True)
    dt = torch.zeros_like(ts) if dt is None or problem.is_steady_state else dt
    grad = input_gradient(logp, xs, create_graph=True)
    lap = jacobian_trace(grad, xs)
    mu = problem.drift(xs, ts)
    div_mu = problem.drift_div(xs, ts) if problem.drift_div is not None else jacobian_trace(mu, xs)
    k = problem.diffusion_scale or 0.0
    residual = dt + div_mu + (mu * grad).sum(-1) - k * (lap + grad.pow(2).sum(-1))
    return residual.detach()


# ============================================================================
# EULER-MARUYAMA ORACLE
# ============================================================================

class ParticleCloud(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    positions: np.ndarray
    time: float = 0.0
    seed: int = 0

    @property
    def size(self) -> int:
        return self.positions.shape[0]


def initial_cloud(
    problem: FPProblem, n: int, seed: int = 0, std: Optional[float] = None
) -> ParticleCloud:
    """Particles from p0, or from N(0, std^2 I) for steady-state problems."""
    if n < 1:
        raise ConfigurationError("a particle cloud needs at least one particle")
    generator = torch.Generator().manual_seed(seed)
    if problem.p0_sample is not None and std is None:
        positions = problem.p0_sample(n, generator).numpy()
    else:
        scale = 1.0 if std is None else std
        positions = scale * torch.randn(n, problem.dim, generator=generator, dtype=DTYPE).numpy()
    return ParticleCloud(positions=positions, time=0.0, seed=seed)


def noise_matrix(problem: FPProblem, x: Tensor, t: Tensor) -> Union[float, Tensor]:
    """sigma with sigma sigma^T = 2 D: a scalar for isotropic D, else a matrix root."""
    if problem.diffusion is None:
        return math.sqrt(2.0 * (problem.diffusion_scale or 0.0))
    evals, evecs = torch.linalg.eigh(2.0 * problem.diffusion_matrix(x, t))
    return evecs @ torch.diag_embed(evals.clamp_min(0.0).sqrt()) @ evecs.transpose(1, 2)


@torch.no_grad()
def euler_maruyama(
    problem: FPProblem, cloud: ParticleCloud, dt: float, t1: float, block_size: int = 65_536
) -> ParticleCloud:
    """x <- x + mu dt + sigma sqrt(dt) xi until t1; deterministic given the seed.

    Each block of particles draws from its own stream spawned from the
    cloud's seed.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    if cloud.size < 1:
        raise ConfigurationError("a particle cloud needs at least one particle")
    problem.check_diffusion(torch.from_numpy(cloud.positions[:1024]), cloud.time)
    span = t1 - cloud.time
    n_steps = max(0, math.ceil(span / dt - 1e-12))
    positions = cloud.positions.copy()
    streams = np.random.SeedSequence(cloud.seed).spawn(math.ceil(cloud.size / block_size))

    for block, seq in enumerate(streams):
        rng = np.random.default_rng(seq)
        lo, hi = block * block_size, min(cloud.size, (block + 1) * block_size)
        x = torch.from_numpy(positions[lo:hi])
        t = cloud.time
        for _ in range(n_steps):
            h = min(dt, t1 - t)
            tt = torch.full((x.shape[0],), t, dtype=DTYPE)
            sigma = noise_matrix(problem, x, tt)
            xi = torch.from_numpy(rng.standard_normal(x.shape))
            if isinstance(sigma, float):
                kick = sigma * math.sqrt(h) * xi
            else:
                kick = math.sqrt(h) * torch.einsum("bij,bj->bi", sigma, xi)
            x = x + problem.drift(x, tt) * h + kick
            t = t + h
        bad = ~np.isfinite(x.numpy()).all(axis=1)
        if bad.any():
            raise NumericFailureError("particle left the finite range", index=lo + int(np.argmax(bad)), time=t)
        positions[lo:hi] = x.numpy()

    logger.debug("advanced %d particles over %d steps to t=%.4g", cloud.size, n_steps, t1)
    return ParticleCloud(positions=positions, time=t1, seed=cloud.seed)


# ============================================================================
# HISTOGRAMS
# ============================================================================

class HistogramDensity(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    edges: list[np.ndarray]
    density: np.ndarray
    count: int

    @property
    def centers(self) -> list[np.ndarray]:
        return [0.5 * (e[1:] + e[:-1]) for e in self.edges]

    @property
    def bin_volume(self) -> float:
        return float(np.prod([e[1] - e[0] for e in self.edges]))

    def center_points(self) -> np.ndarray:
        grids = np.meshgrid(*self.centers, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)


def histogram_density(
    cloud: ParticleCloud,
    bins: Union[int, Sequence[int]],
    value_range: Sequence[tuple[float, float]],
    coords: Sequence[int] = (0,),
) -> HistogramDensity:
    """Histogram normalized by the total particle count, so mass outside the
    range is simply missing."""
    if cloud.size == 0:
        raise ConfigurationError("cannot histogram an empty cloud")
    if not 1 <= len(coords) <= 2:
        raise ConfigurationError("histograms cover one or two coordinates")
    if len(value_range) != len(coords):
        raise ConfigurationError("one range per histogram coordinate")
    nbins = [bins] * len(coords) if isinstance(bins, int) else list(bins)
    counts, edges = np.histogramdd(cloud.positions[:, list(coords)], bins=nbins, range=list(value_range))
    volume = float(np.prod([e[1] - e[0] for e in edges]))
    return HistogramDensity(edges=list(edges), density=counts / (cloud.size * volume), count=cloud.size)


def bin_averaged_density(solution: AnalyticSolution, hist: HistogramDensity, t: float, refine: int = 8) -> np.ndarray:
    """Analytic density averaged over each bin (midpoint rule on a sub-grid)."""
    fine_edges = [np.linspace(e[0], e[-1], (len(e) - 1) * refine + 1) for e in hist.edges]
    fine_centers = [0.5 * (e[1:] + e[:-1]) for e in fine_edges]
    grids = np.meshgrid(*fine_centers, indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=-1)
    values = solution.density(points, t).reshape([len(c) for c in fine_centers])
    for axis in range(values.ndim):
        shape = list(values.shape)
        shape[axis : axis + 1] = [shape[axis] // refine, refine]
        values = values.reshape(shape).mean(axis=axis + 1)
    return values


def write_histogram_csv(hist: HistogramDensity, path: Union[str, Path], extra: Optional[dict[str, np.ndarray]] = None) -> Path:
    """Columns: bin_center_0[, bin_center_1], density[, extra columns]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points = hist.center_points()
    frame = pd.DataFrame({f"bin_center_{i}": points[:, i] for i in range(points.shape[1])})
    frame["density"] = hist.density.ravel()
    for name, values in (extra or {}).items():
        frame[name] = np.asarray(values).ravel()
    frame.to_csv(path, index=False)
    return path


# ============================================================================
# MC vs ANALYTIC
# ============================================================================

class HistogramComparison(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sup_error: float
    l1_error: float
    worst_z: float
    z_bound: float
    exact: np.ndarray
    bound: np.ndarray

    @property
    def passed(self) -> bool:
        return self.worst_z <= self.z_bound


def sup_bound_factor(n_bins: int, sigmas: float = 3.0) -> float:
    """Per-bin z such that all n_bins stay inside with the two-sided
    probability of a single `sigmas` test."""
    family = 2.0 * stats.norm.sf(sigmas)
    per_bin = 1.0 - (1.0 - family) ** (1.0 / max(n_bins, 1))
    return float(stats.norm.isf(per_bin / 2.0))


def compare_histogram(
    hist: HistogramDensity, solution: AnalyticSolution, t: float, sigmas: float = 3.0
) -> HistogramComparison:
    """Bin-by-bin histogram error against the bin-averaged analytic density.

    A bin's standard error is sqrt((p + 1/(N V)) / (N V)) for N particles and
    bin volume V; the extra count keeps empty tails from demanding exact zeros.
    """
    exact = bin_averaged_density(solution, hist, t)
    nv = hist.count * hist.bin_volume
    stderr = np.sqrt((exact + 1.0 / nv) / nv)
    gap = np.abs(hist.density - exact)
    z_bound = sup_bound_factor(gap.size, sigmas)
    sup_error, l1_error = density_gap(hist.density, exact, hist.bin_volume)
    return HistogramComparison(
        sup_error=sup_error,
        l1_error=l1_error,
        worst_z=float((gap / stderr).max()),
        z_bound=z_bound,
        exact=exact,
        bound=z_bound * stderr,
    )


def density_gap(predicted: np.ndarray, reference: np.ndarray, bin_volume: float) -> tuple[float, float]:
    """(sup, L1) distance between two densities sampled on the same bins."""
    gap = np.abs(np.asarray(predicted, dtype=float).ravel() - np.asarray(reference, dtype=float).ravel())
    return float(gap.max()), float(gap.sum() * bin_volume)

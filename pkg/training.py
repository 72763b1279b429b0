"""
Training loop for residual energies

- Parameter initialization (Glorot-uniform weights, zero biases)
- Training point sets for every scheme
- First-order optimization (Adam or plain gradient descent) of the exact
  energy gradient, with diagnostics every log_every iterations
- Termination: MaxIters, Converged, Diverged or NonFinite
"""

import logging
import math
import time
from dataclasses import dataclass
from dataclasses import field as dataclass_field
from enum import Enum
from typing import List, Optional, Union

import numpy as np
import torch

from autodiff_core import (
    DTYPE,
    Architecture,
    ContractViolation,
    MlpParams,
    NonFiniteEnergy,
    loss_gradient,
    save_checkpoint,
)
from diagnostics import DiagnosticContext, DiagnosticsReport, diagnose
from domains import (  # noqa: F401  re-exported training point-set API
    QuadratureSet,
    TimeGrid,
    make_time_grid,
    sample_boundary,
    sample_boundary_space_time,
    sample_interior,
    sample_space_time,
)
from energies import EnergySpec, assemble_energy, build_field
from operators_residuals import Scheme
from problems import ProblemSpec

logger = logging.getLogger(__name__)


class Termination(Enum):
    MAX_ITERS = "MaxIters"
    CONVERGED = "Converged"
    DIVERGED = "Diverged"
    NON_FINITE = "NonFinite"


@dataclass(frozen=True)
class OptimizerConfig:
    """adam: torch.optim.Adam; gd: plain gradient descent (torch.optim.SGD)"""

    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("adam", "gd"):
            raise ContractViolation(f"Unknown optimizer: {self.name}. Available: ['adam', 'gd']")
        if self.lr <= 0:
            raise ContractViolation(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ContractViolation("Adam needs 0 <= beta1, beta2 < 1 and eps > 0")

    def build(self, parameters: List[torch.Tensor]) -> torch.optim.Optimizer:
        if self.name == "adam":
            return torch.optim.Adam(parameters, lr=self.lr, betas=(self.beta1, self.beta2), eps=self.eps)
        return torch.optim.SGD(parameters, lr=self.lr)


@dataclass(frozen=True)
class TrainConfig:
    arch: Architecture
    seed: int = 0
    n_interior: int = 256
    n_boundary: int = 64
    n_initial: int = 256
    optimizer: OptimizerConfig = dataclass_field(default_factory=OptimizerConfig)
    max_iters: int = 20000
    log_every: int = 100
    resample_every: int = 0
    divergence_threshold: float = 10.0
    time_steps: int = 10
    n_eval: int = 201
    converge_tol: float = 0.0
    zero_final_layer: bool = False
    resample_levels: bool = False
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        for name in ("n_interior", "n_boundary", "n_initial", "log_every", "time_steps", "n_eval"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_iters < 0 or self.resample_every < 0:
            raise ContractViolation("max_iters and resample_every must be >= 0")
        if self.divergence_threshold <= 0:
            raise ContractViolation(f"divergence threshold must be positive, got {self.divergence_threshold}")
        if not 0 <= self.seed < 2 ** 64:
            raise ContractViolation(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass
class TrajectoryRecord:
    iteration: int
    energy: float
    grad_norm: float
    report: DiagnosticsReport
    wall_ms: float


@dataclass
class TrainTrajectory:
    records: List[TrajectoryRecord]
    params: MlpParams
    termination: Termination
    grid: Optional[TimeGrid] = None
    u0_sup: float = 0.0

    @property
    def final(self) -> TrajectoryRecord:
        return self.records[-1]

    @property
    def iterations(self) -> List[int]:
        return [r.iteration for r in self.records]


def instability_indicator(trajectory: TrainTrajectory) -> float:
    """max over log events of sup-norm / (1 + sup|u0|)"""
    sups = [r.report.sup_norm for r in trajectory.records if not math.isnan(r.report.sup_norm)]
    if not sups:
        return float("nan")
    return max(sups) / (1.0 + trajectory.u0_sup)


def init_params(arch: Architecture, seed: int, zero_final_layer: bool = False) -> MlpParams:
    """Glorot-uniform weights in +-sqrt(6 / (d_k + d_{k+1})), zero biases"""
    # all 64 seed bits count; the child stream is distinct from the sampling stream
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)).spawn(1)[0])
    widths = arch.layer_widths
    weights, biases = [], []
    for k in range(arch.n_affine):
        fan_in, fan_out = widths[k], widths[k + 1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = torch.as_tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), dtype=DTYPE)
        if zero_final_layer and k == arch.n_affine - 1:
            w = torch.zeros_like(w)
        weights.append(w)
        biases.append(torch.zeros(fan_out, dtype=DTYPE))
    return MlpParams(arch, tuple(weights), tuple(biases))


def _spatial_set(problem: ProblemSpec, spec: EnergySpec, config: TrainConfig, rng, with_initial: bool) -> QuadratureSet:
    domain = problem.domain
    interior = sample_interior(domain, config.n_interior, rng)
    boundary = sample_boundary(domain, config.n_boundary, rng) if spec.uses_boundary_penalty else None
    initial = sample_interior(domain, config.n_initial, rng) if with_initial else None
    return QuadratureSet(interior, boundary, initial)


def build_quadrature(
    problem: ProblemSpec,
    spec: EnergySpec,
    config: TrainConfig,
    rng: np.random.Generator,
    grid: Optional[TimeGrid] = None,
) -> Union[QuadratureSet, List[QuadratureSet]]:
    """Training point sets for the configured scheme"""
    if spec.scheme is Scheme.ELLIPTIC:
        return _spatial_set(problem, spec, config, rng, with_initial=False)
    if spec.scheme is Scheme.EXACT_TIME:
        domain, T = problem.domain, problem.T
        interior = sample_space_time(domain, T, config.n_interior, rng)
        boundary = (
            sample_boundary_space_time(domain, T, config.n_boundary, rng)
            if spec.uses_boundary_penalty
            else None
        )
        return QuadratureSet(interior, boundary, sample_interior(domain, config.n_initial, rng))
    if config.resample_levels:
        return [_spatial_set(problem, spec, config, rng, with_initial=(n == 0)) for n in range(grid.N)]
    return _spatial_set(problem, spec, config, rng, with_initial=True)


def _validate(problem: ProblemSpec, spec: EnergySpec, config: TrainConfig):
    if config.arch.input_dim != problem.input_dim:
        raise ContractViolation(
            f"network input dimension {config.arch.input_dim} does not match {problem.name} ({problem.input_dim})"
        )
    if problem.is_parabolic == (spec.scheme is Scheme.ELLIPTIC):
        raise ContractViolation(f"scheme {spec.scheme.value} does not fit problem {problem.name}")
    if config.resample_levels and spec.scheme not in (Scheme.IE, Scheme.EE):
        raise ContractViolation("per-level resampling only applies to time-discrete schemes")


def train(problem: ProblemSpec, spec: EnergySpec, config: TrainConfig) -> TrainTrajectory:
    """
    Minimize the assembled energy over the network parameters.

    The parameters live in one flat leaf tensor; each iteration computes the
    exact energy gradient with loss_gradient and hands it to the optimizer.
    """
    _validate(problem, spec, config)
    grid = make_time_grid(problem.T, config.time_steps) if problem.is_parabolic else None
    rng = np.random.default_rng(config.seed)
    quadrature = build_quadrature(problem, spec, config, rng, grid)
    energy_eval = assemble_energy(problem, spec, quadrature, grid)
    context = DiagnosticContext.build(problem, grid, config.n_eval)
    threshold = config.divergence_threshold * (1.0 + context.u0_sup)

    arch = config.arch
    theta = init_params(arch, config.seed, config.zero_final_layer).flatten().clone().requires_grad_(True)
    optimizer = config.optimizer.build([theta])
    records: List[TrajectoryRecord] = []
    termination: Optional[Termination] = None
    start = time.perf_counter()

    logger.info(
        "training %s with %s scheme: arch %s, %d parameters, seed %d",
        problem.name, spec.scheme.value, list(arch.layer_widths), arch.total_dim, config.seed,
    )
    for iteration in range(config.max_iters + 1):
        if config.resample_every and iteration and iteration % config.resample_every == 0:
            quadrature = build_quadrature(problem, spec, config, rng, grid)
            energy_eval = assemble_energy(problem, spec, quadrature, grid)
            logger.debug("resampled training points at iteration %d", iteration)

        params = MlpParams.from_flat(arch, theta.detach())
        try:
            energy, grad = loss_gradient(params, energy_eval, iteration=iteration)
        except NonFiniteEnergy as exc:
            logger.warning("stopping: %s", exc)
            nan = float("nan")
            records.append(TrajectoryRecord(iteration, nan, nan, DiagnosticsReport(), _elapsed_ms(start)))
            termination = Termination.NON_FINITE
            break
        grad_norm = float(torch.linalg.vector_norm(grad))

        converged = energy <= config.converge_tol
        last = iteration == config.max_iters
        if converged or last or iteration % config.log_every == 0:
            report = diagnose(build_field(params, problem, spec), context)
            records.append(TrajectoryRecord(iteration, energy, grad_norm, report, _elapsed_ms(start)))
            logger.info(
                "iter %6d  energy %.6e  |grad| %.3e  sup %.4g",
                iteration, energy, grad_norm, report.sup_norm,
            )
            if config.checkpoint_path:
                save_checkpoint(params, config.checkpoint_path)
            if not report.sup_norm <= threshold:
                logger.warning(
                    "diverged at iteration %d: sup-norm %.4g exceeds %.4g", iteration, report.sup_norm, threshold
                )
                termination = Termination.DIVERGED
            elif converged:
                termination = Termination.CONVERGED
            elif last:
                termination = Termination.MAX_ITERS
        if termination is not None:
            break

        optimizer.zero_grad(set_to_none=True)
        theta.grad = grad
        optimizer.step()

    logger.info("finished %s: %s after %d iterations", problem.name, termination.value, records[-1].iteration)
    return TrainTrajectory(records, MlpParams.from_flat(arch, theta.detach().clone()), termination, grid, context.u0_sup)


def _elapsed_ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0

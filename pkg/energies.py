"""
Residual energies as quadrature sums

- energy_elliptic: sum w (Lv - f)^2 + tau * boundary + lambda * J
- energy_parabolic_exact: space-time residual + mu * initial misfit + ...
- energy_time_discrete: sum_n k_n sum w r_n^2 (implicit or explicit Euler
  difference quotients) + mu * initial misfit + tau * sum_n k_n boundary + ...
- regularizer_h1: J(v) = squared H1 seminorm by quadrature

Boundary data are homogeneous: the soft penalty measures v itself.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Union

import torch

from autodiff_core import DTYPE, ContractViolation, Jet2, MlpParams
from domains import Domain, Interval, LShape, PointSet, QuadratureSet, TimeGrid, UnitSquare
from operators_residuals import (
    Field,
    NetworkField,
    Scheme,
    TimeSliceField,
    evaluate_levels,
    level_points,
    residual_elliptic,
    residual_parabolic_exact,
    residual_time_discrete,
    time_discrete_level_residuals,
)
from problems import ProblemSpec

logger = logging.getLogger(__name__)

Quadrature = Union[QuadratureSet, Sequence[QuadratureSet]]

HARD_BC_DOMAINS = (Interval, UnitSquare, LShape)


class BoundaryMode(Enum):
    SOFT_PENALTY = "soft"
    HARD_CONSTRAINT = "hard"


class InitialNorm(Enum):
    L2 = "l2"
    H1_SEMI = "h1semi"


@dataclass(frozen=True)
class EnergySpec:
    """Weights and variant selection of a residual energy"""

    scheme: Scheme = Scheme.ELLIPTIC
    tau: float = 1.0
    mu: float = 1.0
    lam: float = 0.0
    initial_norm: InitialNorm = InitialNorm.H1_SEMI
    bc_mode: BoundaryMode = BoundaryMode.HARD_CONSTRAINT

    def __post_init__(self):
        for name in ("tau", "mu", "lam"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def uses_boundary_penalty(self) -> bool:
        return self.bc_mode is BoundaryMode.SOFT_PENALTY and self.tau > 0


def _weighted_sum(weights: torch.Tensor, integrand: torch.Tensor) -> torch.Tensor:
    return torch.sum(weights * integrand)


def _require_points(points: Optional[PointSet], what: str) -> PointSet:
    if points is None or points.n_points == 0:
        raise ContractViolation(f"{what} point set is empty")
    return points


# ---------------------------------------------------------------------------
# Hard boundary constraints
# ---------------------------------------------------------------------------

class HardBoundaryField(Field):
    """x -> g(x) v(x), g the domain cutoff; g ignores the time coordinate"""

    def __init__(self, inner: Field, domain: Domain):
        super().__init__(inner.input_dim)
        self.inner = inner
        self.domain = domain

    def jet(self, points) -> Jet2:
        pts = self._points(points)
        cutoff = self.domain.cutoff_jet(pts[:, : self.domain.dim]).pad(self.input_dim)
        return cutoff * self.inner.jet(pts)

    def value(self, points) -> torch.Tensor:
        pts = self._points(points)
        return self.domain.cutoff_jet(pts[:, : self.domain.dim]).value * self.inner.value(pts)


def hard_bc_wrap(inner: Field, domain: Domain) -> Field:
    if not isinstance(domain, HARD_BC_DOMAINS):
        raise ContractViolation(f"no boundary cutoff for domain {domain!r}")
    if inner.input_dim not in (domain.dim, domain.dim + 1):
        raise ContractViolation(
            f"field with {inner.input_dim} inputs does not live on {domain.name} (x time)"
        )
    return HardBoundaryField(inner, domain)


def build_field(params: MlpParams, problem: ProblemSpec, spec: EnergySpec) -> Field:
    if params.arch.input_dim != problem.input_dim:
        raise ContractViolation(
            f"network has {params.arch.input_dim} inputs, {problem.name} needs {problem.input_dim}"
        )
    field = NetworkField(params)
    if spec.bc_mode is BoundaryMode.HARD_CONSTRAINT:
        return hard_bc_wrap(field, problem.domain)
    return field


# ---------------------------------------------------------------------------
# Energy terms
# ---------------------------------------------------------------------------

def regularizer_h1(field: Field, points: PointSet, spatial_dim: Optional[int] = None) -> torch.Tensor:
    """sum w |grad_x v|^2 (time derivative excluded for space-time points)"""
    points = _require_points(points, "regularizer")
    d = spatial_dim if spatial_dim is not None else field.input_dim
    grad = field.jet(points.points).grad[:, :d]
    return _weighted_sum(points.weights, (grad * grad).sum(dim=-1))


def initial_misfit(field: Field, problem: ProblemSpec, points: PointSet, norm: InitialNorm) -> torch.Tensor:
    """|v(., 0) - u0|^2 in L2 or in the H1 seminorm"""
    points = _require_points(points, "initial")
    d = problem.spatial_dim
    diff = TimeSliceField(field, 0.0, d).jet(points.points) - problem.u0.jet(points.points)
    if norm is InitialNorm.L2:
        integrand = diff.value * diff.value
    else:
        integrand = (diff.grad * diff.grad).sum(dim=-1)
    return _weighted_sum(points.weights, integrand)


def _check_scheme(problem: ProblemSpec, spec: EnergySpec, allowed: Sequence[Scheme]):
    if spec.scheme not in allowed:
        raise ContractViolation(f"scheme {spec.scheme.value} is not one of {[s.value for s in allowed]}")
    if problem.is_parabolic == (spec.scheme is Scheme.ELLIPTIC):
        raise ContractViolation(f"scheme {spec.scheme.value} does not fit problem {problem.name}")


def energy_elliptic(field: Field, problem: ProblemSpec, quad: QuadratureSet, spec: EnergySpec) -> torch.Tensor:
    _check_scheme(problem, spec, (Scheme.ELLIPTIC,))
    interior = _require_points(quad.interior, "interior")
    r = residual_elliptic(field, problem.operator, problem.f, interior.points)
    energy = _weighted_sum(interior.weights, r * r)
    if spec.uses_boundary_penalty:
        boundary = _require_points(quad.boundary, "boundary")
        v = field.value(boundary.points)
        energy = energy + spec.tau * _weighted_sum(boundary.weights, v * v)
    if spec.lam > 0:
        energy = energy + spec.lam * regularizer_h1(field, interior)
    return energy


def energy_parabolic_exact(
    field: Field, problem: ProblemSpec, quad: QuadratureSet, spec: EnergySpec
) -> torch.Tensor:
    """Space-time quadrature of (v_t + Lv - f)^2 plus the initial misfit"""
    _check_scheme(problem, spec, (Scheme.EXACT_TIME,))
    interior = _require_points(quad.interior, "space-time interior")
    r = residual_parabolic_exact(field, problem.operator, problem.f, interior.points)
    energy = _weighted_sum(interior.weights, r * r)
    if spec.mu > 0:
        energy = energy + spec.mu * initial_misfit(field, problem, quad.initial, spec.initial_norm)
    if spec.uses_boundary_penalty:
        boundary = _require_points(quad.boundary, "space-time boundary")
        v = field.value(boundary.points)
        energy = energy + spec.tau * _weighted_sum(boundary.weights, v * v)
    if spec.lam > 0:
        energy = energy + spec.lam * regularizer_h1(field, interior, problem.spatial_dim)
    return energy


def _shared_levels(
    field: Field, problem: ProblemSpec, grid: TimeGrid, quad: QuadratureSet, spec: EnergySpec
) -> torch.Tensor:
    interior = _require_points(quad.interior, "interior")
    d = problem.spatial_dim
    jets = evaluate_levels(field, interior.points, grid, d)
    rows = time_discrete_level_residuals(
        field, problem.operator, problem.f, interior.points, grid, spec.scheme, levels_jet=jets
    )
    steps = torch.tensor(grid.steps, dtype=DTYPE)
    energy = torch.sum(steps * ((rows * rows) @ interior.weights))
    if spec.lam > 0:
        grad = jets.grad[:, :d].reshape(grid.N + 1, interior.n_points, d)[1:]
        per_level = (grad * grad).sum(dim=-1) @ interior.weights
        energy = energy + spec.lam * torch.sum(steps * per_level)
    if spec.uses_boundary_penalty:
        boundary = _require_points(quad.boundary, "boundary")
        v = field.value(level_points(boundary.points, grid)).reshape(grid.N + 1, boundary.n_points)[1:]
        energy = energy + spec.tau * torch.sum(steps * ((v * v) @ boundary.weights))
    return energy


def _per_level(
    field: Field, problem: ProblemSpec, grid: TimeGrid, quads: Sequence[QuadratureSet], spec: EnergySpec
) -> torch.Tensor:
    if len(quads) != grid.N:
        raise ContractViolation(f"expected {grid.N} per-level point sets, got {len(quads)}")
    d = problem.spatial_dim
    terms: List[torch.Tensor] = []
    for n, quad in enumerate(quads, start=1):
        k = grid.steps[n - 1]
        interior = _require_points(quad.interior, f"level {n} interior")
        r = residual_time_discrete(
            field, problem.operator, problem.f, interior.points, grid, n, spec.scheme
        )
        term = _weighted_sum(interior.weights, r * r)
        level = TimeSliceField(field, grid.nodes[n], d)
        if spec.lam > 0:
            term = term + spec.lam * regularizer_h1(level, interior)
        if spec.uses_boundary_penalty:
            boundary = _require_points(quad.boundary, f"level {n} boundary")
            v = level.value(boundary.points)
            term = term + spec.tau * _weighted_sum(boundary.weights, v * v)
        terms.append(k * term)
    return torch.stack(terms).sum()


def energy_time_discrete(
    field: Field,
    problem: ProblemSpec,
    grid: TimeGrid,
    quad: Quadrature,
    spec: EnergySpec,
) -> torch.Tensor:
    """
    sum_n k_n sum_z w_z r_n(z)^2 + mu * initial misfit
        + tau * sum_n k_n sum_s w_s v(s, t^n)^2 + lambda * sum_n k_n J(v^n)

    quad is one spatial QuadratureSet reused at every level, or N sets
    (level n uses set n-1 at both t^n and t^{n-1}).
    """
    _check_scheme(problem, spec, (Scheme.IE, Scheme.EE))
    if grid.N < 1:
        raise ContractViolation("time grid has no steps")
    if isinstance(quad, QuadratureSet):
        energy = _shared_levels(field, problem, grid, quad, spec)
        first = quad
    else:
        energy = _per_level(field, problem, grid, quad, spec)
        first = quad[0]
    if spec.mu > 0:
        initial = first.initial if first.initial is not None else first.interior
        energy = energy + spec.mu * initial_misfit(field, problem, initial, spec.initial_norm)
    return energy


def evaluate_energy(
    field: Field,
    problem: ProblemSpec,
    spec: EnergySpec,
    quad: Quadrature,
    grid: Optional[TimeGrid] = None,
) -> torch.Tensor:
    if spec.scheme is Scheme.ELLIPTIC:
        return energy_elliptic(field, problem, quad, spec)
    if spec.scheme is Scheme.EXACT_TIME:
        return energy_parabolic_exact(field, problem, quad, spec)
    if grid is None:
        raise ContractViolation(f"scheme {spec.scheme.value} needs a time grid")
    return energy_time_discrete(field, problem, grid, quad, spec)


def assemble_energy(
    problem: ProblemSpec,
    spec: EnergySpec,
    quad: Quadrature,
    grid: Optional[TimeGrid] = None,
) -> Callable[[MlpParams], torch.Tensor]:
    """Energy evaluator params -> scalar tensor, with all points fixed"""
    if spec.scheme in (Scheme.IE, Scheme.EE) and grid is None:
        raise ContractViolation(f"scheme {spec.scheme.value} needs a time grid")

    def energy_eval(params: MlpParams) -> torch.Tensor:
        return evaluate_energy(build_field(params, problem, spec), problem, spec, quad, grid)

    return energy_eval

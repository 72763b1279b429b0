"""
Stability indicators and reference solutions

Provides:
- Quadrature Sobolev norms (L2, H1, H2 with the Frobenius Hessian)
- Time reconstructions of a nodal trajectory: piecewise linear U_hat and
  piecewise constant U_bar, and the indicators ||U_bar||_{L2 H2},
  ||U_hat'||_{L2 L2}
- The discrete maximal regularity identity on an SPD matrix operator
- A Crank-Nicolson finite-difference reference solver for 1D heat problems
- Error norms against exact solutions or finite-difference references
- DiagnosticsReport, the bundle logged at every training log event
"""

import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
import torch

from autodiff_core import DTYPE, ContractViolation, Jet2, as_points
from domains import Domain, Interval, PointSet, TimeGrid, UnitSquare, evaluation_points, grid_quadrature, make_time_grid
from operators_residuals import EllipticOperator, Field, TimeSliceField
from problems import ProblemSpec

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Quadrature norms
# ---------------------------------------------------------------------------

def _jet_norm_sq(jet: Jet2, weights: torch.Tensor, order: int) -> float:
    integrand = jet.value * jet.value
    if order >= 1:
        integrand = integrand + (jet.grad * jet.grad).sum(dim=-1)
    if order >= 2:
        integrand = integrand + (jet.hess * jet.hess).sum(dim=(-1, -2))
    return float(torch.sum(weights * integrand))


def _field_norm(field: Field, points: PointSet, order: int) -> float:
    with torch.no_grad():
        return math.sqrt(_jet_norm_sq(field.jet(points.points), points.weights, order))


def norm_l2(field: Field, points: PointSet) -> float:
    return _field_norm(field, points, 0)


def norm_h1(field: Field, points: PointSet) -> float:
    return _field_norm(field, points, 1)


def norm_h2(field: Field, points: PointSet) -> float:
    """sqrt of the quadrature of v^2 + |grad v|^2 + |hess v|_F^2"""
    return _field_norm(field, points, 2)


# ---------------------------------------------------------------------------
# Nodal trajectories and reconstructions
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NodalTrajectory:
    """Spatial fields U^0..U^N attached to the nodes of a time grid"""

    grid: TimeGrid
    levels: Tuple[Field, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if len(self.levels) != self.grid.N + 1:
            raise ContractViolation(f"expected {self.grid.N + 1} levels, got {len(self.levels)}")
        if len({lvl.input_dim for lvl in self.levels}) != 1:
            raise ContractViolation("all levels must share one spatial dimension")

    @classmethod
    def from_space_time_field(cls, field: Field, grid: TimeGrid, spatial_dim: int) -> "NodalTrajectory":
        return cls(grid, tuple(TimeSliceField(field, t, spatial_dim) for t in grid.nodes))

    @property
    def spatial_dim(self) -> int:
        return self.levels[0].input_dim


class Reconstruction(NamedTuple):
    hat_value: torch.Tensor
    hat_dt: torch.Tensor
    bar_jet: Jet2


def reconstruct(traj: NodalTrajectory, t: float, x) -> Reconstruction:
    """
    U_hat(t) = l0 U^{n-1} + l1 U^n, U_hat' = (U^n - U^{n-1}) / k_n and
    U_bar(t) = U^n for t in (t^{n-1}, t^n].
    """
    n = traj.grid.interval_index(t)
    pts = as_points(x, traj.spatial_dim)
    t_prev, t_now = traj.grid.nodes[n - 1], traj.grid.nodes[n]
    k = traj.grid.steps[n - 1]
    l0 = (t_now - t) / k
    l1 = (t - t_prev) / k
    with torch.no_grad():
        prev = traj.levels[n - 1].value(pts)
        bar = traj.levels[n].jet(pts)
    return Reconstruction(l0 * prev + l1 * bar.value, (bar.value - prev) / k, bar)


def parabolic_stability_indicators(
    traj: NodalTrajectory, op: EllipticOperator, points: PointSet
) -> Tuple[float, float]:
    """(||U_bar||_{L2(0,T;H2)}, ||U_hat'||_{L2(0,T;L2)}) by quadrature"""
    if op.dim != traj.spatial_dim:
        raise ContractViolation(f"operator acts in {op.dim} dimensions, levels in {traj.spatial_dim}")
    with torch.no_grad():
        jets = [lvl.jet(points.points) for lvl in traj.levels]
    h2_sq: List[float] = []
    dt_sq: List[float] = []
    for n, k in enumerate(traj.grid.steps, start=1):
        h2_sq.append(_jet_norm_sq(jets[n], points.weights, 2))
        quotient = (jets[n].value - jets[n - 1].value) / k
        dt_sq.append(float(torch.sum(points.weights * quotient * quotient)))
    return math.sqrt(traj.grid.integrate(h2_sq)), math.sqrt(traj.grid.integrate(dt_sq))


def sup_norm_by_level(traj: NodalTrajectory, points) -> List[float]:
    pts = as_points(points, traj.spatial_dim)
    with torch.no_grad():
        return [float(lvl.value(pts).abs().max()) for lvl in traj.levels]


# ---------------------------------------------------------------------------
# Discrete maximal regularity
# ---------------------------------------------------------------------------

class MaximalRegularityCheck(NamedTuple):
    identity_residual: float
    slack: float


def _check_spd(L: np.ndarray):
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ContractViolation(f"operator matrix must be square, got shape {L.shape}")
    scale = float(np.abs(L).max()) if L.size else 0.0
    if not np.allclose(L, L.T, rtol=0.0, atol=1e-14 * max(scale, 1.0)):
        raise ContractViolation("operator matrix is not symmetric")
    try:
        scipy.linalg.cholesky(L, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ContractViolation("operator matrix is not positive definite") from exc


def mr_identity_residual(
    levels: np.ndarray, L: np.ndarray, grid: Optional[TimeGrid] = None
) -> MaximalRegularityCheck:
    """
    Check sum_n k_n |D_n + L U^n|^2 against its expansion

        sum k_n |D_n|^2 + sum k_n |L U^n|^2 + <L U^N, U^N>
            + sum <L dU_n, dU_n> - <L U^0, U^0>

    with D_n = dU_n / k_n, dU_n = U^n - U^{n-1}, Euclidean inner product on
    nodal vectors. Returns the absolute identity residual and the slack
    sum k|D|^2 + sum k|LU|^2 - sum k|D + LU|^2 - <L U^0, U^0> (always <= 0).
    grid defaults to a uniform grid on [0, 1].
    """
    U = np.asarray(levels, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] < 2:
        raise ContractViolation(f"need an (N+1, m) array of levels with N >= 1, got shape {U.shape}")
    if L.shape != (U.shape[1], U.shape[1]):
        raise ContractViolation(f"operator of shape {L.shape} does not act on vectors of length {U.shape[1]}")
    _check_spd(L)
    if grid is None:
        grid = make_time_grid(1.0, U.shape[0] - 1)
    if grid.N != U.shape[0] - 1:
        raise ContractViolation(f"grid has {grid.N} steps, trajectory has {U.shape[0] - 1}")

    k = np.asarray(grid.steps)
    delta = np.diff(U, axis=0)
    D = delta / k[:, None]
    LU = U @ L.T
    dt_sq = float(np.sum(k * np.einsum("ni,ni->n", D, D)))
    op_sq = float(np.sum(k * np.einsum("ni,ni->n", LU[1:], LU[1:])))
    combined = D + LU[1:]
    combined_sq = float(np.sum(k * np.einsum("ni,ni->n", combined, combined)))
    end_term = float(LU[-1] @ U[-1])
    jumps = float(np.einsum("ni,ni->", delta @ L.T, delta))
    start_term = float(LU[0] @ U[0])

    expansion = dt_sq + op_sq + end_term + jumps - start_term
    return MaximalRegularityCheck(abs(expansion - combined_sq), dt_sq + op_sq - combined_sq - start_term)


def dirichlet_laplacian(domain: Domain, m: int, h: Optional[float] = None) -> np.ndarray:
    """
    SPD finite-difference matrix of -Laplace with homogeneous Dirichlet data
    on m interior nodes per axis; unscaled tridiag(-1, 2, -1) when h is
    None, divided by h^2 otherwise.
    """
    if m < 1:
        raise ContractViolation(f"need at least one interior node, got {m}")
    one_d = scipy.sparse.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(m, m))
    if isinstance(domain, Interval):
        L = one_d
    elif isinstance(domain, UnitSquare):
        eye = scipy.sparse.identity(m)
        L = scipy.sparse.kron(one_d, eye) + scipy.sparse.kron(eye, one_d)
    else:
        raise ContractViolation(f"no finite-difference Laplacian for {domain!r}")
    L = L.toarray()
    return L / (h * h) if h is not None else L


def fd_nodes(domain: Domain, m: int) -> np.ndarray:
    """Interior nodes i h, h = 1/(m+1), ordered as dirichlet_laplacian"""
    x = np.arange(1, m + 1) / (m + 1)
    if isinstance(domain, Interval):
        return x[:, None]
    xx, yy = np.meshgrid(x, x, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def fd_operator(op: EllipticOperator, domain: Domain, m: int) -> Optional[np.ndarray]:
    """Discrete L on the interior nodes; None for off-diagonal coefficients"""
    if not op.is_diagonal or not isinstance(domain, (Interval, UnitSquare)):
        return None
    h = 1.0 / (m + 1)
    one_d = dirichlet_laplacian(Interval(), m, h)
    a = np.diag(op.a.numpy())
    if domain.dim == 1:
        L = a[0] * one_d
    else:
        eye = np.eye(m)
        L = a[0] * np.kron(one_d, eye) + a[1] * np.kron(eye, one_d)
    return L + op.c * np.eye(L.shape[0])


# ---------------------------------------------------------------------------
# Finite-difference reference
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FDSolution:
    """Nodal values (n_t + 1, m + 2) on x (boundary nodes included) and t"""

    x: np.ndarray
    t: np.ndarray
    values: np.ndarray

    def at_time(self, t: float) -> np.ndarray:
        if not self.t[0] <= t <= self.t[-1]:
            raise ContractViolation(f"t = {t} outside the reference horizon [0, {self.t[-1]}]")
        j = int(np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, len(self.t) - 2))
        theta = (t - self.t[j]) / (self.t[j + 1] - self.t[j])
        return (1.0 - theta) * self.values[j] + theta * self.values[j + 1]

    def gradient_at_time(self, t: float) -> np.ndarray:
        return np.gradient(self.at_time(t), self.x, edge_order=2)


def fd_reference_heat(problem: ProblemSpec, m: int, n_t: int) -> FDSolution:
    """Crank-Nicolson on m interior nodes (h = 1/(m+1)) and n_t uniform steps"""
    if not problem.is_parabolic or not isinstance(problem.domain, Interval):
        raise ContractViolation(f"{problem.name}: the reference solver handles 1D heat problems only")
    if m < 1 or n_t < 1:
        raise ContractViolation(f"need m >= 1 and n_t >= 1, got m={m}, n_t={n_t}")
    a = float(problem.operator.a[0, 0])
    c = problem.operator.c
    h = 1.0 / (m + 1)
    x = np.linspace(0.0, 1.0, m + 2)
    t = np.linspace(0.0, problem.T, n_t + 1)
    k = problem.T / n_t

    A = (a / (h * h)) * scipy.sparse.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(m, m)) + c * scipy.sparse.identity(m)
    eye = scipy.sparse.identity(m)
    lu = scipy.sparse.linalg.splu((eye + 0.5 * k * A).tocsc())
    explicit = (eye - 0.5 * k * A).tocsr()

    interior = torch.as_tensor(x[1:-1, None], dtype=DTYPE)

    def source(time: float) -> np.ndarray:
        pts = torch.cat([interior, torch.full((m, 1), time, dtype=DTYPE)], dim=1)
        return problem.f(pts).numpy()

    values = np.zeros((n_t + 1, m + 2))
    with torch.no_grad():
        u = problem.u0.value(interior).numpy().copy()
        values[0, 1:-1] = u
        f_prev = source(t[0])
        for j in range(n_t):
            f_next = source(t[j + 1])
            u = lu.solve(explicit @ u + 0.5 * k * (f_prev + f_next))
            values[j + 1, 1:-1] = u
            f_prev = f_next
    logger.debug("finite-difference reference for %s: m=%d, n_t=%d", problem.name, m, n_t)
    return FDSolution(x, t, values)


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class ErrorNorms(NamedTuple):
    error_l2: float
    error_h1: float


Reference = Union[Field, FDSolution]


def error_norms(
    field: Field,
    reference: Reference,
    points: Optional[PointSet] = None,
    t: Optional[float] = None,
) -> ErrorNorms:
    """
    L2 norm and H1 seminorm of field - reference.

    Field references are compared on the given point set; an FDSolution is
    compared on its own nodes (trapezoid weights) at time t, with reference
    gradients by centred differences.
    """
    with torch.no_grad():
        if isinstance(reference, FDSolution):
            if t is None:
                raise ContractViolation("comparing against a finite-difference reference needs a time")
            x = torch.as_tensor(reference.x[:, None], dtype=DTYPE)
            jet = field.jet(x)
            weights = np.full(len(reference.x), reference.x[1] - reference.x[0])
            weights[[0, -1]] *= 0.5
            diff = jet.value.numpy() - reference.at_time(t)
            diff_grad = jet.grad[:, 0].numpy() - reference.gradient_at_time(t)
            return ErrorNorms(
                math.sqrt(float(np.sum(weights * diff * diff))),
                math.sqrt(float(np.sum(weights * diff_grad * diff_grad))),
            )
        if points is None:
            raise ContractViolation("comparing against a field needs a point set")
        diff = field.jet(points.points) - reference.jet(points.points)
        return ErrorNorms(
            math.sqrt(float(torch.sum(points.weights * diff.value * diff.value))),
            math.sqrt(float(torch.sum(points.weights * (diff.grad * diff.grad).sum(dim=-1)))),
        )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

NAN = float("nan")


@dataclass
class DiagnosticsReport:
    """Indicators at one log event; NaN marks quantities that do not apply"""

    h1_norm: float = NAN
    h2_norm: float = NAN
    l2h2_bar: float = NAN
    l2l2_hat_dt: float = NAN
    sup_norm: float = NAN
    sup_norm_by_level: Tuple[float, ...] = ()
    mr_identity_residual: float = NAN
    mr_slack: float = NAN
    error_l2: float = NAN
    error_h1: float = NAN
    rel_error_l2: float = NAN
    regularizer: float = NAN

    def as_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "sup_norm_by_level"}


@dataclass(frozen=True, eq=False)
class DiagnosticContext:
    """Everything diagnose needs that does not change during a run"""

    problem: ProblemSpec
    grid: Optional[TimeGrid]
    eval_points: PointSet
    sup_points: torch.Tensor
    reference: Optional[FDSolution] = None
    fd_m: int = 0
    fd_L: Optional[np.ndarray] = None
    u0_sup: float = 0.0

    @classmethod
    def build(
        cls,
        problem: ProblemSpec,
        grid: Optional[TimeGrid],
        n_eval: int = 201,
        fd_m: int = 32,
        reference_m: int = 200,
    ) -> "DiagnosticContext":
        domain = problem.domain
        n_axis = n_eval if domain.dim == 1 else max(int(round(math.sqrt(n_eval))), 2)
        eval_points = grid_quadrature(domain, n_eval)
        sup_points = evaluation_points(domain, n_axis)
        reference = None
        fd_L = None
        u0_sup = 0.0
        if problem.is_parabolic:
            if grid is None:
                raise ContractViolation(f"{problem.name}: parabolic diagnostics need a time grid")
            with torch.no_grad():
                u0_sup = float(problem.u0.value(sup_points).abs().max())
            if problem.exact is None and isinstance(domain, Interval):
                steps_per_level = max(1, int(math.ceil(reference_m / grid.N)))
                reference = fd_reference_heat(problem, reference_m, grid.N * steps_per_level)
            if domain.dim == 2:
                fd_m = max(fd_m // 4, 4)
            fd_L = fd_operator(problem.operator, domain, fd_m)
        return cls(problem, grid, eval_points, sup_points, reference, fd_m, fd_L, u0_sup)


def _relative(error: float, norm: float) -> float:
    return error / norm if norm > 0 else NAN


def diagnose(field: Field, context: DiagnosticContext) -> DiagnosticsReport:
    problem = context.problem
    points = context.eval_points
    if not problem.is_parabolic:
        return _diagnose_elliptic(field, context)

    grid = context.grid
    d = problem.spatial_dim
    traj = NodalTrajectory.from_space_time_field(field, grid, d)
    l2h2, l2l2 = parabolic_stability_indicators(traj, problem.operator, points)
    sups = sup_norm_by_level(traj, context.sup_points)
    report = DiagnosticsReport(
        l2h2_bar=l2h2, l2l2_hat_dt=l2l2, sup_norm=max(sups), sup_norm_by_level=tuple(sups)
    )
    with torch.no_grad():
        report.regularizer = grid.integrate(
            [float(torch.sum(points.weights * (lvl.jet(points.points).grad ** 2).sum(-1))) for lvl in traj.levels[1:]]
        )

    if context.fd_L is not None:
        nodes = torch.as_tensor(fd_nodes(problem.domain, context.fd_m), dtype=DTYPE)
        with torch.no_grad():
            levels = np.stack([lvl.value(nodes).numpy() for lvl in traj.levels])
        if np.all(np.isfinite(levels)):
            check = mr_identity_residual(levels, context.fd_L, grid)
            report.mr_identity_residual, report.mr_slack = check.identity_residual, check.slack

    err_sq: List[float] = []
    h1_sq: List[float] = []
    ref_sq: List[float] = []
    for n in range(1, grid.N + 1):
        t = grid.nodes[n]
        level = traj.levels[n]
        if problem.exact is not None:
            exact = TimeSliceField(problem.exact, t, d)
            errors = error_norms(level, exact, points)
            ref_sq.append(norm_l2(exact, points) ** 2)
        elif context.reference is not None:
            errors = error_norms(level, context.reference, t=t)
            ref_values = context.reference.at_time(t)
            weights = np.full(len(ref_values), context.reference.x[1] - context.reference.x[0])
            weights[[0, -1]] *= 0.5
            ref_sq.append(float(np.sum(weights * ref_values * ref_values)))
        else:
            return report
        err_sq.append(errors.error_l2 ** 2)
        h1_sq.append(errors.error_h1 ** 2)
    report.error_l2 = math.sqrt(grid.integrate(err_sq))
    report.error_h1 = math.sqrt(grid.integrate(h1_sq))
    report.rel_error_l2 = _relative(report.error_l2, math.sqrt(grid.integrate(ref_sq)))
    return report


def _diagnose_elliptic(field: Field, context: DiagnosticContext) -> DiagnosticsReport:
    problem = context.problem
    points = context.eval_points
    with torch.no_grad():
        jet = field.jet(points.points)
        sup = float(field.value(context.sup_points).abs().max())
    report = DiagnosticsReport(
        h1_norm=math.sqrt(_jet_norm_sq(jet, points.weights, 1)),
        h2_norm=math.sqrt(_jet_norm_sq(jet, points.weights, 2)),
        sup_norm=sup,
        regularizer=float(torch.sum(points.weights * (jet.grad * jet.grad).sum(-1))),
    )
    if problem.exact is not None:
        errors = error_norms(field, problem.exact, points)
        report.error_l2, report.error_h1 = errors
        report.rel_error_l2 = _relative(errors.error_l2, norm_l2(problem.exact, points))
    return report

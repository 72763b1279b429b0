"""
Elliptic operators, fields and pointwise strong-form residuals

L u = -sum_ij a_ij u_{x_i x_j} + c u with constant SPD a and c >= 0.

Fields are anything that can produce a Jet2 at a batch of points:
- NetworkField: a dense network given by MlpParams
- AnalyticField: closed-form value / gradient / Hessian callables
- LinearCombinationField: sum_i alpha_i u_i
- TimeSliceField: a space-time field frozen at a time t

Space-time points are stored as (x_1, ..., x_d, t), time last.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from dataclasses import field as dataclass_field
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import torch

from autodiff_core import DTYPE, ContractViolation, Jet2, MlpParams, as_points, mlp_forward, mlp_jet
from domains import TimeGrid

logger = logging.getLogger(__name__)

SourceFn = Callable[[torch.Tensor], torch.Tensor]


class Scheme(Enum):
    """Which functional is assembled"""

    ELLIPTIC = "elliptic"
    EXACT_TIME = "exact"
    IE = "ie"
    EE = "ee"


@dataclass(frozen=True, eq=False)
class EllipticOperator:
    """Constant coefficient matrix a (symmetric positive definite) and reaction c"""

    a: torch.Tensor
    c: float = 0.0
    theta: float = dataclass_field(init=False)

    def __post_init__(self):
        a = torch.as_tensor(self.a, dtype=DTYPE)
        if a.dim() != 2 or a.shape[0] != a.shape[1]:
            raise ContractViolation(f"coefficient matrix must be square, got shape {tuple(a.shape)}")
        if not torch.equal(a, a.T):
            raise ContractViolation("coefficient matrix must be symmetric")
        theta = float(torch.linalg.eigvalsh(a).min())
        if theta <= 0:
            raise ContractViolation(f"coefficient matrix is not positive definite (min eigenvalue {theta})")
        if self.c < 0:
            raise ContractViolation(f"reaction coefficient must be >= 0, got {self.c}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "theta", theta)

    @classmethod
    def laplacian(cls, dim: int, c: float = 0.0) -> "EllipticOperator":
        return cls(torch.eye(dim, dtype=DTYPE), c)

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return bool(torch.equal(self.a, torch.diag(torch.diagonal(self.a))))

    def __repr__(self) -> str:
        return f"EllipticOperator(a={self.a.tolist()}, c={self.c})"


def apply_L(op: EllipticOperator, jet: Jet2) -> torch.Tensor:
    """-sum_ij a_ij hess_ij + c value, one entry per point"""
    if jet.dim != op.dim:
        raise ContractViolation(f"operator acts in {op.dim} dimensions, jet has {jet.dim}")
    return -torch.einsum("ij,nij->n", op.a, jet.hess) + op.c * jet.value


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

class Field(ABC):
    """Scalar field evaluated as jets at batches of points"""

    def __init__(self, input_dim: int):
        self.input_dim = input_dim

    @abstractmethod
    def jet(self, points) -> Jet2:
        pass

    def value(self, points) -> torch.Tensor:
        return self.jet(points).value

    def __call__(self, points) -> Jet2:
        return self.jet(points)

    def _points(self, points) -> torch.Tensor:
        return as_points(points, self.input_dim)


class NetworkField(Field):
    def __init__(self, params: MlpParams):
        super().__init__(params.arch.input_dim)
        self.params = params

    def jet(self, points) -> Jet2:
        return mlp_jet(self.params, self._points(points))

    def value(self, points) -> torch.Tensor:
        return mlp_forward(self.params, self._points(points))


class AnalyticField(Field):
    """
    Field given by closed-form callables on (n, d) point tensors:
    value_fn -> (n,), grad_fn -> (n, d), hess_fn -> (n, d, d).
    """

    def __init__(
        self,
        input_dim: int,
        value_fn: Callable[[torch.Tensor], torch.Tensor],
        grad_fn: Callable[[torch.Tensor], torch.Tensor],
        hess_fn: Callable[[torch.Tensor], torch.Tensor],
        name: str = "analytic",
    ):
        super().__init__(input_dim)
        self.value_fn = value_fn
        self.grad_fn = grad_fn
        self.hess_fn = hess_fn
        self.name = name

    def jet(self, points) -> Jet2:
        pts = self._points(points)
        return Jet2(self.value_fn(pts), self.grad_fn(pts), self.hess_fn(pts))

    def value(self, points) -> torch.Tensor:
        return self.value_fn(self._points(points))

    def __repr__(self) -> str:
        return f"AnalyticField({self.name!r}, dim={self.input_dim})"


class JetField(Field):
    """Field defined by a function returning the full jet at once"""

    def __init__(self, input_dim: int, jet_fn: Callable[[torch.Tensor], Jet2], name: str = "jet"):
        super().__init__(input_dim)
        self.jet_fn = jet_fn
        self.name = name

    def jet(self, points) -> Jet2:
        return self.jet_fn(self._points(points))


class LinearCombinationField(Field):
    def __init__(self, terms: Sequence[Tuple[float, Field]]):
        if not terms:
            raise ContractViolation("linear combination needs at least one term")
        dims = {f.input_dim for _, f in terms}
        if len(dims) != 1:
            raise ContractViolation(f"fields of different dimensions cannot be combined: {sorted(dims)}")
        super().__init__(dims.pop())
        self.terms = tuple((float(alpha), f) for alpha, f in terms)

    def jet(self, points) -> Jet2:
        pts = self._points(points)
        result: Optional[Jet2] = None
        for alpha, f in self.terms:
            term = alpha * f.jet(pts)
            result = term if result is None else result + term
        return result


class TimeSliceField(Field):
    """x -> v(x, t) for a space-time field v; jets cover the spatial block only"""

    def __init__(self, field: Field, t: float, spatial_dim: int):
        if field.input_dim != spatial_dim + 1:
            raise ContractViolation(
                f"time slice needs a {spatial_dim + 1}-dimensional field, got {field.input_dim}"
            )
        super().__init__(spatial_dim)
        self.field = field
        self.t = float(t)

    def _space_time(self, points) -> torch.Tensor:
        return with_time(self._points(points), self.t)

    def jet(self, points) -> Jet2:
        return self.field.jet(self._space_time(points)).restrict(self.input_dim)

    def value(self, points) -> torch.Tensor:
        return self.field.value(self._space_time(points))


def with_time(points: torch.Tensor, t: float) -> torch.Tensor:
    """Append a constant time column to spatial points"""
    return torch.cat([points, torch.full((points.shape[0], 1), float(t), dtype=DTYPE)], dim=1)


# ---------------------------------------------------------------------------
# Residuals
# ---------------------------------------------------------------------------

def residual_elliptic(field: Field, op: EllipticOperator, f: SourceFn, x) -> torch.Tensor:
    """L v - f at each point"""
    if field.input_dim != op.dim:
        raise ContractViolation(f"field has {field.input_dim} inputs, operator acts in {op.dim}")
    pts = as_points(x, op.dim)
    return apply_L(op, field.jet(pts)) - f(pts)


def residual_parabolic_exact(field: Field, op: EllipticOperator, f: SourceFn, points) -> torch.Tensor:
    """v_t + L v - f at space-time points; L sees the spatial Hessian block"""
    if field.input_dim != op.dim + 1:
        raise ContractViolation(
            f"space-time field must have {op.dim + 1} inputs, got {field.input_dim}"
        )
    pts = as_points(points, op.dim + 1)
    jet = field.jet(pts)
    return jet.grad[:, -1] + apply_L(op, jet.restrict(op.dim)) - f(pts)


def _check_discrete(field: Field, op: EllipticOperator, scheme: Scheme):
    if scheme not in (Scheme.IE, Scheme.EE):
        raise ContractViolation(f"time-discrete residuals need scheme IE or EE, got {scheme}")
    if field.input_dim != op.dim + 1:
        raise ContractViolation(
            f"space-time field must have {op.dim + 1} inputs, got {field.input_dim}"
        )


def residual_time_discrete(
    field: Field,
    op: EllipticOperator,
    f: SourceFn,
    x,
    grid: TimeGrid,
    n: int,
    scheme: Scheme,
) -> torch.Tensor:
    """
    IE: (v^n - v^{n-1}) / k_n + L v^n - f^n
    EE: (v^n - v^{n-1}) / k_n + L v^{n-1} - f^{n-1}
    """
    _check_discrete(field, op, scheme)
    if not 1 <= n <= grid.N:
        raise ContractViolation(f"step index {n} outside 1..{grid.N}")
    pts = as_points(x, op.dim)
    now = with_time(pts, grid.nodes[n])
    prev = with_time(pts, grid.nodes[n - 1])
    jet_now = field.jet(now)
    jet_prev = field.jet(prev)
    quotient = (jet_now.value - jet_prev.value) / grid.steps[n - 1]
    if scheme is Scheme.IE:
        return quotient + apply_L(op, jet_now.restrict(op.dim)) - f(now)
    return quotient + apply_L(op, jet_prev.restrict(op.dim)) - f(prev)


def level_points(x: torch.Tensor, grid: TimeGrid) -> torch.Tensor:
    """Spatial points repeated at every node t^0..t^N, level-major"""
    n_pts = x.shape[0]
    times = torch.tensor(grid.nodes, dtype=DTYPE).repeat_interleave(n_pts)
    return torch.cat([x.repeat(grid.N + 1, 1), times[:, None]], dim=1)


def evaluate_levels(field: Field, x, grid: TimeGrid, spatial_dim: int) -> Jet2:
    """One batched jet evaluation of v(x, t^n) for all n and all points"""
    return field.jet(level_points(as_points(x, spatial_dim), grid))


def time_discrete_level_residuals(
    field: Field,
    op: EllipticOperator,
    f: SourceFn,
    x,
    grid: TimeGrid,
    scheme: Scheme,
    levels_jet: Optional[Jet2] = None,
) -> torch.Tensor:
    """
    Residual rows r_n(x) for n = 1..N, shape (N, n_points), from a single
    batched evaluation at all levels (or a precomputed evaluate_levels jet).
    """
    _check_discrete(field, op, scheme)
    pts = as_points(x, op.dim)
    n_pts = pts.shape[0]
    stacked = level_points(pts, grid)
    if levels_jet is None:
        levels_jet = field.jet(stacked)
    shape = (grid.N + 1, n_pts)
    values = levels_jet.value.reshape(shape)
    lv = apply_L(op, levels_jet.restrict(op.dim)).reshape(shape)
    fv = f(stacked).reshape(shape)
    steps = torch.tensor(grid.steps, dtype=DTYPE)[:, None]
    quotient = (values[1:] - values[:-1]) / steps
    if scheme is Scheme.IE:
        return quotient + lv[1:] - fv[1:]
    return quotient + lv[:-1] - fv[:-1]

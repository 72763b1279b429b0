"""
Model problems with homogeneous Dirichlet boundary data

- Elliptic:  L u = f in Omega, u = 0 on the boundary
- Parabolic: u_t + L u = f in Omega x (0, T], u = 0 on the boundary, u(0) = u0

Bundled problems are looked up by name through ProblemFactory. Where an
exact solution is known it is carried as an analytic field with closed-form
jets; the data f are manufactured from it.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import torch

from autodiff_core import DTYPE, ContractViolation, Jet2
from domains import Domain, Interval, LShape, UnitSquare
from operators_residuals import (
    AnalyticField,
    EllipticOperator,
    Field,
    JetField,
    SourceFn,
    apply_L,
)

logger = logging.getLogger(__name__)

PI = math.pi


def zero_source(points: torch.Tensor) -> torch.Tensor:
    return torch.zeros(points.shape[0], dtype=DTYPE)


def constant_source(value: float) -> SourceFn:
    def source(points: torch.Tensor) -> torch.Tensor:
        return torch.full((points.shape[0],), float(value), dtype=DTYPE)

    return source


class ZeroField(Field):
    def jet(self, points) -> Jet2:
        pts = self._points(points)
        return Jet2.constant(torch.zeros(pts.shape[0], dtype=DTYPE), self.input_dim)


class SineProductField(Field):
    """
    u(x, t) = exp(-rate t) prod_i sin(pi x_i)

    With rate=None the field is purely spatial (no time input).
    """

    def __init__(self, spatial_dim: int, rate: Optional[float] = None):
        super().__init__(spatial_dim if rate is None else spatial_dim + 1)
        self.spatial_dim = spatial_dim
        self.rate = rate

    def jet(self, points) -> Jet2:
        pts = self._points(points)
        d = self.spatial_dim
        s = torch.sin(PI * pts[:, :d])
        c = torch.cos(PI * pts[:, :d])
        decay = torch.ones(pts.shape[0], dtype=DTYPE)
        if self.rate is not None:
            decay = torch.exp(-self.rate * pts[:, d])

        def product(skip: tuple) -> torch.Tensor:
            out = decay
            for j in range(d):
                if j not in skip:
                    out = out * s[:, j]
            return out

        value = product(())
        grad: List[torch.Tensor] = [PI * c[:, i] * product((i,)) for i in range(d)]
        rows: List[List[torch.Tensor]] = [[None] * self.input_dim for _ in range(self.input_dim)]
        for i in range(d):
            rows[i][i] = -(PI * PI) * value
            for j in range(i + 1, d):
                rows[i][j] = rows[j][i] = (PI * PI) * c[:, i] * c[:, j] * product((i, j))
        if self.rate is not None:
            r = self.rate
            grad.append(-r * value)
            for i in range(d):
                rows[i][d] = rows[d][i] = -r * grad[i]
            rows[d][d] = (r * r) * value
        hess = torch.stack([torch.stack(row, dim=-1) for row in rows], dim=-2)
        return Jet2(value, torch.stack(grad, dim=-1), hess)


def linear_time_sine_field() -> AnalyticField:
    """u(x, t) = t sin(pi x)"""

    def value(p):
        return p[:, 1] * torch.sin(PI * p[:, 0])

    def grad(p):
        return torch.stack([PI * p[:, 1] * torch.cos(PI * p[:, 0]), torch.sin(PI * p[:, 0])], dim=-1)

    def hess(p):
        xx = -(PI * PI) * p[:, 1] * torch.sin(PI * p[:, 0])
        xt = PI * torch.cos(PI * p[:, 0])
        return torch.stack(
            [torch.stack([xx, xt], dim=-1), torch.stack([xt, torch.zeros_like(xt)], dim=-1)], dim=-2
        )

    return AnalyticField(2, value, grad, hess, name="t*sin(pi x)")


def bump_field() -> AnalyticField:
    """u0(x) = x (1 - x) (1 + 2 sin(3 pi x)), sign-changing"""

    def parts(p):
        x = p[:, 0]
        q = x * (1.0 - x)
        dq = 1.0 - 2.0 * x
        s = 1.0 + 2.0 * torch.sin(3 * PI * x)
        ds = 6 * PI * torch.cos(3 * PI * x)
        dds = -18 * PI * PI * torch.sin(3 * PI * x)
        return q, dq, s, ds, dds

    def value(p):
        q, _, s, _, _ = parts(p)
        return q * s

    def grad(p):
        q, dq, s, ds, _ = parts(p)
        return (dq * s + q * ds)[:, None]

    def hess(p):
        q, dq, s, ds, dds = parts(p)
        return (-2.0 * s + 2.0 * dq * ds + q * dds)[:, None, None]

    return AnalyticField(1, value, grad, hess, name="bump")


def singular_harmonic_field(alpha: float = 2.0 / 3.0, corner=(0.5, 0.5)) -> AnalyticField:
    """
    r^alpha sin(alpha phi) about the L-shape's re-entrant corner, with phi
    measured from the notch edge {x = 1/2, y > 1/2} through the domain.

    Harmonic away from the corner and zero on both edges meeting there;
    its Hessian is not square integrable near the corner for alpha < 1.
    """
    cx, cy = corner

    def polar(p):
        dx = p[:, 0] - cx
        dy = p[:, 1] - cy
        r = torch.sqrt(dx * dx + dy * dy)
        phi = torch.remainder(torch.atan2(dy, dx) - PI / 2, 2 * PI)
        return r, phi

    def value(p):
        r, phi = polar(p)
        return r ** alpha * torch.sin(alpha * phi)

    def grad(p):
        r, phi = polar(p)
        scale = alpha * r ** (alpha - 1)
        return torch.stack(
            [-scale * torch.cos((alpha - 1) * phi), scale * torch.sin((alpha - 1) * phi)], dim=-1
        )

    def hess(p):
        r, phi = polar(p)
        scale = alpha * (alpha - 1) * r ** (alpha - 2)
        xx = -scale * torch.sin((alpha - 2) * phi)
        xy = -scale * torch.cos((alpha - 2) * phi)
        return torch.stack([torch.stack([xx, xy], dim=-1), torch.stack([xy, -xx], dim=-1)], dim=-2)

    return AnalyticField(2, value, grad, hess, name="singular-harmonic")


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """
    Domain, operator and data of one model problem.

    T is None for elliptic problems; parabolic problems carry u0 and T > 0.
    exact, when present, is a field over space (elliptic) or space-time.
    """

    name: str
    domain: Domain
    operator: EllipticOperator
    f: SourceFn
    u0: Optional[Field] = None
    exact: Optional[Field] = None
    T: Optional[float] = None
    description: str = ""

    def __post_init__(self):
        if self.operator.dim != self.domain.dim:
            raise ContractViolation(
                f"{self.name}: operator dimension {self.operator.dim} != domain dimension {self.domain.dim}"
            )
        if self.T is not None:
            if self.T <= 0:
                raise ContractViolation(f"{self.name}: horizon must be positive, got {self.T}")
            if self.u0 is None or self.u0.input_dim != self.domain.dim:
                raise ContractViolation(f"{self.name}: parabolic problems need a spatial initial datum")
        if self.exact is not None and self.exact.input_dim != self.input_dim:
            raise ContractViolation(
                f"{self.name}: exact solution has {self.exact.input_dim} inputs, expected {self.input_dim}"
            )

    @property
    def is_parabolic(self) -> bool:
        return self.T is not None

    @property
    def spatial_dim(self) -> int:
        return self.domain.dim

    @property
    def input_dim(self) -> int:
        return self.domain.dim + (1 if self.is_parabolic else 0)

    def with_horizon(self, T: float) -> "ProblemSpec":
        if not self.is_parabolic:
            raise ContractViolation(f"{self.name} is elliptic and has no time horizon")
        return dataclasses.replace(self, T=float(T))


def _elliptic_sin() -> ProblemSpec:
    def f(p):
        return (PI * PI) * torch.sin(PI * p[:, 0])

    return ProblemSpec(
        "elliptic-sin", Interval(), EllipticOperator.laplacian(1), f,
        exact=SineProductField(1), description="-u'' = pi^2 sin(pi x) on (0, 1)",
    )


def _elliptic_square() -> ProblemSpec:
    op = EllipticOperator(torch.tensor([[2.0, 0.5], [0.5, 1.0]], dtype=DTYPE), c=1.0)
    a11, a12, a22 = 2.0, 0.5, 1.0

    def f(p):
        sx, sy = torch.sin(PI * p[:, 0]), torch.sin(PI * p[:, 1])
        cx, cy = torch.cos(PI * p[:, 0]), torch.cos(PI * p[:, 1])
        return (PI * PI * (a11 + a22) + op.c) * sx * sy - 2 * a12 * PI * PI * cx * cy

    return ProblemSpec(
        "elliptic-square", UnitSquare(), op, f, exact=SineProductField(2),
        description="anisotropic operator on the unit square, u = sin(pi x) sin(pi y)",
    )


def lshape_smooth_jet(points) -> Jet2:
    """x(1-x)y(1-y) phi^2 with phi the notch R-function; H^2 on the L-shape"""
    domain = LShape()
    notch = domain.notch_jet(points)
    return UnitSquare().cutoff_jet(points) * (notch * notch)


def _elliptic_lshape() -> ProblemSpec:
    domain = LShape()
    op = EllipticOperator.laplacian(2)
    exact = JetField(2, lshape_smooth_jet, name="lshape-smooth")

    def f(p):
        return apply_L(op, lshape_smooth_jet(p))

    return ProblemSpec(
        "elliptic-lshape", domain, op, f, exact=exact,
        description="-Laplace u = f on the L-shape, u = x(1-x)y(1-y) phi^2 with phi zero on the notch edges",
    )


def _heat_sin() -> ProblemSpec:
    return ProblemSpec(
        "heat-sin", Interval(), EllipticOperator.laplacian(1), zero_source,
        u0=SineProductField(1), exact=SineProductField(1, rate=PI * PI), T=1.0,
        description="u_t = u_xx, u0 = sin(pi x)",
    )


def _heat_bump() -> ProblemSpec:
    return ProblemSpec(
        "heat-bump", Interval(), EllipticOperator.laplacian(1), zero_source,
        u0=bump_field(), T=1.0,
        description="u_t = u_xx, u0 = x(1-x)(1 + 2 sin(3 pi x)); reference by finite differences",
    )


def _heat_forced() -> ProblemSpec:
    def f(p):
        return (1.0 + PI * PI * p[:, 1]) * torch.sin(PI * p[:, 0])

    return ProblemSpec(
        "heat-forced", Interval(), EllipticOperator.laplacian(1), f,
        u0=ZeroField(1), exact=linear_time_sine_field(), T=1.0,
        description="u_t = u_xx + (1 + pi^2 t) sin(pi x), u = t sin(pi x)",
    )


def _heat_square() -> ProblemSpec:
    return ProblemSpec(
        "heat-square", UnitSquare(), EllipticOperator.laplacian(2), zero_source,
        u0=SineProductField(2), exact=SineProductField(2, rate=2 * PI * PI), T=1.0,
        description="u_t = Laplace u on the unit square, u0 = sin(pi x) sin(pi y)",
    )


class ProblemFactory:
    """Factory for the bundled model problems"""

    _builders: Dict[str, Callable[[], ProblemSpec]] = {
        "elliptic-sin": _elliptic_sin,
        "elliptic-square": _elliptic_square,
        "elliptic-lshape": _elliptic_lshape,
        "heat-sin": _heat_sin,
        "heat-bump": _heat_bump,
        "heat-forced": _heat_forced,
        "heat-square": _heat_square,
    }

    @classmethod
    def names(cls) -> List[str]:
        return list(cls._builders)

    @classmethod
    def get_all_problems(cls) -> List[ProblemSpec]:
        return [build() for build in cls._builders.values()]

    @classmethod
    def get_problem_by_name(cls, name: str) -> ProblemSpec:
        if name not in cls._builders:
            raise ContractViolation(f"Unknown problem: {name}. Available: {cls.names()}")
        return cls._builders[name]()

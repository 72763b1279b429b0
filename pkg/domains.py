"""
Spatial domains, quadrature point sets and time grids

Supported domains:
- Interval: Omega = (0, 1)
- UnitSquare: Omega = (0, 1)^2
- LShape: (0, 1)^2 minus the closed quadrant [1/2, 1]^2

Every domain knows its measure, its boundary measure, a membership test, a
boundary cutoff g (g = 0 on the boundary, g > 0 inside) given as a product of
affine factors (times an R-function for the L-shape notch), and how to draw
interior and boundary samples from a numpy Generator. Sampling is
deterministic given the generator state.
"""

import bisect
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from autodiff_core import DTYPE, ContractViolation, Jet2, as_points

logger = logging.getLogger(__name__)

Edge = Tuple[Tuple[float, float], Tuple[float, float]]


@dataclass(frozen=True, eq=False)
class PointSet:
    """Points (n, d) with quadrature weights (n,)"""

    points: torch.Tensor
    weights: torch.Tensor

    def __post_init__(self):
        if self.points.dim() != 2 or self.weights.dim() != 1:
            raise ContractViolation("point set needs (n, d) points and (n,) weights")
        if self.points.shape[0] != self.weights.shape[0]:
            raise ContractViolation(
                f"{self.points.shape[0]} points but {self.weights.shape[0]} weights"
            )

    @classmethod
    def from_numpy(cls, points: np.ndarray, weights: np.ndarray) -> "PointSet":
        return cls(
            torch.as_tensor(np.asarray(points, dtype=np.float64), dtype=DTYPE),
            torch.as_tensor(np.asarray(weights, dtype=np.float64), dtype=DTYPE),
        )

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def total_weight(self) -> float:
        return math.fsum(self.weights.tolist())


@dataclass(frozen=True, eq=False)
class QuadratureSet:
    """Interior, boundary and initial-time point sets used by one energy"""

    interior: PointSet
    boundary: Optional[PointSet] = None
    initial: Optional[PointSet] = None


class Domain(ABC):
    """Bounded Lipschitz domain in R^d"""

    name: str = ""
    dim: int = 0

    @property
    @abstractmethod
    def measure(self) -> float:
        pass

    @property
    @abstractmethod
    def boundary_measure(self) -> float:
        pass

    @abstractmethod
    def contains(self, points: np.ndarray) -> np.ndarray:
        """Membership in the closed domain, one bool per point"""
        pass

    @abstractmethod
    def cutoff_factors(self) -> List[Tuple[np.ndarray, float]]:
        """Affine factors (a, c), each a.x + c, whose product is the cutoff"""
        pass

    @abstractmethod
    def draw_interior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        pass

    @abstractmethod
    def draw_boundary(self, n: int, rng: np.random.Generator) -> np.ndarray:
        pass

    @abstractmethod
    def grid(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Deterministic quadrature with about n nodes: (points, weights)"""
        pass

    @abstractmethod
    def evaluation_grid(self, n_x: int) -> np.ndarray:
        pass

    def cutoff_jet(self, points) -> Jet2:
        pts = as_points(points, self.dim)
        n = pts.shape[0]
        jet: Optional[Jet2] = None
        for coef, offset in self.cutoff_factors():
            a = torch.as_tensor(coef, dtype=DTYPE)
            factor = Jet2(
                pts @ a + offset,
                a.expand(n, self.dim).clone(),
                torch.zeros((n, self.dim, self.dim), dtype=DTYPE),
            )
            jet = factor if jet is None else jet * factor
        return jet

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


def _sample_polygon_boundary(edges: Sequence[Edge], n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform arc-length sampling on a closed polygonal boundary"""
    starts = np.array([e[0] for e in edges], dtype=np.float64)
    ends = np.array([e[1] for e in edges], dtype=np.float64)
    lengths = np.linalg.norm(ends - starts, axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    s = rng.uniform(0.0, cumulative[-1], size=n)
    idx = np.clip(np.searchsorted(cumulative, s, side="right") - 1, 0, len(edges) - 1)
    fraction = ((s - cumulative[idx]) / lengths[idx])[:, None]
    return starts[idx] + fraction * (ends[idx] - starts[idx])


def _trapezoid_1d(m: int) -> Tuple[np.ndarray, np.ndarray]:
    if m < 2:
        raise ContractViolation(f"trapezoid rule needs at least 2 nodes, got {m}")
    nodes = np.linspace(0.0, 1.0, m)
    weights = np.full(m, 1.0 / (m - 1))
    weights[[0, -1]] *= 0.5
    return nodes, weights


class Interval(Domain):
    name = "interval"
    dim = 1

    @property
    def measure(self) -> float:
        return 1.0

    @property
    def boundary_measure(self) -> float:
        # counting measure on {0, 1}
        return 2.0

    def contains(self, points):
        x = np.asarray(points, dtype=np.float64).reshape(-1, 1)[:, 0]
        return (x >= 0.0) & (x <= 1.0)

    def cutoff_factors(self):
        return [(np.array([1.0]), 0.0), (np.array([-1.0]), 1.0)]

    def draw_interior(self, n, rng):
        return rng.random((n, 1))

    def draw_boundary(self, n, rng):
        # both endpoints, whatever n is
        return np.array([[0.0], [1.0]])

    def grid(self, n):
        nodes, weights = _trapezoid_1d(max(n, 2))
        return nodes[:, None], weights

    def evaluation_grid(self, n_x):
        return np.linspace(0.0, 1.0, n_x)[:, None]


class UnitSquare(Domain):
    name = "square"
    dim = 2
    EDGES: Tuple[Edge, ...] = (
        ((0.0, 0.0), (1.0, 0.0)),
        ((1.0, 0.0), (1.0, 1.0)),
        ((1.0, 1.0), (0.0, 1.0)),
        ((0.0, 1.0), (0.0, 0.0)),
    )

    @property
    def measure(self) -> float:
        return 1.0

    @property
    def boundary_measure(self) -> float:
        return 4.0

    def contains(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return np.all((p >= 0.0) & (p <= 1.0), axis=1)

    def cutoff_factors(self):
        return [
            (np.array([1.0, 0.0]), 0.0),
            (np.array([-1.0, 0.0]), 1.0),
            (np.array([0.0, 1.0]), 0.0),
            (np.array([0.0, -1.0]), 1.0),
        ]

    def draw_interior(self, n, rng):
        return rng.random((n, 2))

    def draw_boundary(self, n, rng):
        return _sample_polygon_boundary(self.EDGES, n, rng)

    def grid(self, n):
        m = max(int(round(math.sqrt(n))), 2)
        nodes, weights = _trapezoid_1d(m)
        xx, yy = np.meshgrid(nodes, nodes, indexing="ij")
        ww = np.outer(weights, weights)
        return np.column_stack([xx.ravel(), yy.ravel()]), ww.ravel()

    def evaluation_grid(self, n_x):
        nodes = np.linspace(0.0, 1.0, n_x)
        xx, yy = np.meshgrid(nodes, nodes, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])


class LShape(Domain):
    """
    (0, 1)^2 with the quadrant [1/2, 1]^2 removed; re-entrant corner at (1/2, 1/2)

    The cutoff is x(1-x)y(1-y) times the R-disjunction
    phi = a + b + sqrt(a^2 + b^2), a = 1/2 - x, b = 1/2 - y, which is
    positive where a > 0 or b > 0 and zero exactly on the two notch edges.
    phi is not differentiable at the corner itself; its jet there is taken
    with zero Hessian.
    """

    name = "lshape"
    dim = 2
    EDGES: Tuple[Edge, ...] = (
        ((0.0, 0.0), (1.0, 0.0)),
        ((1.0, 0.0), (1.0, 0.5)),
        ((1.0, 0.5), (0.5, 0.5)),
        ((0.5, 0.5), (0.5, 1.0)),
        ((0.5, 1.0), (0.0, 1.0)),
        ((0.0, 1.0), (0.0, 0.0)),
    )
    CORNER = (0.5, 0.5)

    @property
    def measure(self) -> float:
        return 0.75

    @property
    def boundary_measure(self) -> float:
        return 4.0

    def contains(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        in_square = np.all((p >= 0.0) & (p <= 1.0), axis=1)
        in_notch = (p[:, 0] > 0.5) & (p[:, 1] > 0.5)
        return in_square & ~in_notch

    def cutoff_factors(self):
        return UnitSquare().cutoff_factors()

    def notch_jet(self, points) -> Jet2:
        """phi = a + b + |(a, b)|, zero on {x = 1/2, y >= 1/2} and {y = 1/2, x >= 1/2}"""
        pts = as_points(points, self.dim)
        n = pts.shape[0]
        a = self.CORNER[0] - pts[:, 0]
        b = self.CORNER[1] - pts[:, 1]
        s = torch.sqrt(a * a + b * b)
        at_corner = s == 0
        safe = torch.where(at_corner, torch.ones_like(s), s)
        # gradient of s is (p - corner) / s, zero at the corner
        unit = torch.stack([-a, -b], dim=1) / safe[:, None]
        eye = torch.eye(2, dtype=DTYPE).expand(n, 2, 2)
        hess = (eye - unit[:, :, None] * unit[:, None, :]) / safe[:, None, None]
        hess = torch.where(at_corner[:, None, None], torch.zeros_like(hess), hess)
        return Jet2(a + b + s, unit - 1.0, hess)

    def cutoff_jet(self, points) -> Jet2:
        return super().cutoff_jet(points) * self.notch_jet(points)

    def draw_interior(self, n, rng):
        accepted: List[np.ndarray] = []
        count = 0
        while count < n:
            batch = rng.random((max(2 * (n - count), 8), 2))
            batch = batch[self.contains(batch)]
            accepted.append(batch)
            count += batch.shape[0]
        return np.concatenate(accepted)[:n]

    def draw_boundary(self, n, rng):
        return _sample_polygon_boundary(self.EDGES, n, rng)

    def grid(self, n):
        # cell midpoints of an M x M grid, M even so the notch is cell-aligned
        m = max(2 * int(round(math.sqrt(n / self.measure) / 2)), 2)
        h = 1.0 / m
        centers = (np.arange(m) + 0.5) * h
        xx, yy = np.meshgrid(centers, centers, indexing="ij")
        points = np.column_stack([xx.ravel(), yy.ravel()])
        points = points[self.contains(points)]
        return points, np.full(points.shape[0], h * h)

    def evaluation_grid(self, n_x):
        points = UnitSquare().evaluation_grid(n_x)
        return points[self.contains(points)]


DOMAINS: Dict[str, Domain] = {d.name: d for d in (Interval(), UnitSquare(), LShape())}


def get_domain(name: str) -> Domain:
    if name not in DOMAINS:
        raise ContractViolation(f"Unknown domain: {name}. Available: {sorted(DOMAINS)}")
    return DOMAINS[name]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_interior(domain: Domain, n: int, rng: np.random.Generator) -> PointSet:
    """n interior points, equal weights |Omega| / n"""
    if n < 1:
        raise ContractViolation(f"need at least one interior point, got {n}")
    points = domain.draw_interior(n, rng)
    return PointSet.from_numpy(points, np.full(n, domain.measure / n))


def sample_boundary(domain: Domain, n: int, rng: np.random.Generator) -> PointSet:
    """
    Boundary points with weights summing to |boundary|

    On the interval the boundary is {0, 1}: both endpoints with weight 1
    are returned regardless of n.
    """
    if n < 1:
        raise ContractViolation(f"need at least one boundary point, got {n}")
    points = domain.draw_boundary(n, rng)
    count = points.shape[0]
    return PointSet.from_numpy(points, np.full(count, domain.boundary_measure / count))


def sample_space_time(domain: Domain, T: float, n: int, rng: np.random.Generator) -> PointSet:
    """n points in Omega x (0, T], time last, weights |Omega| T / n"""
    if n < 1 or T <= 0:
        raise ContractViolation(f"need n >= 1 and T > 0, got n={n}, T={T}")
    x = domain.draw_interior(n, rng)
    t = T * (1.0 - rng.random(n))
    return PointSet.from_numpy(np.column_stack([x, t]), np.full(n, domain.measure * T / n))


def sample_boundary_space_time(domain: Domain, T: float, n: int, rng: np.random.Generator) -> PointSet:
    """n points on the lateral boundary, weights |boundary| T / n"""
    if n < 1 or T <= 0:
        raise ContractViolation(f"need n >= 1 and T > 0, got n={n}, T={T}")
    if isinstance(domain, Interval):
        x = rng.integers(0, 2, size=n).astype(np.float64)[:, None]
    else:
        x = domain.draw_boundary(n, rng)
    t = T * (1.0 - rng.random(n))
    return PointSet.from_numpy(
        np.column_stack([x, t]), np.full(n, domain.boundary_measure * T / n)
    )


def grid_quadrature(domain: Domain, n: int) -> PointSet:
    """Deterministic quadrature with roughly n nodes"""
    points, weights = domain.grid(n)
    return PointSet.from_numpy(points, weights)


def evaluation_points(domain: Domain, n_x: int) -> torch.Tensor:
    """Uniform grid of n_x points per axis, restricted to the closed domain"""
    if n_x < 2:
        raise ContractViolation(f"need at least 2 evaluation points per axis, got {n_x}")
    return torch.as_tensor(domain.evaluation_grid(n_x), dtype=DTYPE)


# ---------------------------------------------------------------------------
# Time grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """
    Nodes 0 = t^0 < t^1 < ... < t^N = T

    A uniform grid carries its step so that every k_n is the same float T / N.
    """

    nodes: Tuple[float, ...]
    step: Optional[float] = None

    def __post_init__(self):
        nodes = tuple(float(t) for t in self.nodes)
        object.__setattr__(self, "nodes", nodes)
        if len(nodes) < 2:
            raise ContractViolation("a time grid needs at least one step")
        if nodes[0] != 0.0:
            raise ContractViolation(f"time grid must start at 0, got {nodes[0]}")
        if any(b <= a for a, b in zip(nodes, nodes[1:])):
            raise ContractViolation("time grid nodes must be strictly increasing")
        if self.step is not None and not self.step > 0.0:
            raise ContractViolation(f"time step must be positive, got {self.step}")

    @property
    def N(self) -> int:
        return len(self.nodes) - 1

    @property
    def T(self) -> float:
        return self.nodes[-1]

    @property
    def steps(self) -> Tuple[float, ...]:
        """k_n = t^n - t^{n-1}, n = 1..N"""
        if self.step is not None:
            return (self.step,) * self.N
        return tuple(b - a for a, b in zip(self.nodes, self.nodes[1:]))

    def integrate(self, values: Sequence[float]) -> float:
        """Right-endpoint rule sum_n k_n g(t^n) for values g(t^1..t^N)"""
        if len(values) != self.N:
            raise ContractViolation(f"expected {self.N} level values, got {len(values)}")
        return math.fsum(k * g for k, g in zip(self.steps, values))

    def interval_index(self, t: float) -> int:
        """The n with t in (t^{n-1}, t^n]"""
        if not 0.0 < t <= self.T:
            raise ContractViolation(f"t = {t} outside (0, {self.T}]")
        return bisect.bisect_left(self.nodes, t)


def make_time_grid(T: float, N: int) -> TimeGrid:
    """Uniform grid with N steps on [0, T]"""
    if N < 1 or T <= 0:
        raise ContractViolation(f"need N >= 1 and T > 0, got N={N}, T={T}")
    T = float(T)
    nodes = tuple(n * T / N for n in range(N)) + (T,)
    return TimeGrid(nodes, step=T / N)

"""
Dense feed-forward networks with exact nested differentiation

This module is the numerical core of the laboratory:
- Dense networks u_theta(x) = C_L o sigma o C_{L-1} o ... o sigma o C_1 (x)
- Forward propagation of input-derivative jets (value, gradient, Hessian)
- Reverse accumulation of energy gradients with respect to all parameters
- Frozen flat parameter ordering and text checkpoints

All tensors are float64 on the CPU. Points are batched: a set of n points in
d dimensions is an (n, d) tensor and every jet carries one entry per point.
"""

import logging
import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64

EnergyEvaluator = Callable[["MlpParams"], torch.Tensor]


class ContractViolation(ValueError):
    """Raised when an operation is called outside its preconditions"""


class NonFiniteEnergy(ArithmeticError):
    """Raised when an energy or its parameter gradient overflows or becomes NaN"""

    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


def as_points(x, dim: int) -> torch.Tensor:
    """Convert a single point (dim,) or a batch (n, dim) into an (n, dim) tensor"""
    points = torch.as_tensor(x, dtype=DTYPE)
    if points.dim() == 1:
        points = points.unsqueeze(0)
    if points.dim() != 2 or points.shape[1] != dim:
        raise ContractViolation(
            f"expected points of dimension {dim}, got shape {tuple(points.shape)}"
        )
    return points


def _mirror_upper(hess: torch.Tensor) -> torch.Tensor:
    """Rebuild a batch of Hessians from their upper triangle only"""
    return torch.triu(hess) + torch.triu(hess, diagonal=1).transpose(-1, -2)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

class Activation(ABC):
    """Componentwise activation with its first two derivatives"""

    name: str = ""

    @abstractmethod
    def value(self, z: torch.Tensor) -> torch.Tensor:
        pass

    @abstractmethod
    def derivatives(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return (sigma(z), sigma'(z), sigma''(z))"""
        pass


class Tanh(Activation):
    name = "tanh"

    def value(self, z: torch.Tensor) -> torch.Tensor:
        return torch.tanh(z)

    def derivatives(self, z):
        s = self.value(z)
        d1 = 1.0 - s * s
        return s, d1, -2.0 * s * d1


class ReLUPower(Activation):
    """
    sigma(z) = max(z, 0)^k with k >= 2

    At the kink with k = 2 the second derivative is the right limit (2).
    """

    def __init__(self, k: int):
        if k < 2:
            raise ContractViolation(f"ReLU power must be >= 2, got {k}")
        self.k = k
        self.name = f"relu{k}"

    def value(self, z: torch.Tensor) -> torch.Tensor:
        return torch.clamp(z, min=0.0) ** self.k

    def derivatives(self, z):
        k = self.k
        r = torch.clamp(z, min=0.0)
        s = self.value(z)
        d1 = k * r ** (k - 1)
        if k == 2:
            d2 = torch.where(z >= 0, torch.full_like(z, 2.0), torch.zeros_like(z))
        else:
            d2 = k * (k - 1) * r ** (k - 2)
        return s, d1, d2


def get_activation(name: str) -> Activation:
    """Look up an activation by its checkpoint name ('tanh', 'relu2', ...)"""
    if name == "tanh":
        return Tanh()
    match = re.fullmatch(r"relu(\d+)", name)
    if match:
        return ReLUPower(int(match.group(1)))
    raise ContractViolation(f"Unknown activation: {name}")


# ---------------------------------------------------------------------------
# Architecture and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Architecture:
    """Layer widths d_1, ..., d_{L+1} (input first, scalar output last)"""

    layer_widths: Tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ContractViolation("architecture needs at least one hidden layer")
        if any(w < 1 for w in widths):
            raise ContractViolation(f"all layer widths must be >= 1, got {widths}")
        if widths[-1] != 1:
            raise ContractViolation(f"output width must be 1, got {widths[-1]}")
        get_activation(self.activation)

    @classmethod
    def from_hidden(cls, input_dim: int, hidden: Sequence[int], activation: str = "tanh") -> "Architecture":
        return cls((input_dim, *hidden, 1), activation)

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def n_affine(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def total_dim(self) -> int:
        """sum_k d_{k+1} (d_k + 1)"""
        w = self.layer_widths
        return sum(w[k + 1] * (w[k] + 1) for k in range(self.n_affine))

    @property
    def activation_fn(self) -> Activation:
        return get_activation(self.activation)

    def describe(self) -> str:
        widths = ",".join(str(w) for w in self.layer_widths)
        return f"arch: {widths}; activation: {self.activation}"

    @classmethod
    def parse(cls, line: str) -> "Architecture":
        match = re.fullmatch(r"\s*arch:\s*([\d,\s]+);\s*activation:\s*(\w+)\s*", line)
        if not match:
            raise ContractViolation(f"malformed architecture line: {line!r}")
        widths = tuple(int(w) for w in match.group(1).split(",") if w.strip())
        return cls(widths, match.group(2))


@dataclass(frozen=True, eq=False)
class MlpParams:
    """
    Weights W_k (d_{k+1} x d_k) and biases b_k (d_{k+1}) of a dense network

    Flat ordering (frozen, used by checkpoints and optimizers): layer-major,
    W_k row-major followed by b_k.
    """

    arch: Architecture
    weights: Tuple[torch.Tensor, ...]
    biases: Tuple[torch.Tensor, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))
        widths = self.arch.layer_widths
        if len(self.weights) != self.arch.n_affine or len(self.biases) != self.arch.n_affine:
            raise ContractViolation("number of layers does not match the architecture")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if tuple(w.shape) != (widths[k + 1], widths[k]) or tuple(b.shape) != (widths[k + 1],):
                raise ContractViolation(
                    f"layer {k}: got W {tuple(w.shape)}, b {tuple(b.shape)} "
                    f"for widths {widths[k]} -> {widths[k + 1]}"
                )

    @property
    def total_dim(self) -> int:
        return self.arch.total_dim

    def flatten(self) -> torch.Tensor:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b)
        return torch.cat(parts)

    @classmethod
    def from_flat(cls, arch: Architecture, theta: torch.Tensor) -> "MlpParams":
        """Slice a flat vector into layer views (differentiable w.r.t. theta)"""
        if theta.dim() != 1 or theta.shape[0] != arch.total_dim:
            raise ContractViolation(
                f"flat parameter vector must have length {arch.total_dim}, got {tuple(theta.shape)}"
            )
        widths = arch.layer_widths
        weights, biases = [], []
        offset = 0
        for k in range(arch.n_affine):
            rows, cols = widths[k + 1], widths[k]
            weights.append(theta[offset:offset + rows * cols].reshape(rows, cols))
            offset += rows * cols
            biases.append(theta[offset:offset + rows])
            offset += rows
        return cls(arch, tuple(weights), tuple(biases))

    def detach(self) -> "MlpParams":
        return MlpParams(
            self.arch,
            tuple(w.detach() for w in self.weights),
            tuple(b.detach() for b in self.biases),
        )


# ---------------------------------------------------------------------------
# Jets
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Jet2:
    """
    Value, input gradient and input Hessian of a scalar field at n points

    value: (n,), grad: (n, d), hess: (n, d, d). Hessians produced here are
    symmetric bit for bit: only one triangle is ever computed independently.
    """

    value: torch.Tensor
    grad: torch.Tensor
    hess: torch.Tensor

    @property
    def dim(self) -> int:
        return self.grad.shape[-1]

    @property
    def n_points(self) -> int:
        return self.value.shape[0]

    @classmethod
    def constant(cls, value: torch.Tensor, dim: int) -> "Jet2":
        n = value.shape[0]
        return cls(
            value,
            torch.zeros((n, dim), dtype=DTYPE),
            torch.zeros((n, dim, dim), dtype=DTYPE),
        )

    def _check_compatible(self, other: "Jet2"):
        if other.dim != self.dim or other.n_points != self.n_points:
            raise ContractViolation(
                f"jet shapes differ: ({self.n_points}, {self.dim}) vs ({other.n_points}, {other.dim})"
            )

    def __add__(self, other: "Jet2") -> "Jet2":
        self._check_compatible(other)
        return Jet2(self.value + other.value, self.grad + other.grad, self.hess + other.hess)

    def __sub__(self, other: "Jet2") -> "Jet2":
        self._check_compatible(other)
        return Jet2(self.value - other.value, self.grad - other.grad, self.hess - other.hess)

    def __neg__(self) -> "Jet2":
        return Jet2(-self.value, -self.grad, -self.hess)

    def __mul__(self, other: Union[float, "Jet2"]) -> "Jet2":
        if not isinstance(other, Jet2):
            return Jet2(other * self.value, other * self.grad, other * self.hess)
        # product rule
        self._check_compatible(other)
        u, v = self.value, other.value
        cross = self.grad.unsqueeze(-1) * other.grad.unsqueeze(-2)
        hess = (
            u[:, None, None] * other.hess
            + v[:, None, None] * self.hess
            + (cross + cross.transpose(-1, -2))
        )
        grad = u[:, None] * other.grad + v[:, None] * self.grad
        return Jet2(u * v, grad, hess)

    def __rmul__(self, other: float) -> "Jet2":
        return self.__mul__(other)

    def restrict(self, dim: int) -> "Jet2":
        """Leading `dim` coordinates (the spatial block of a space-time jet)"""
        if dim > self.dim:
            raise ContractViolation(f"cannot restrict a {self.dim}-dimensional jet to {dim}")
        return Jet2(self.value, self.grad[:, :dim], self.hess[:, :dim, :dim])

    def pad(self, dim: int) -> "Jet2":
        """Extend with trailing coordinates the field does not depend on"""
        extra = dim - self.dim
        if extra < 0:
            raise ContractViolation(f"cannot pad a {self.dim}-dimensional jet to {dim}")
        if extra == 0:
            return self
        grad = torch.nn.functional.pad(self.grad, (0, extra))
        hess = torch.nn.functional.pad(self.hess, (0, extra, 0, extra))
        return Jet2(self.value, grad, hess)


# ---------------------------------------------------------------------------
# Network evaluation
# ---------------------------------------------------------------------------

def _affine(y: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return y @ w.T + b


def mlp_forward(params: MlpParams, x) -> torch.Tensor:
    """
    Evaluate u_theta at one point (returns a 0-dim tensor) or at a batch of
    points (returns shape (n,)).
    """
    single = torch.as_tensor(x).dim() == 1
    y = as_points(x, params.arch.input_dim)
    act = params.arch.activation_fn
    last = params.arch.n_affine - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = _affine(y, w, b)
        y = z if k == last else act.value(z)
    out = y[:, 0]
    return out[0] if single else out


def mlp_jet(params: MlpParams, x) -> Jet2:
    """
    Exact value, gradient and Hessian of u_theta at a batch of points, by
    forward propagation of (v, dv, d2v) through every layer.

    The value channel performs exactly the operations of mlp_forward.
    """
    y = as_points(x, params.arch.input_dim)
    n, d = y.shape
    act = params.arch.activation_fn
    last = params.arch.n_affine - 1

    jac: Optional[torch.Tensor] = None  # (n, width, d); identity on the input layer
    hess: Optional[torch.Tensor] = None  # (n, width, d, d); zero on the input layer
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = _affine(y, w, b)
        if jac is None:
            jac_z = w.unsqueeze(0).expand(n, -1, -1)
            hess_z = torch.zeros((n, w.shape[0], d, d), dtype=DTYPE)
        else:
            jac_z = torch.einsum("oi,nid->nod", w, jac)
            hess_z = _mirror_upper(torch.einsum("oi,nijk->nojk", w, hess))
        if k == last:
            y, jac, hess = z, jac_z, hess_z
            break
        s0, s1, s2 = act.derivatives(z)
        outer = jac_z.unsqueeze(-1) * jac_z.unsqueeze(-2)
        y = s0
        jac = s1.unsqueeze(-1) * jac_z
        hess = _mirror_upper(s2[..., None, None] * outer + s1[..., None, None] * hess_z)

    return Jet2(y[:, 0], jac[:, 0, :], hess[:, 0, :, :])


# ---------------------------------------------------------------------------
# Parameter gradients
# ---------------------------------------------------------------------------

class GradientTape:
    """
    Record of one jet-extended forward pass of an energy, sufficient to
    accumulate d(energy)/d(theta) in reverse.

    The parameters are held as one flat leaf vector; the evaluator sees them
    through MlpParams.from_flat views, so the gradient comes back flat in the
    frozen ordering.
    """

    def __init__(self, params: MlpParams, energy_eval: EnergyEvaluator):
        self.arch = params.arch
        self.theta = params.flatten().detach().clone().requires_grad_(True)
        self.energy_eval = energy_eval
        self._energy: Optional[torch.Tensor] = None

    def record(self) -> torch.Tensor:
        energy = self.energy_eval(MlpParams.from_flat(self.arch, self.theta))
        if energy.dim() != 0:
            raise ContractViolation(f"energy evaluator must return a scalar, got shape {tuple(energy.shape)}")
        self._energy = energy
        return energy

    def replay(self) -> float:
        """Re-run the forward pass without recording"""
        with torch.no_grad():
            return float(self.energy_eval(MlpParams.from_flat(self.arch, self.theta.detach())))

    def gradient(self) -> torch.Tensor:
        if self._energy is None:
            raise ContractViolation("gradient() called before record()")
        if not self._energy.requires_grad:
            return torch.zeros_like(self.theta)
        (grad,) = torch.autograd.grad(self._energy, self.theta, allow_unused=True)
        if grad is None:
            return torch.zeros_like(self.theta)
        return grad


def loss_gradient(
    params: MlpParams,
    energy_eval: EnergyEvaluator,
    iteration: Optional[int] = None,
) -> Tuple[float, torch.Tensor]:
    """Energy value and its exact gradient w.r.t. the flat parameter vector"""
    tape = GradientTape(params, energy_eval)
    energy = tape.record()
    value = float(energy.detach())
    if not math.isfinite(value):
        raise NonFiniteEnergy(f"energy is {value}", iteration)
    grad = tape.gradient()
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteEnergy("energy gradient has non-finite entries", iteration)
    return value, grad


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: MlpParams, path: Union[str, Path]) -> Path:
    """Architecture line followed by one parameter per line in flat order"""
    path = Path(path)
    values = params.flatten().detach().tolist()
    lines = [params.arch.describe()] + [f"{v:.17g}" for v in values]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug("wrote checkpoint %s (%d parameters)", path, len(values))
    return path


def load_checkpoint(path: Union[str, Path]) -> MlpParams:
    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise ContractViolation(f"empty checkpoint: {path}")
    arch = Architecture.parse(lines[0])
    values = [float(v) for v in lines[1:]]
    if len(values) != arch.total_dim:
        raise ContractViolation(
            f"checkpoint holds {len(values)} parameters, architecture needs {arch.total_dim}"
        )
    return MlpParams.from_flat(arch, torch.tensor(values, dtype=DTYPE))

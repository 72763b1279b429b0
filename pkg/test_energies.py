"""
Tests for residual energies, the H1 regularizer and hard boundary constraints
"""

import math

import numpy as np
import pytest
import torch

from autodiff_core import DTYPE, Architecture, ContractViolation, MlpParams, loss_gradient
from domains import (
    Interval,
    PointSet,
    QuadratureSet,
    UnitSquare,
    grid_quadrature,
    make_time_grid,
    sample_boundary,
    sample_boundary_space_time,
    sample_interior,
    sample_space_time,
)
from energies import (
    BoundaryMode,
    EnergySpec,
    HardBoundaryField,
    InitialNorm,
    assemble_energy,
    build_field,
    energy_elliptic,
    energy_parabolic_exact,
    energy_time_discrete,
    evaluate_energy,
    hard_bc_wrap,
    regularizer_h1,
)
from operators_residuals import EllipticOperator, LinearCombinationField, NetworkField, Scheme
from problems import (
    ProblemFactory,
    ProblemSpec,
    SineProductField,
    ZeroField,
    constant_source,
    zero_source,
)

PI = math.pi


def network(widths, seed=0):
    arch = Architecture(tuple(widths))
    gen = torch.Generator().manual_seed(seed)
    return MlpParams.from_flat(arch, 2.0 * torch.rand(arch.total_dim, generator=gen, dtype=DTYPE) - 1.0)


def constant_network(widths, value):
    arch = Architecture(tuple(widths))
    theta = torch.zeros(arch.total_dim, dtype=DTYPE)
    theta[-1] = value
    return MlpParams.from_flat(arch, theta)


def elliptic_problem(f):
    return ProblemSpec("test", Interval(), EllipticOperator.laplacian(1), f)


def heat_problem(f, u0, T=1.0):
    return ProblemSpec("test-heat", Interval(), EllipticOperator.laplacian(1), f, u0=u0, T=T)


def spatial_quad(n=64, seed=0):
    rng = np.random.default_rng(seed)
    return QuadratureSet(
        sample_interior(Interval(), n, rng), sample_boundary(Interval(), 2, rng), sample_interior(Interval(), n, rng)
    )


class TestEnergySpec:
    """Weight validation"""

    def test_negative_weights(self):
        for name in ("tau", "mu", "lam"):
            with pytest.raises(ContractViolation):
                EnergySpec(**{name: -1.0})

    def test_boundary_penalty_only_when_soft(self):
        assert not EnergySpec(tau=5.0).uses_boundary_penalty
        assert EnergySpec(tau=5.0, bc_mode=BoundaryMode.SOFT_PENALTY).uses_boundary_penalty
        assert not EnergySpec(tau=0.0, bc_mode=BoundaryMode.SOFT_PENALTY).uses_boundary_penalty


class TestEllipticEnergy:
    """sum w (Lv - f)^2 + tau boundary + lambda J"""

    def test_zero_field_zero_data(self):
        spec = EnergySpec(tau=7.0, bc_mode=BoundaryMode.SOFT_PENALTY)
        energy = energy_elliptic(ZeroField(1), elliptic_problem(zero_source), spatial_quad(), spec)
        assert float(energy) == 0.0

    def test_unit_source_gives_measure(self):
        quad = QuadratureSet(sample_interior(Interval(), 4, np.random.default_rng(1)))
        energy = energy_elliptic(ZeroField(1), elliptic_problem(constant_source(1.0)), quad, EnergySpec(tau=0.0))
        assert float(energy) == 1.0

    def test_exact_solution(self):
        problem = ProblemFactory.get_problem_by_name("elliptic-sin")
        quad = QuadratureSet(sample_interior(Interval(), 256, np.random.default_rng(2)))
        field = hard_bc_wrap(SineProductField(1), Interval())
        # x(1-x) sin(pi x) is not the solution; the bare sine is
        assert float(energy_elliptic(SineProductField(1), problem, quad, EnergySpec())) <= 1e-20
        assert float(energy_elliptic(field, problem, quad, EnergySpec())) > 1e-3

    def test_boundary_penalty(self):
        spec = EnergySpec(tau=3.0, bc_mode=BoundaryMode.SOFT_PENALTY)
        field = NetworkField(constant_network((1, 4, 1), 2.0))
        # interior residual vanishes; boundary 3 * (4 + 4) at both endpoints
        energy = energy_elliptic(field, elliptic_problem(zero_source), spatial_quad(), spec)
        assert float(energy) == pytest.approx(24.0, rel=1e-14)

    def test_regularizer_term(self):
        quad = QuadratureSet(grid_quadrature(Interval(), 201))
        spec = EnergySpec(lam=2.0)
        problem = ProblemFactory.get_problem_by_name("elliptic-sin")
        energy = energy_elliptic(SineProductField(1), problem, quad, spec)
        assert float(energy) == pytest.approx(PI * PI, rel=1e-10)

    def test_empty_interior(self):
        empty = PointSet(torch.zeros((0, 1), dtype=DTYPE), torch.zeros(0, dtype=DTYPE))
        with pytest.raises(ContractViolation):
            energy_elliptic(ZeroField(1), elliptic_problem(zero_source), QuadratureSet(empty), EnergySpec())

    def test_scheme_must_fit_problem(self):
        with pytest.raises(ContractViolation):
            energy_elliptic(
                ZeroField(1), elliptic_problem(zero_source), spatial_quad(), EnergySpec(scheme=Scheme.IE)
            )


class TestParabolicExactEnergy:
    """Space-time residual plus initial misfit"""

    def test_exact_heat_solution(self):
        problem = ProblemFactory.get_problem_by_name("heat-sin")
        rng = np.random.default_rng(3)
        quad = QuadratureSet(
            sample_space_time(Interval(), 1.0, 256, rng), initial=sample_interior(Interval(), 128, rng)
        )
        spec = EnergySpec(scheme=Scheme.EXACT_TIME, mu=1.0)
        assert float(energy_parabolic_exact(problem.exact, problem, quad, spec)) < 1e-20

    def test_initial_misfit_in_h1_seminorm(self):
        problem = heat_problem(zero_source, SineProductField(1))
        quad = QuadratureSet(
            sample_space_time(Interval(), 1.0, 64, np.random.default_rng(4)), initial=grid_quadrature(Interval(), 201)
        )
        spec = EnergySpec(scheme=Scheme.EXACT_TIME, mu=1.0, initial_norm=InitialNorm.H1_SEMI)
        energy = energy_parabolic_exact(ZeroField(2), problem, quad, spec)
        assert float(energy) == pytest.approx(PI * PI / 2, rel=1e-10)

    def test_initial_misfit_in_l2(self):
        problem = heat_problem(zero_source, SineProductField(1))
        quad = QuadratureSet(
            sample_space_time(Interval(), 1.0, 64, np.random.default_rng(4)), initial=grid_quadrature(Interval(), 201)
        )
        spec = EnergySpec(scheme=Scheme.EXACT_TIME, mu=2.0, initial_norm=InitialNorm.L2)
        assert float(energy_parabolic_exact(ZeroField(2), problem, quad, spec)) == pytest.approx(1.0, rel=1e-10)

    def test_unit_source(self):
        problem = heat_problem(constant_source(1.0), ZeroField(1))
        rng = np.random.default_rng(5)
        quad = QuadratureSet(sample_space_time(Interval(), 1.0, 500, rng), initial=sample_interior(Interval(), 8, rng))
        spec = EnergySpec(scheme=Scheme.EXACT_TIME)
        assert float(energy_parabolic_exact(ZeroField(2), problem, quad, spec)) == pytest.approx(1.0, rel=1e-12)


class TestTimeDiscreteEnergy:
    """sum_n k_n sum w r_n^2 with implicit or explicit Euler quotients"""

    def test_zero_data(self):
        problem = heat_problem(zero_source, ZeroField(1))
        spec = EnergySpec(scheme=Scheme.IE, tau=1.0, lam=1.0, bc_mode=BoundaryMode.SOFT_PENALTY)
        energy = energy_time_discrete(ZeroField(2), problem, make_time_grid(1.0, 4), spatial_quad(), spec)
        assert float(energy) == 0.0

    @pytest.mark.parametrize("scheme", [Scheme.IE, Scheme.EE])
    def test_unit_source(self, scheme):
        problem = heat_problem(constant_source(1.0), ZeroField(1))
        spec = EnergySpec(scheme=scheme, tau=0.0, mu=0.0, lam=0.0)
        energy = energy_time_discrete(ZeroField(2), problem, make_time_grid(1.0, 2), spatial_quad(), spec)
        assert float(energy) == pytest.approx(1.0, rel=1e-14)

    @pytest.mark.parametrize("k", [0.1, 0.05, 0.025, 0.0125])
    def test_exact_heat_solution_closed_form(self, k):
        # r_n(x) = u(x, t^n) ((1 - exp(a k)) / k + a), a = pi^2
        problem = ProblemFactory.get_problem_by_name("heat-sin")
        a = PI * PI
        N = int(round(1.0 / k))
        grid = make_time_grid(1.0, N)
        quad = QuadratureSet(grid_quadrature(Interval(), 201))
        spec = EnergySpec(scheme=Scheme.IE, mu=0.0)
        energy = float(energy_time_discrete(problem.exact, problem, grid, quad, spec))
        factor = (1.0 - math.exp(a * k)) / k + a
        expected = 0.5 * factor ** 2 * math.fsum(k * math.exp(-2 * a * n * k) for n in range(1, N + 1))
        assert energy == pytest.approx(expected, rel=1e-9)

    def test_refinement_reduces_energy(self):
        problem = ProblemFactory.get_problem_by_name("heat-sin")
        quad = QuadratureSet(grid_quadrature(Interval(), 201))
        spec = EnergySpec(scheme=Scheme.IE, mu=0.0)
        energies = [
            float(energy_time_discrete(problem.exact, problem, make_time_grid(1.0, N), quad, spec))
            for N in (40, 80)
        ]
        assert 3.4 < energies[0] / energies[1] < 4.6

    @pytest.mark.parametrize("scheme", [Scheme.IE, Scheme.EE])
    def test_per_level_sets_match_shared_set(self, scheme):
        problem = ProblemFactory.get_problem_by_name("heat-sin")
        field = NetworkField(network((2, 6, 1), seed=4))
        grid = make_time_grid(1.0, 3)
        quad = spatial_quad(32, seed=6)
        spec = EnergySpec(scheme=scheme, tau=2.0, mu=1.5, lam=0.3, bc_mode=BoundaryMode.SOFT_PENALTY)
        shared = energy_time_discrete(field, problem, grid, quad, spec)
        per_level = energy_time_discrete(field, problem, grid, [quad] * 3, spec)
        assert float(per_level) == pytest.approx(float(shared), rel=1e-12)

    def test_schemes_agree_on_time_constant_fields(self):
        problem = heat_problem(constant_source(1.0), SineProductField(1))
        field = SineProductField(1, rate=0.0)
        grid = make_time_grid(1.0, 4)
        quad = spatial_quad(32, seed=7)
        energies = []
        for scheme in (Scheme.IE, Scheme.EE):
            spec = EnergySpec(scheme=scheme, tau=1.0, mu=1.0, lam=0.5, bc_mode=BoundaryMode.SOFT_PENALTY)
            energies.append(float(energy_time_discrete(field, problem, grid, quad, spec)))
        assert energies[0] > 0
        assert energies[0] == pytest.approx(energies[1], rel=1e-14)

    def test_per_level_count(self):
        problem = ProblemFactory.get_problem_by_name("heat-sin")
        with pytest.raises(ContractViolation):
            energy_time_discrete(
                ZeroField(2), problem, make_time_grid(1.0, 3), [spatial_quad()] * 2, EnergySpec(scheme=Scheme.IE)
            )

    def test_needs_grid(self):
        problem = ProblemFactory.get_problem_by_name("heat-sin")
        with pytest.raises(ContractViolation):
            evaluate_energy(ZeroField(2), problem, EnergySpec(scheme=Scheme.EE), spatial_quad())
        with pytest.raises(ContractViolation):
            assemble_energy(problem, EnergySpec(scheme=Scheme.IE), spatial_quad())


class TestRegularizer:
    """Squared H1 seminorm by quadrature"""

    def test_zero_field(self):
        assert float(regularizer_h1(ZeroField(1), grid_quadrature(Interval(), 11))) == 0.0

    def test_constant_network(self):
        field = NetworkField(constant_network((1, 5, 5, 1), 3.0))
        assert float(regularizer_h1(field, grid_quadrature(Interval(), 11))) == 0.0

    def test_sine(self):
        value = float(regularizer_h1(SineProductField(1), grid_quadrature(Interval(), 201)))
        assert value == pytest.approx(PI * PI / 2, rel=1e-10)

    def test_sine_monte_carlo(self):
        value = float(regularizer_h1(SineProductField(1), sample_interior(Interval(), 4000, np.random.default_rng(7))))
        # pi^2 cos^2 has standard deviation pi^2 / sqrt(8)
        assert abs(value - PI * PI / 2) < 5 * (PI * PI / math.sqrt(8)) / math.sqrt(4000)

    def test_space_time_excludes_time_derivative(self):
        u = SineProductField(1, rate=PI * PI)
        pts = sample_space_time(Interval(), 1.0, 16, np.random.default_rng(8))
        full = float(regularizer_h1(u, pts))
        spatial = float(regularizer_h1(u, pts, spatial_dim=1))
        assert spatial < full


class TestHardBoundary:
    """Cutoff-multiplied networks"""

    def test_vanishes_on_boundary(self):
        params = network((2, 8, 1), seed=1)
        field = hard_bc_wrap(NetworkField(params), UnitSquare())
        pts = sample_boundary(UnitSquare(), 100, np.random.default_rng(9)).points
        assert torch.count_nonzero(field.value(pts)) == 0
        assert torch.count_nonzero(field.jet(pts).value) == 0

    def test_symmetric_cutoff(self):
        field = hard_bc_wrap(NetworkField(constant_network((1, 3, 1), 1.0)), Interval())
        jet = field.jet([[0.5]])
        assert float(jet.value[0]) == 0.25
        assert float(jet.grad[0, 0]) == 0.0

    def test_matches_finite_differences(self):
        field = hard_bc_wrap(NetworkField(network((1, 8, 8, 1), seed=2)), Interval())
        x = torch.tensor([[0.3]], dtype=DTYPE)
        h = 1e-5
        jet = field.jet(x)
        grad_fd = (field.value(x + h) - field.value(x - h)) / (2 * h)
        hess_fd = (field.jet(x + h).grad - field.jet(x - h).grad) / (2 * h)
        assert float(jet.grad[0, 0]) == pytest.approx(float(grad_fd[0]), rel=1e-6)
        assert float(jet.hess[0, 0, 0]) == pytest.approx(float(hess_fd[0, 0]), rel=1e-6, abs=1e-8)

    def test_time_coordinate_is_not_cut_off(self):
        inner = NetworkField(constant_network((2, 3, 1), 2.0))
        field = hard_bc_wrap(inner, Interval())
        jet = field.jet([[0.5, 0.0], [0.5, 0.9]])
        assert jet.value.tolist() == [0.5, 0.5]
        assert jet.grad[:, 1].tolist() == [0.0, 0.0]

    def test_unsupported_domain(self):
        with pytest.raises(ContractViolation):
            hard_bc_wrap(ZeroField(1), object())

    def test_build_field(self):
        params = network((1, 4, 1))
        problem = ProblemFactory.get_problem_by_name("elliptic-sin")
        assert isinstance(build_field(params, problem, EnergySpec()), HardBoundaryField)
        assert isinstance(
            build_field(params, problem, EnergySpec(bc_mode=BoundaryMode.SOFT_PENALTY)), NetworkField
        )
        with pytest.raises(ContractViolation):
            build_field(network((2, 4, 1)), problem, EnergySpec())


class TestAssembledEnergy:
    """Energies as functions of the network parameters"""

    @pytest.mark.parametrize("name,scheme", [("elliptic-sin", Scheme.ELLIPTIC), ("heat-sin", Scheme.IE)])
    def test_gradient_is_finite(self, name, scheme):
        problem = ProblemFactory.get_problem_by_name(name)
        grid = make_time_grid(problem.T, 4) if problem.is_parabolic else None
        energy_eval = assemble_energy(problem, EnergySpec(scheme=scheme), spatial_quad(), grid)
        params = network((problem.input_dim, 6, 1), seed=5)
        value, grad = loss_gradient(params, energy_eval)
        assert math.isfinite(value) and value > 0
        assert grad.shape == (params.total_dim,)
        assert bool(torch.isfinite(grad).all())

    def test_gradient_matches_finite_differences(self):
        problem = ProblemFactory.get_problem_by_name("heat-sin")
        spec = EnergySpec(scheme=Scheme.EE, tau=0.5, lam=0.2, bc_mode=BoundaryMode.SOFT_PENALTY)
        energy_eval = assemble_energy(problem, spec, spatial_quad(16, seed=3), make_time_grid(1.0, 3))
        params = network((2, 5, 1), seed=6)
        _, grad = loss_gradient(params, energy_eval)
        theta = params.flatten().detach()
        h = 1e-6
        for i in (0, 7, params.total_dim - 1):
            e = torch.zeros_like(theta)
            e[i] = h
            plus = float(energy_eval(MlpParams.from_flat(params.arch, theta + e)))
            minus = float(energy_eval(MlpParams.from_flat(params.arch, theta - e)))
            assert float(grad[i]) == pytest.approx((plus - minus) / (2 * h), rel=1e-6, abs=1e-6)

    @pytest.mark.parametrize("scheme", [Scheme.ELLIPTIC, Scheme.EXACT_TIME, Scheme.IE, Scheme.EE])
    def test_nonnegative(self, scheme):
        name = "elliptic-sin" if scheme is Scheme.ELLIPTIC else "heat-bump"
        problem = ProblemFactory.get_problem_by_name(name)
        grid = make_time_grid(problem.T, 4) if problem.is_parabolic else None
        spec = EnergySpec(scheme=scheme, tau=1.0, mu=1.0, lam=0.1, bc_mode=BoundaryMode.SOFT_PENALTY)
        for seed in range(10):
            quad = spatial_quad(16, seed=seed)
            if scheme is Scheme.EXACT_TIME:
                rng = np.random.default_rng(seed)
                quad = QuadratureSet(
                    sample_space_time(Interval(), problem.T, 16, rng),
                    sample_boundary_space_time(Interval(), problem.T, 8, rng),
                    sample_interior(Interval(), 16, rng),
                )
            energy_eval = assemble_energy(problem, spec, quad, grid)
            assert float(energy_eval(network((problem.input_dim, 6, 1), seed=seed))) >= 0.0

    def test_increases_with_regularizer_weight(self):
        problem = ProblemFactory.get_problem_by_name("elliptic-sin")
        quad = spatial_quad(32, seed=2)
        params = network((1, 6, 1), seed=8)
        energies = [
            float(assemble_energy(problem, EnergySpec(lam=lam), quad)(params)) for lam in (0.0, 0.5, 1.0, 2.0)
        ]
        assert all(a < b for a, b in zip(energies, energies[1:]))

    @pytest.mark.parametrize("name,scheme", [("elliptic-sin", Scheme.ELLIPTIC), ("heat-sin", Scheme.EXACT_TIME)])
    def test_quadratic_in_perturbation(self, name, scheme):
        problem = ProblemFactory.get_problem_by_name(name)
        rng = np.random.default_rng(11)
        if problem.is_parabolic:
            quad = QuadratureSet(
                sample_space_time(Interval(), problem.T, 128, rng), initial=sample_interior(Interval(), 64, rng)
            )
        else:
            quad = QuadratureSet(sample_interior(Interval(), 128, rng))
        spec = EnergySpec(scheme=scheme)
        bump = hard_bc_wrap(NetworkField(network((problem.input_dim, 6, 1), seed=9)), Interval())

        def energy(eps):
            field = LinearCombinationField([(1.0, problem.exact), (eps, bump)])
            return float(evaluate_energy(field, problem, spec, quad))

        for eps in (1e-2, 1e-3):
            assert math.log2(energy(2 * eps) / energy(eps)) == pytest.approx(2.0, abs=0.05)

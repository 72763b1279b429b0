#!/usr/bin/env python3
"""
Residual-minimization training laboratory CLI

Runs preset or file-configured experiments and writes CSV artifacts for
plotting.

Usage:
    pinnlab run <preset|config> [--set key=value ...]
    pinnlab compare <preset|config> [--set key=value ...]
    pinnlab sweep <preset|config> --axis {width,n_points,k,lambda} --values v1,v2,...
    pinnlab snapshot <run-dir> [--times t1,t2,...] [--nx N]
    pinnlab presets

Examples:
    pinnlab run elliptic-sin
    pinnlab run fig1-left
    pinnlab compare fig2-ee
    pinnlab sweep elliptic-sin --axis width --values 8,16,32 --seeds 3 --jobs 3
"""

import argparse
import dataclasses
import logging
import math
import multiprocessing
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from autodiff_core import DTYPE, Architecture, ContractViolation, MlpParams, load_checkpoint, save_checkpoint
from energies import BoundaryMode, EnergySpec, InitialNorm, build_field
from operators_residuals import Scheme, TimeSliceField
from problems import ProblemFactory, ProblemSpec
from training import OptimizerConfig, Termination, TrainConfig, TrainTrajectory, instability_indicator, train

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(name)s:%(funcName)s:%(lineno)s] %(levelname)s: %(message)s"
OUTPUT_ROOT_ENV = "PINNLAB_OUTPUT_ROOT"
FLOAT_FORMAT = "%.17g"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_NON_FINITE = 4
EXIT_FILESYSTEM = 5

TRAJECTORY_COLUMNS_ELLIPTIC = [
    "iteration", "energy", "grad_norm", "h1", "h2", "sup_norm", "error_l2", "error_h1", "wall_ms",
]
TRAJECTORY_COLUMNS_PARABOLIC = [
    "iteration", "energy", "grad_norm", "l2h2_bar", "l2l2_hat_dt", "sup_norm", "error_l2", "error_h1", "wall_ms",
]
REPORT_COLUMNS = [
    "name", "problem", "scheme", "termination", "iterations", "energy", "grad_norm",
    "h1", "h2", "l2h2_bar", "l2l2_hat_dt", "sup_norm", "instability",
    "mr_identity_residual", "mr_slack", "error_l2", "rel_error_l2", "error_h1",
    "regularizer", "seed", "wall_ms",
]
SNAPSHOT_COLUMNS = ["series", "t", "x", "u"]
SWEEP_AXES = ("width", "n_points", "k", "lambda")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

DEFAULTS: Dict[str, str] = {
    "name": "",
    "description": "",
    "problem": "elliptic-sin",
    "scheme": "elliptic",
    "bc_mode": "hard",
    "tau": "1.0",
    "mu": "1.0",
    "lambda": "0.0",
    "initial_norm": "h1semi",
    "hidden": "32,32,32",
    "activation": "tanh",
    "seed": "0",
    "n_interior": "256",
    "n_boundary": "64",
    "n_initial": "256",
    "optimizer": "adam",
    "lr": "0.001",
    "beta1": "0.9",
    "beta2": "0.999",
    "eps": "1e-08",
    "max_iters": "20000",
    "log_every": "100",
    "resample_every": "0",
    "divergence_threshold": "10.0",
    "T": "",
    "time_step": "0.1",
    "n_eval": "201",
    "converge_tol": "0.0",
    "zero_final_layer": "false",
    "resample_levels": "false",
    "checkpoint": "true",
    "snapshot_times": "",
    "snapshot_nx": "101",
}

_FIGURE = {
    "hidden": "32,32,32",
    "bc_mode": "hard",
    "mu": 1.0,
    "initial_norm": "h1semi",
    "max_iters": 10000,
    "log_every": 100,
    "n_eval": 101,
    # Diverged once sup |v| exceeds 1 + sup |u0|; heat solutions never exceed sup |u0|
    "divergence_threshold": 1.0,
}

PRESETS: Dict[str, Dict[str, object]] = {
    "elliptic-sin": {
        "description": "-u'' = pi^2 sin(pi x) on (0, 1), hard boundary constraint",
        "problem": "elliptic-sin", "scheme": "elliptic", "hidden": "32,32",
        "n_interior": 256, "max_iters": 20000, "log_every": 500,
    },
    "elliptic-square": {
        "description": "anisotropic operator on the unit square",
        "problem": "elliptic-square", "scheme": "elliptic",
        "n_interior": 1024, "max_iters": 10000, "log_every": 500, "n_eval": 1681,
    },
    "elliptic-lshape": {
        "description": "Poisson problem on the L-shape, soft boundary penalty",
        "problem": "elliptic-lshape", "scheme": "elliptic", "bc_mode": "soft", "tau": 10.0,
        "n_interior": 1024, "n_boundary": 256, "max_iters": 10000, "log_every": 500, "n_eval": 1600,
    },
    "heat-ie": {
        "description": "heat equation, u0 = sin(pi x), implicit time-discrete energy",
        "problem": "heat-sin", "scheme": "ie", "time_step": 0.1, "T": 1.0,
        "n_interior": 64, "n_initial": 64, "max_iters": 5000,
    },
    "heat-exact": {
        "description": "heat equation, u0 = sin(pi x), continuous-time energy",
        "problem": "heat-sin", "scheme": "exact", "time_step": 0.1, "T": 1.0,
        "n_interior": 1024, "n_initial": 128, "max_iters": 5000,
    },
    "heat-bump-ie": {
        "description": "heat equation, sign-changing bump, implicit time-discrete energy",
        "problem": "heat-bump", "scheme": "ie", "time_step": 0.05, "T": 1.0,
        "n_interior": 64, "n_initial": 64, "max_iters": 5000,
    },
    "fig1-left": {
        **_FIGURE, "description": "explicit energy, time step 0.4: expected to diverge",
        "problem": "heat-sin", "scheme": "ee", "T": 2.0, "time_step": 0.4, "n_interior": 16, "n_initial": 16,
    },
    "fig1-right": {
        **_FIGURE, "description": "explicit energy, time step 0.01: expected to stay bounded",
        "problem": "heat-sin", "scheme": "ee", "T": 2.0, "time_step": 0.01, "n_interior": 16, "n_initial": 16,
    },
    "fig1-ie": {
        **_FIGURE, "description": "implicit energy, time step 0.4: expected to stay bounded",
        "problem": "heat-sin", "scheme": "ie", "T": 2.0, "time_step": 0.4, "n_interior": 16, "n_initial": 16,
    },
    "fig2-ee": {
        **_FIGURE, "description": "explicit energy, time step 0.2, 16 points",
        "problem": "heat-bump", "scheme": "ee", "T": 1.0, "time_step": 0.2, "n_interior": 16, "n_initial": 16,
    },
    "fig2-ie": {
        **_FIGURE, "description": "implicit energy, time step 0.2, 16 points",
        "problem": "heat-bump", "scheme": "ie", "T": 1.0, "time_step": 0.2, "n_interior": 16, "n_initial": 16,
    },
    "fig3-ee": {
        **_FIGURE, "description": "explicit energy, time step 0.01, 16 points",
        "problem": "heat-bump", "scheme": "ee", "T": 1.0, "time_step": 0.01, "n_interior": 16, "n_initial": 16,
    },
    "fig3-ie": {
        **_FIGURE, "description": "implicit energy, time step 0.01, 16 points",
        "problem": "heat-bump", "scheme": "ie", "T": 1.0, "time_step": 0.01, "n_interior": 16, "n_initial": 16,
    },
    "fig4-ee": {
        **_FIGURE, "description": "explicit energy, time step 0.01, 100 points",
        "problem": "heat-bump", "scheme": "ee", "T": 1.0, "time_step": 0.01, "n_interior": 100, "n_initial": 100,
    },
    "fig4-ie": {
        **_FIGURE, "description": "implicit energy, time step 0.01, 100 points",
        "problem": "heat-bump", "scheme": "ie", "T": 1.0, "time_step": 0.01, "n_interior": 100, "n_initial": 100,
    },
}


class ConfigError(ContractViolation):
    """Malformed or inconsistent experiment configuration"""

    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if key is not None:
            prefix += f"key '{key}': "
        super().__init__(prefix + message)
        self.line = line
        self.key = key


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def preset_values(name: str) -> Dict[str, str]:
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset: {name}. Available: {sorted(PRESETS)}")
    values = dict(DEFAULTS)
    values.update({k: _format_value(v) for k, v in PRESETS[name].items()})
    values["name"] = name
    return values


def parse_config_text(text: str) -> Dict[str, str]:
    """
    Flat `key = value` lines; '#' starts a comment. Duplicate or unknown
    keys are errors (the special key `preset` names a base preset).
    """
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("missing key", line=number)
        if key not in DEFAULTS and key != "preset":
            raise ConfigError("unknown key", line=number, key=key)
        if key in values:
            raise ConfigError("duplicate key", line=number, key=key)
        values[key] = value
    return values


def parse_overrides(overrides: Sequence[str]) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError("unknown key", key=key)
        values[key] = value
    return values


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_ints(value: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


def _parse_floats(value: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def _enum_parser(enum_cls) -> Callable[[str], object]:
    def parse(value: str):
        try:
            return enum_cls(value.strip().lower())
        except ValueError:
            raise ValueError(f"expected one of {[e.value for e in enum_cls]}, got {value!r}") from None

    return parse


PARSERS: Dict[str, Callable[[str], object]] = {
    "name": str,
    "description": str,
    "problem": str,
    "scheme": _enum_parser(Scheme),
    "bc_mode": _enum_parser(BoundaryMode),
    "tau": float,
    "mu": float,
    "lambda": float,
    "initial_norm": _enum_parser(InitialNorm),
    "hidden": _parse_ints,
    "activation": str,
    "seed": int,
    "n_interior": int,
    "n_boundary": int,
    "n_initial": int,
    "optimizer": str,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "max_iters": int,
    "log_every": int,
    "resample_every": int,
    "divergence_threshold": float,
    "T": lambda v: float(v) if v.strip() else None,
    "time_step": float,
    "n_eval": int,
    "converge_tol": float,
    "zero_final_layer": _parse_bool,
    "resample_levels": _parse_bool,
    "checkpoint": _parse_bool,
    "snapshot_times": _parse_floats,
    "snapshot_nx": int,
}


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A fully resolved and validated run specification"""

    name: str
    values: Dict[str, str]
    problem: ProblemSpec
    energy: EnergySpec
    train: TrainConfig
    snapshot_times: Tuple[float, ...]
    snapshot_nx: int
    checkpoint: bool
    output_root: Path

    @property
    def output_dir(self) -> Path:
        return self.output_root / self.name

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_overrides(self, overrides: Dict[str, object]) -> "ExperimentConfig":
        values = dict(self.values)
        values.update({k: _format_value(v) for k, v in overrides.items()})
        return build_config(values, self.output_root)

    def to_text(self) -> str:
        return "".join(f"{key} = {self.values[key]}\n" for key in DEFAULTS)


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def build_config(values: Dict[str, str], output_root: Optional[Path] = None) -> ExperimentConfig:
    unknown = set(values) - set(DEFAULTS)
    if unknown:
        raise ConfigError("unknown key", key=sorted(unknown)[0])
    merged = dict(DEFAULTS)
    merged.update(values)
    parsed: Dict[str, object] = {}
    for key, parser in PARSERS.items():
        try:
            parsed[key] = parser(merged[key])
        except ValueError as exc:
            raise ConfigError(str(exc), key=key) from None

    try:
        problem = ProblemFactory.get_problem_by_name(parsed["problem"])
    except ContractViolation as exc:
        raise ConfigError(str(exc), key="problem") from None
    if parsed["T"] is not None and problem.is_parabolic:
        problem = problem.with_horizon(parsed["T"])

    time_steps = 1
    if problem.is_parabolic:
        k = parsed["time_step"]
        if k <= 0:
            raise ConfigError("time step must be positive", key="time_step")
        time_steps = max(int(round(problem.T / k)), 1)
        if abs(time_steps * k - problem.T) > 1e-9 * problem.T:
            raise ConfigError(f"time step {k} does not divide the horizon {problem.T}", key="time_step")

    name = parsed["name"] or "run"
    merged["name"] = name
    try:
        energy = EnergySpec(
            scheme=parsed["scheme"], tau=parsed["tau"], mu=parsed["mu"], lam=parsed["lambda"],
            initial_norm=parsed["initial_norm"], bc_mode=parsed["bc_mode"],
        )
        arch = Architecture.from_hidden(problem.input_dim, parsed["hidden"], parsed["activation"])
        optimizer = OptimizerConfig(
            parsed["optimizer"], parsed["lr"], parsed["beta1"], parsed["beta2"], parsed["eps"]
        )
        train_config = TrainConfig(
            arch=arch, seed=parsed["seed"], n_interior=parsed["n_interior"],
            n_boundary=parsed["n_boundary"], n_initial=parsed["n_initial"], optimizer=optimizer,
            max_iters=parsed["max_iters"], log_every=parsed["log_every"],
            resample_every=parsed["resample_every"], divergence_threshold=parsed["divergence_threshold"],
            time_steps=time_steps, n_eval=parsed["n_eval"], converge_tol=parsed["converge_tol"],
            zero_final_layer=parsed["zero_final_layer"], resample_levels=parsed["resample_levels"],
        )
    except ConfigError:
        raise
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from None
    if problem.is_parabolic == (energy.scheme is Scheme.ELLIPTIC):
        raise ConfigError(f"scheme '{energy.scheme.value}' does not fit problem {problem.name}", key="scheme")
    if parsed["snapshot_nx"] < 2:
        raise ConfigError("need at least 2 snapshot points", key="snapshot_nx")

    return ExperimentConfig(
        name=name,
        values=merged,
        problem=problem,
        energy=energy,
        train=train_config,
        snapshot_times=parsed["snapshot_times"],
        snapshot_nx=parsed["snapshot_nx"],
        checkpoint=parsed["checkpoint"],
        output_root=Path(output_root) if output_root is not None else default_output_root(),
    )


def load_config(
    source: str,
    overrides: Sequence[str] = (),
    output_root: Optional[Path] = None,
) -> ExperimentConfig:
    """Preset name or config file, then `key=value` overrides"""
    if source in PRESETS:
        values = preset_values(source)
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"'{source}' is neither a preset nor a config file")
        file_values = parse_config_text(path.read_text(encoding="utf-8"))
        base = file_values.pop("preset", None)
        values = preset_values(base) if base else dict(DEFAULTS)
        values["name"] = path.stem
        values.update(file_values)
    values.update(parse_overrides(overrides))
    return build_config(values, output_root)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunArtifacts:
    run_dir: Path
    trajectory_csv: Path
    snapshot_csv: Optional[Path]
    report_csv: Path
    checkpoint: Optional[Path]
    config_file: Path
    termination: Termination

    @property
    def exit_code(self) -> int:
        return exit_code_for(self.termination)


def exit_code_for(termination: Termination) -> int:
    if termination is Termination.DIVERGED:
        return EXIT_DIVERGED
    if termination is Termination.NON_FINITE:
        return EXIT_NON_FINITE
    return EXIT_OK


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="nan", encoding="utf-8")
    return path


def trajectory_frame(trajectory: TrainTrajectory, parabolic: bool) -> pd.DataFrame:
    rows = []
    for record in trajectory.records:
        report = record.report
        row = {"iteration": record.iteration, "energy": record.energy, "grad_norm": record.grad_norm}
        if parabolic:
            row.update(l2h2_bar=report.l2h2_bar, l2l2_hat_dt=report.l2l2_hat_dt)
        else:
            row.update(h1=report.h1_norm, h2=report.h2_norm)
        row.update(
            sup_norm=report.sup_norm, error_l2=report.error_l2, error_h1=report.error_h1, wall_ms=record.wall_ms
        )
        rows.append(row)
    columns = TRAJECTORY_COLUMNS_PARABOLIC if parabolic else TRAJECTORY_COLUMNS_ELLIPTIC
    return pd.DataFrame(rows, columns=columns)


def report_row(config: ExperimentConfig, trajectory: TrainTrajectory) -> Dict[str, object]:
    final = trajectory.final
    report = final.report
    return {
        "name": config.name,
        "problem": config.problem.name,
        "scheme": config.energy.scheme.value,
        "termination": trajectory.termination.value,
        "iterations": final.iteration,
        "energy": final.energy,
        "grad_norm": final.grad_norm,
        "h1": report.h1_norm,
        "h2": report.h2_norm,
        "l2h2_bar": report.l2h2_bar,
        "l2l2_hat_dt": report.l2l2_hat_dt,
        "sup_norm": report.sup_norm,
        "instability": instability_indicator(trajectory),
        "mr_identity_residual": report.mr_identity_residual,
        "mr_slack": report.mr_slack,
        "error_l2": report.error_l2,
        "rel_error_l2": report.rel_error_l2,
        "error_h1": report.error_h1,
        "regularizer": report.regularizer,
        "seed": config.seed,
        "wall_ms": final.wall_ms,
    }


def snapshot_profiles(
    params: MlpParams,
    problem: ProblemSpec,
    spec: EnergySpec,
    times: Sequence[float],
    n_x: int,
) -> pd.DataFrame:
    """
    Network profiles on a uniform x-grid at each requested time, preceded by
    the initial datum (series 'initial', t = 0) for parabolic problems.
    Elliptic problems give one network profile, reported at t = 0.
    """
    if problem.spatial_dim != 1:
        raise ContractViolation(f"{problem.name}: profiles are only defined for 1D problems")
    if n_x < 2:
        raise ContractViolation(f"need at least 2 profile points, got {n_x}")
    field = build_field(params, problem, spec)
    x = torch.linspace(0.0, 1.0, n_x, dtype=DTYPE)[:, None]
    xs = x[:, 0].tolist()
    rows: List[Dict[str, object]] = []

    def add(series: str, t: float, values: torch.Tensor):
        rows.extend({"series": series, "t": t, "x": xi, "u": ui} for xi, ui in zip(xs, values.tolist()))

    with torch.no_grad():
        if not problem.is_parabolic:
            add("network", 0.0, field.value(x))
        else:
            add("initial", 0.0, problem.u0.value(x))
            for t in times:
                if not 0.0 <= t <= problem.T:
                    raise ContractViolation(f"snapshot time {t} outside [0, {problem.T}]")
                add("network", float(t), TimeSliceField(field, t, 1).value(x))
    return pd.DataFrame(rows, columns=SNAPSHOT_COLUMNS)


def _snapshot_times(config: ExperimentConfig, trajectory_grid) -> Tuple[float, ...]:
    if config.snapshot_times:
        return config.snapshot_times
    if trajectory_grid is not None:
        return trajectory_grid.nodes
    return (0.0,)


def execute(config: ExperimentConfig) -> Tuple[RunArtifacts, TrainTrajectory]:
    """Train, then write config.txt, trajectory.csv, snapshots.csv, report.csv and the checkpoint"""
    run_dir = config.output_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    config_file = run_dir / "config.txt"
    config_file.write_text(config.to_text(), encoding="utf-8")
    checkpoint = run_dir / "checkpoint.txt" if config.checkpoint else None

    train_config = config.train
    if checkpoint is not None:
        train_config = dataclasses.replace(train_config, checkpoint_path=str(checkpoint))
    trajectory = train(config.problem, config.energy, train_config)

    parabolic = config.problem.is_parabolic
    trajectory_csv = write_csv(trajectory_frame(trajectory, parabolic), run_dir / "trajectory.csv")
    report_csv = write_csv(pd.DataFrame([report_row(config, trajectory)], columns=REPORT_COLUMNS), run_dir / "report.csv")
    snapshot_csv = None
    if config.problem.spatial_dim == 1:
        frame = snapshot_profiles(
            trajectory.params, config.problem, config.energy,
            _snapshot_times(config, trajectory.grid), config.snapshot_nx,
        )
        snapshot_csv = write_csv(frame, run_dir / "snapshots.csv")
    if checkpoint is not None:
        save_checkpoint(trajectory.params, checkpoint)

    artifacts = RunArtifacts(
        run_dir, trajectory_csv, snapshot_csv, report_csv, checkpoint, config_file, trajectory.termination
    )
    return artifacts, trajectory


def run_experiment(config: ExperimentConfig) -> RunArtifacts:
    return execute(config)[0]


def _verdict(termination: Termination) -> str:
    return "unstable" if termination in (Termination.DIVERGED, Termination.NON_FINITE) else "stable"


def compare_schemes(
    config: ExperimentConfig,
    schemes: Sequence[Scheme] = (Scheme.IE, Scheme.EE),
) -> Path:
    """
    Run the same configuration (seed, points, grid) once per scheme and
    write a one-row comparison.csv with prefixed indicator columns.
    """
    if len(schemes) < 2 or any(s not in (Scheme.IE, Scheme.EE, Scheme.EXACT_TIME) for s in schemes):
        raise ContractViolation("comparison needs at least two parabolic schemes")
    row: Dict[str, object] = {
        "name": config.name,
        "problem": config.problem.name,
        "time_step": config.values["time_step"],
        "n_interior": config.train.n_interior,
        "seed": config.seed,
    }
    for scheme in schemes:
        sub = config.with_overrides({"scheme": scheme.value, "name": f"{config.name}/{scheme.value}"})
        _, trajectory = execute(sub)
        report = trajectory.final.report
        prefix = scheme.value
        row.update({
            f"{prefix}_termination": trajectory.termination.value,
            f"{prefix}_instability": instability_indicator(trajectory),
            f"{prefix}_sup_norm": report.sup_norm,
            f"{prefix}_l2h2_bar": report.l2h2_bar,
            f"{prefix}_l2l2_hat_dt": report.l2l2_hat_dt,
            f"{prefix}_error_l2": report.error_l2,
            f"{prefix}_energy": trajectory.final.energy,
            f"{prefix}_verdict": _verdict(trajectory.termination),
        })
    config.output_dir.mkdir(parents=True, exist_ok=True)
    return write_csv(pd.DataFrame([row]), config.output_dir / "comparison.csv")


def axis_overrides(config: ExperimentConfig, axis: str, value: float) -> Dict[str, object]:
    if axis == "width":
        depth = len(config.train.arch.layer_widths) - 2
        return {"hidden": ",".join([str(int(value))] * depth)}
    if axis == "n_points":
        return {"n_interior": int(value), "n_initial": int(value)}
    if axis == "k":
        return {"time_step": value}
    if axis == "lambda":
        return {"lambda": value}
    raise ConfigError(f"Unknown sweep axis: {axis}. Available: {list(SWEEP_AXES)}")


def derive_seed(seed: int, repeat: int) -> int:
    """Independent 63-bit seed for repeat r of a base seed"""
    state = np.random.SeedSequence([seed, repeat]).generate_state(1, dtype=np.uint64)[0]
    return int(state) >> 1


def _sweep_task(task: Tuple[Dict[str, str], str, str, float, int]) -> Dict[str, object]:
    values, output_root, axis, value, repeat = task
    config = build_config(values, Path(output_root))
    start = time.perf_counter()
    trajectory = train(config.problem, config.energy, config.train)
    row = report_row(config, trajectory)
    row.update(axis=axis, value=value, repeat=repeat, wall_ms=(time.perf_counter() - start) * 1000.0)
    return row


def sweep(
    config: ExperimentConfig,
    axis: str,
    values: Sequence[float],
    seeds: int = 1,
    jobs: int = 1,
) -> Path:
    """One run per (value, repeat); writes sweep_<axis>.csv under the run directory"""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"Unknown sweep axis: {axis}. Available: {list(SWEEP_AXES)}")
    if seeds < 1 or jobs < 1 or not values:
        raise ConfigError("sweep needs at least one value, one seed and one job")
    tasks = []
    for value in values:
        for repeat in range(seeds):
            overrides = axis_overrides(config, axis, value)
            overrides["seed"] = derive_seed(config.seed, repeat) if seeds > 1 else config.seed
            overrides["name"] = f"{config.name}/{axis}={value}/r{repeat}"
            resolved = config.with_overrides(overrides)
            tasks.append((resolved.values, str(config.output_root), axis, value, repeat))

    logger.info("sweeping %s over %s with %d seed(s), %d job(s)", axis, list(values), seeds, jobs)
    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            rows = pool.map(_sweep_task, tasks)
    else:
        rows = [_sweep_task(task) for task in tasks]

    columns = ["axis", "value", "repeat"] + REPORT_COLUMNS
    config.output_dir.mkdir(parents=True, exist_ok=True)
    return write_csv(pd.DataFrame(rows, columns=columns), config.output_dir / f"sweep_{axis}.csv")


def snapshot_run(run_dir: Path, times: Optional[Sequence[float]] = None, n_x: Optional[int] = None) -> Path:
    """Re-evaluate profiles from a finished run's config.txt and checkpoint.txt"""
    config = load_config(str(run_dir / "config.txt"), output_root=run_dir.parent)
    params = load_checkpoint(run_dir / "checkpoint.txt")
    grid_times: Sequence[float] = times if times else config.snapshot_times
    if not grid_times:
        if config.problem.is_parabolic:
            N = config.train.time_steps
            grid_times = tuple(config.problem.T * n / N for n in range(N + 1))
        else:
            grid_times = (0.0,)
    frame = snapshot_profiles(params, config.problem, config.energy, grid_times, n_x or config.snapshot_nx)
    return write_csv(frame, run_dir / "snapshots.csv")


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def _banner(title: str):
    print("=" * 80)
    print(title)
    print("=" * 80)


def _print_config(config: ExperimentConfig):
    values = config.values
    print(f"Experiment: {config.name}")
    if values["description"]:
        print(f"  {values['description']}")
    print(f"Problem: {config.problem.name} ({config.energy.scheme.value}, {config.energy.bc_mode.value} boundary)")
    print(f"Network: {list(config.train.arch.layer_widths)} {config.train.arch.activation}")
    print(f"Points: {config.train.n_interior} interior, iterations: {config.train.max_iters:,}")
    if config.problem.is_parabolic:
        print(f"Time grid: T = {config.problem.T}, k = {values['time_step']} ({config.train.time_steps} steps)")
    print(f"Output: {config.output_dir}")
    print()


def _command_run(args) -> int:
    config = load_config(args.config, args.set, args.output_root)
    _banner("Residual-minimization run")
    _print_config(config)
    start = time.time()
    artifacts, trajectory = execute(config)
    final = trajectory.final
    print(f"\nFinished in {time.time() - start:.1f} seconds: {artifacts.termination.value}")
    print(f"  energy       {final.energy:.6e}")
    print(f"  sup-norm     {final.report.sup_norm:.6g}")
    print(f"  instability  {instability_indicator(trajectory):.6g}")
    if not math.isnan(final.report.error_l2):
        print(f"  L2 error     {final.report.error_l2:.6e} (relative {final.report.rel_error_l2:.3e})")
    print(f"\nArtifacts in {artifacts.run_dir}")
    return artifacts.exit_code


def _command_compare(args) -> int:
    config = load_config(args.config, args.set, args.output_root)
    _banner("Implicit vs explicit time-discrete energies")
    _print_config(config)
    path = compare_schemes(config)
    frame = pd.read_csv(path)
    for scheme in ("ie", "ee"):
        print(
            f"  {scheme.upper()}: {frame.loc[0, f'{scheme}_termination']:<10} "
            f"instability {frame.loc[0, f'{scheme}_instability']:.4g} -> {frame.loc[0, f'{scheme}_verdict']}"
        )
    print(f"\nComparison written to {path}")
    return EXIT_OK


def _command_sweep(args) -> int:
    config = load_config(args.config, args.set, args.output_root)
    try:
        values = _parse_floats(args.values)
    except ValueError as exc:
        raise ConfigError(str(exc), key="values") from None
    _banner(f"Sweep over {args.axis}")
    _print_config(config)
    path = sweep(config, args.axis, values, seeds=args.seeds, jobs=args.jobs)
    print(f"Sweep written to {path}")
    return EXIT_OK


def _command_snapshot(args) -> int:
    try:
        times = _parse_floats(args.times) if args.times else None
    except ValueError as exc:
        raise ConfigError(str(exc), key="times") from None
    path = snapshot_run(Path(args.run_dir), times, args.nx)
    print(f"Snapshots written to {path}")
    return EXIT_OK


def _command_presets(args) -> int:
    _banner("Available presets")
    for name, preset in PRESETS.items():
        print(f"  {name:<16} {preset.get('description', '')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pinnlab",
        description="Residual-minimization training laboratory",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
Presets:
    {", ".join(PRESETS)}

Environment:
    {OUTPUT_ROOT_ENV}   output root for run directories (default: ./runs)

Exit codes:
    0 finished (MaxIters or Converged)   2 configuration error
    3 Diverged                           4 NonFinite
    5 filesystem error
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    parser.add_argument("--output-root", type=Path, default=None, help="Override the output root directory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("config", help="Preset name or path to a key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override a config key")

    p_run = sub.add_parser("run", help="Train one configuration and write its artifacts")
    add_config_args(p_run)
    p_run.set_defaults(handler=_command_run)

    p_compare = sub.add_parser("compare", help="Run implicit and explicit energies side by side")
    add_config_args(p_compare)
    p_compare.set_defaults(handler=_command_compare)

    p_sweep = sub.add_parser("sweep", help="Repeat a configuration over one parameter axis")
    add_config_args(p_sweep)
    p_sweep.add_argument("--axis", choices=SWEEP_AXES, required=True, help="Parameter to vary")
    p_sweep.add_argument("--values", required=True, help="Comma-separated axis values")
    p_sweep.add_argument("--seeds", type=int, default=1, help="Repeats per value (default: 1)")
    p_sweep.add_argument("--jobs", type=int, default=1, help="Parallel worker processes (default: 1)")
    p_sweep.set_defaults(handler=_command_sweep)

    p_snapshot = sub.add_parser("snapshot", help="Write solution profiles of a finished run")
    p_snapshot.add_argument("run_dir", help="Run directory holding config.txt and checkpoint.txt")
    p_snapshot.add_argument("--times", default=None, help="Comma-separated times (default: grid nodes)")
    p_snapshot.add_argument("--nx", type=int, default=None, help="Profile points")
    p_snapshot.set_defaults(handler=_command_snapshot)

    p_presets = sub.add_parser("presets", help="List the preset experiments")
    p_presets.set_defaults(handler=_command_presets)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as exc:
        print(f"Invalid experiment: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"Filesystem error: {exc}", file=sys.stderr)
        return EXIT_FILESYSTEM


def cli():
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\nRun cancelled by user.")
        sys.exit(1)
    except Exception as e:
        print(f"\nUnexpected error: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)


if __name__ == "__main__":
    cli()

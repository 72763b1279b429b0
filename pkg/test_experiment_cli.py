"""
Tests for experiment configuration, artifacts and the command line
"""

import math

import pandas as pd
import pytest

from autodiff_core import load_checkpoint
from experiment_cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_FILESYSTEM,
    EXIT_NON_FINITE,
    EXIT_OK,
    PRESETS,
    REPORT_COLUMNS,
    SNAPSHOT_COLUMNS,
    TRAJECTORY_COLUMNS_ELLIPTIC,
    TRAJECTORY_COLUMNS_PARABOLIC,
    ConfigError,
    axis_overrides,
    build_config,
    compare_schemes,
    derive_seed,
    exit_code_for,
    load_config,
    main,
    parse_config_text,
    parse_overrides,
    preset_values,
    run_experiment,
    snapshot_profiles,
    snapshot_run,
    sweep,
)
from operators_residuals import Scheme
from training import Termination, init_params

TINY_ELLIPTIC = ["hidden=4", "n_interior=8", "max_iters=3", "log_every=1", "n_eval=21", "snapshot_nx=5"]
TINY_HEAT = [
    "hidden=4", "n_interior=8", "n_initial=8", "max_iters=2", "log_every=1", "n_eval=21",
    "time_step=0.5", "snapshot_nx=5",
]


def header(path):
    return path.read_text(encoding="utf-8").splitlines()[0]


class TestConfigText:
    """Flat key = value configuration files"""

    def test_comments_and_blank_lines(self):
        values = parse_config_text("# heat run\n\nproblem = heat-sin  # bundled\nscheme = ie\n")
        assert values == {"problem": "heat-sin", "scheme": "ie"}

    def test_duplicate_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("seed = 1\nseed = 2\n")
        assert info.value.line == 2
        assert info.value.key == "seed"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("learning_rate = 0.1\n")

    def test_missing_separator(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config_text("seed 1\n")

    def test_overrides(self):
        assert parse_overrides(["lr=0.01", "hidden = 8,8"]) == {"lr": "0.01", "hidden": "8,8"}
        with pytest.raises(ConfigError):
            parse_overrides(["lr"])
        with pytest.raises(ConfigError):
            parse_overrides(["depth=3"])


class TestBuildConfig:
    """Resolution and validation of run specifications"""

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_resolve(self, name, tmp_path):
        config = build_config(preset_values(name), tmp_path)
        assert config.name == name
        assert config.output_dir == tmp_path / name
        assert config.train.arch.input_dim == config.problem.input_dim

    def test_figure_one_grid(self, tmp_path):
        config = build_config(preset_values("fig1-left"), tmp_path)
        assert config.problem.T == 2.0
        assert config.train.time_steps == 5
        assert config.energy.scheme is Scheme.EE

    @pytest.mark.parametrize("name", sorted(n for n in PRESETS if n.startswith("fig")))
    def test_figure_presets_flag_growth_past_twice_initial(self, name, tmp_path):
        config = build_config(preset_values(name), tmp_path)
        assert config.train.divergence_threshold == 1.0
        assert config.train.max_iters == 10000
        assert config.train.arch.layer_widths == (2, 32, 32, 32, 1)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="Unknown preset"):
            preset_values("fig9")

    def test_time_step_must_divide_horizon(self, tmp_path):
        values = preset_values("heat-ie")
        values["time_step"] = "0.3"
        with pytest.raises(ConfigError) as info:
            build_config(values, tmp_path)
        assert info.value.key == "time_step"

    def test_scheme_must_fit_problem(self, tmp_path):
        values = preset_values("elliptic-sin")
        values["scheme"] = "ie"
        with pytest.raises(ConfigError):
            build_config(values, tmp_path)

    def test_bad_values(self, tmp_path):
        for key, value in (("seed", "abc"), ("scheme", "rk4"), ("zero_final_layer", "maybe"), ("problem", "wave")):
            values = preset_values("elliptic-sin")
            values[key] = value
            with pytest.raises(ConfigError) as info:
                build_config(values, tmp_path)
            assert info.value.key == key

    def test_contract_violations_become_config_errors(self, tmp_path):
        values = preset_values("elliptic-sin")
        values["tau"] = "-1"
        with pytest.raises(ConfigError):
            build_config(values, tmp_path)

    def test_text_round_trip(self, tmp_path):
        config = build_config(preset_values("fig2-ie"), tmp_path)
        again = build_config(parse_config_text(config.to_text()), tmp_path)
        assert again.values == config.values

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "my-run.txt"
        path.write_text("preset = heat-ie\nlr = 0.01\n", encoding="utf-8")
        config = load_config(str(path), ["seed=9"], tmp_path)
        assert config.name == "my-run"
        assert config.train.optimizer.lr == 0.01
        assert config.seed == 9
        assert config.problem.name == "heat-sin"

    def test_load_missing_source(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.txt"))

    def test_output_root_from_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv("PINNLAB_OUTPUT_ROOT", str(tmp_path))
        assert load_config("elliptic-sin").output_dir == tmp_path / "elliptic-sin"


class TestArtifacts:
    """CSV files, checkpoints and exit codes of single runs"""

    def test_exit_codes(self):
        assert exit_code_for(Termination.MAX_ITERS) == EXIT_OK
        assert exit_code_for(Termination.CONVERGED) == EXIT_OK
        assert exit_code_for(Termination.DIVERGED) == EXIT_DIVERGED
        assert exit_code_for(Termination.NON_FINITE) == EXIT_NON_FINITE

    def test_elliptic_run(self, tmp_path):
        artifacts = run_experiment(load_config("elliptic-sin", TINY_ELLIPTIC, tmp_path))
        assert artifacts.termination is Termination.MAX_ITERS
        assert header(artifacts.trajectory_csv) == "iteration,energy,grad_norm,h1,h2,sup_norm,error_l2,error_h1,wall_ms"
        assert header(artifacts.trajectory_csv).split(",") == TRAJECTORY_COLUMNS_ELLIPTIC
        assert header(artifacts.report_csv).split(",") == REPORT_COLUMNS
        assert header(artifacts.snapshot_csv) == "series,t,x,u"
        trajectory = pd.read_csv(artifacts.trajectory_csv)
        assert trajectory["iteration"].tolist() == [0, 1, 2, 3]
        report_text = artifacts.report_csv.read_text(encoding="utf-8")
        assert ",nan," in report_text
        params = load_checkpoint(artifacts.checkpoint)
        assert params.arch.layer_widths == (1, 4, 1)
        assert (artifacts.run_dir / "config.txt").exists()

    def test_parabolic_run(self, tmp_path):
        artifacts = run_experiment(load_config("heat-ie", TINY_HEAT, tmp_path))
        assert header(artifacts.trajectory_csv).split(",") == TRAJECTORY_COLUMNS_PARABOLIC
        snapshots = pd.read_csv(artifacts.snapshot_csv)
        assert list(snapshots.columns) == SNAPSHOT_COLUMNS
        assert snapshots.loc[snapshots["series"] == "initial", "t"].unique().tolist() == [0.0]
        assert sorted(snapshots.loc[snapshots["series"] == "network", "t"].unique().tolist()) == [0.0, 0.5, 1.0]
        report = pd.read_csv(artifacts.report_csv)
        assert report.loc[0, "scheme"] == "ie"
        assert not math.isnan(report.loc[0, "l2h2_bar"])

    def test_snapshot_profiles(self):
        config = build_config(preset_values("elliptic-sin"))
        params = init_params(config.train.arch, 0)
        frame = snapshot_profiles(params, config.problem, config.energy, (), 11)
        assert frame["series"].unique().tolist() == ["network"]
        assert frame["t"].unique().tolist() == [0.0]
        assert frame["u"].iloc[0] == 0.0

    def test_snapshot_time_outside_horizon(self):
        config = build_config(preset_values("heat-ie"))
        params = init_params(config.train.arch, 0)
        with pytest.raises(Exception):
            snapshot_profiles(params, config.problem, config.energy, (1.5,), 11)

    def test_snapshot_run(self, tmp_path):
        artifacts = run_experiment(load_config("heat-ie", TINY_HEAT, tmp_path))
        path = snapshot_run(artifacts.run_dir, times=(0.25,), n_x=7)
        frame = pd.read_csv(path)
        assert len(frame) == 14
        assert frame["series"].tolist().count("network") == 7


class TestMultiRun:
    """Scheme comparisons and parameter sweeps"""

    def test_compare_schemes(self, tmp_path):
        config = load_config("heat-ie", TINY_HEAT + ["name=cmp"], tmp_path)
        path = compare_schemes(config)
        frame = pd.read_csv(path)
        assert path == tmp_path / "cmp" / "comparison.csv"
        for prefix in ("ie", "ee"):
            assert frame.loc[0, f"{prefix}_verdict"] in ("stable", "unstable")
            assert (tmp_path / "cmp" / prefix / "trajectory.csv").exists()

    def test_compare_needs_two_schemes(self, tmp_path):
        config = load_config("heat-ie", TINY_HEAT, tmp_path)
        with pytest.raises(Exception):
            compare_schemes(config, schemes=(Scheme.IE,))

    def test_sweep_width(self, tmp_path):
        config = load_config("elliptic-sin", TINY_ELLIPTIC + ["hidden=4,4"], tmp_path)
        path = sweep(config, "width", [3, 5], seeds=2)
        frame = pd.read_csv(path)
        assert path.name == "sweep_width.csv"
        assert list(frame.columns[:3]) == ["axis", "value", "repeat"]
        assert len(frame) == 4
        assert frame["seed"].nunique() == 2

    def test_sweep_axes(self, tmp_path):
        config = load_config("heat-ie", TINY_HEAT, tmp_path)
        assert axis_overrides(config, "n_points", 32) == {"n_interior": 32, "n_initial": 32}
        assert axis_overrides(config, "k", 0.25) == {"time_step": 0.25}
        with pytest.raises(ConfigError):
            sweep(config, "depth", [1])

    def test_derived_seeds(self):
        seeds = {derive_seed(0, r) for r in range(20)}
        assert len(seeds) == 20
        assert all(0 <= s < 2 ** 63 for s in seeds)
        assert derive_seed(5, 1) == derive_seed(5, 1)


class TestMain:
    """Command-line entry point"""

    def test_presets(self, capsys):
        assert main(["presets"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "fig1-left" in out and "elliptic-lshape" in out

    def test_run(self, tmp_path):
        argv = ["--output-root", str(tmp_path), "run", "elliptic-sin"]
        for item in TINY_ELLIPTIC:
            argv += ["--set", item]
        assert main(argv) == EXIT_OK
        assert (tmp_path / "elliptic-sin" / "report.csv").exists()

    def test_diverged_exit_code(self, tmp_path):
        argv = ["--output-root", str(tmp_path), "run", "heat-ie", "--set", "divergence_threshold=1e-9"]
        for item in TINY_HEAT:
            argv += ["--set", item]
        assert main(argv) == EXIT_DIVERGED
        report = pd.read_csv(tmp_path / "heat-ie" / "report.csv")
        assert report.loc[0, "termination"] == "Diverged"

    def test_config_errors(self, tmp_path):
        assert main(["--output-root", str(tmp_path), "run", "no-such-preset"]) == EXIT_CONFIG
        assert main(["--output-root", str(tmp_path), "run", "heat-ie", "--set", "depth=3"]) == EXIT_CONFIG
        assert main(["--output-root", str(tmp_path), "run", "heat-ie", "--set", "time_step=0.3"]) == EXIT_CONFIG

    def test_filesystem_error(self, tmp_path):
        blocker = tmp_path / "occupied"
        blocker.write_text("not a directory", encoding="utf-8")
        argv = ["--output-root", str(blocker), "run", "elliptic-sin"]
        for item in TINY_ELLIPTIC:
            argv += ["--set", item]
        assert main(argv) == EXIT_FILESYSTEM

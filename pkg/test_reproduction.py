"""
Long-running reproduction checks against the bundled presets

Each test trains for thousands of iterations; enable with PINNLAB_RUN_SLOW=1.
Stability claims must hold for at least two of the seeds 0, 1 and 2.
"""

import os

import pandas as pd
import pytest

from experiment_cli import EXIT_DIVERGED, compare_schemes, load_config, main, run_experiment, sweep
from training import Termination, instability_indicator, train

pytestmark = pytest.mark.skipif(os.environ.get("PINNLAB_RUN_SLOW") != "1", reason="set PINNLAB_RUN_SLOW=1 to run")

SEEDS = (0, 1, 2)


def majority(flags):
    return sum(bool(f) for f in flags) >= 2


def peak_sup(trajectory):
    return max(r.report.sup_norm for r in trajectory.records)


def train_preset(name, seed, tmp_path, overrides=()):
    config = load_config(name, [f"seed={seed}", "checkpoint=false", *overrides], tmp_path / f"s{seed}")
    return train(config.problem, config.energy, config.train)


class TestEllipticAccuracy:
    """Hard-constrained network on -u'' = pi^2 sin(pi x)"""

    def test_relative_l2_error(self, tmp_path):
        config = load_config("elliptic-sin", ["checkpoint=false"], tmp_path)
        assert config.train.arch.layer_widths == (1, 32, 32, 1)
        trajectory = train(config.problem, config.energy, config.train)
        assert trajectory.termination in (Termination.MAX_ITERS, Termination.CONVERGED)
        assert trajectory.final.report.rel_error_l2 <= 5e-2

    def test_error_does_not_grow_with_width(self, tmp_path):
        config = load_config("elliptic-sin", ["checkpoint=false", "name=width"], tmp_path)
        frame = pd.read_csv(sweep(config, "width", [8, 16, 32], seeds=3, jobs=3))
        best = frame.groupby("value")["error_l2"].min().sort_index().tolist()
        # best of three seeds per width, within 10%
        assert best[1] <= 1.1 * best[0]
        assert best[2] <= 1.1 * best[1]

    def test_regularizer_does_not_grow_with_lambda(self, tmp_path):
        config = load_config("elliptic-sin", ["checkpoint=false", "name=lambda"], tmp_path)
        frame = pd.read_csv(sweep(config, "lambda", [0.0, 1.0, 10.0], jobs=3))
        regularizer = frame.sort_values("value")["regularizer"].tolist()
        assert regularizer[0] >= regularizer[1] >= regularizer[2]


class TestExplicitInstability:
    """Explicit vs implicit time-discrete energies at a large time step"""

    def test_explicit_large_step_diverges(self, tmp_path):
        codes = [
            main(["--output-root", str(tmp_path / f"s{s}"), "run", "fig1-left", "--set", f"seed={s}"]) for s in SEEDS
        ]
        assert majority(code == EXIT_DIVERGED for code in codes)

    def test_implicit_large_step_bounded(self, tmp_path):
        artifacts = run_experiment(load_config("fig1-ie", (), tmp_path))
        assert artifacts.termination is not Termination.DIVERGED
        assert artifacts.termination is not Termination.NON_FINITE

    @pytest.mark.parametrize("name", ["fig1-right", "fig1-ie"])
    def test_stays_within_twice_initial_datum(self, name, tmp_path):
        trajectories = [train_preset(name, s, tmp_path) for s in SEEDS]
        assert majority(peak_sup(t) <= 2.0 * t.u0_sup for t in trajectories)


class TestSchemeComparison:
    """Paired runs of both schemes on the sign-changing datum"""

    def test_moderate_step_separates_schemes(self, tmp_path):
        verdicts = []
        for s in SEEDS:
            config = load_config("fig2-ie", [f"seed={s}", "checkpoint=false", f"name=fig2-s{s}"], tmp_path)
            verdicts.append(pd.read_csv(compare_schemes(config)).loc[0])
        assert majority(v["ee_verdict"] == "unstable" for v in verdicts)
        assert majority(v["ie_verdict"] == "stable" for v in verdicts)

    def test_small_step_keeps_both_stable(self, tmp_path):
        verdicts = []
        for s in SEEDS:
            config = load_config("fig3-ie", [f"seed={s}", "checkpoint=false", f"name=fig3-s{s}"], tmp_path)
            verdicts.append(pd.read_csv(compare_schemes(config)).loc[0])
        assert majority(v["ee_verdict"] == "stable" and v["ie_verdict"] == "stable" for v in verdicts)

    def test_more_points_raise_explicit_indicator(self, tmp_path):
        sparse = [instability_indicator(train_preset("fig3-ee", s, tmp_path / "16")) for s in SEEDS]
        dense = [instability_indicator(train_preset("fig4-ee", s, tmp_path / "100")) for s in SEEDS]
        assert majority(d > s for d, s in zip(dense, sparse))

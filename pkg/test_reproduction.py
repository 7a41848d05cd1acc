"""
Full-scale training runs on the benchmark problems, scored on their test
grids. Hours of CPU each; deselected unless run with `-m reproduction`.
"""

import math

import pytest

from errors import ExitCode
from pinf_cli import cmd_eval, cmd_train, main
from run_config import RunConfig, validate

pytestmark = pytest.mark.reproduction


def run_config(tmp_path, problem, dim, seed=0, **sections) -> RunConfig:
    return validate({"out": str(tmp_path), "problem": {"name": problem, "d": dim}, **sections,
                     "train": {"lr": 0.01, "batch": 2000, "seed": seed, **sections.get("train", {})}})


def train_and_eval(cfg: RunConfig):
    trace = cmd_train(cfg)
    return trace, cmd_eval(cfg, trace.checkpoint).aggregates()


class TestTimeDependent:

    def test_gaussian_in_two_dimensions(self, tmp_path):
        cfg = run_config(tmp_path, "tfp-gauss", 2, model={"m": 32, "L": 4}, train={"iterations": 2000}, mode="ode")
        trace, agg = train_and_eval(cfg)
        assert agg["points"] > 0
        assert agg["ode_mape"] < 5.0
        assert trace.initial_loss / trace.smoothed(50)[-1] >= 20.0

    def test_gaussian_in_ten_dimensions_completes(self, tmp_path):
        cfg = run_config(tmp_path, "tfp-gauss", 10, model={"m": 32, "L": 4}, train={"iterations": 10_000}, mode="ode")
        trace, agg = train_and_eval(cfg)
        assert len(trace.losses) + len(trace.skipped) == 10_000
        assert math.isfinite(agg["ode_mape"])
        smoothed = trace.smoothed(500)
        assert smoothed[-1] < smoothed[499]


class TestSteadyState:

    def test_ou_in_ten_dimensions(self, tmp_path):
        errors = []
        for seed in range(3):
            cfg = run_config(tmp_path / f"seed{seed}", "sfp-ou", 10, seed,
                             model={"flow-layers": 4}, train={"iterations": 500})
            _, agg = train_and_eval(cfg)
            errors.append(agg["net_mean_rel"])
        assert min(errors) < 0.005, errors
        assert max(errors) < 0.01, errors

    def test_ou_in_thirty_dimensions(self, tmp_path):
        errors = []
        for seed in range(3):
            cfg = run_config(tmp_path / f"seed{seed}", "sfp-ou", 30, seed,
                             model={"flow-layers": 4}, train={"iterations": 500, "micro-batch": 25})
            _, agg = train_and_eval(cfg)
            errors.append(agg["net_mean_rel"])
        assert min(errors) < 0.002, errors
        assert max(errors) < 0.01, errors

    def test_ou_in_fifty_dimensions_completes(self, tmp_path):
        argv = ["train", "--problem", "sfp-ou", "--dim", "50", "--out", str(tmp_path),
                "--set", "model.flow-layers=4", "--set", "train.iterations=500", "--set", "train.micro-batch=10"]
        assert main(argv) == ExitCode.OK
        assert (tmp_path / "checkpoint.pt").exists()

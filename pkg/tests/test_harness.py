"""
Tests for egcbf/services/harness.py.

Covers: per-episode metrics, trajectory logs and replay, sweeps over swarm sizes,
result tables and the safety plot.
"""

import logging

import numpy as np
import pytest

from egcbf.config import ModelConfig
from egcbf.exceptions import CheckpointError
from egcbf.models.dynamics import AgentState, stack_states
from egcbf.models.liegroup import random_element
from egcbf.models.world import Episode, WorldConfig, transform_episode
from egcbf.services.harness import (
    RESULT_FIELDS,
    SweepSpec,
    aggregate,
    cell_world,
    plot_safety,
    replay_log,
    run_episode,
    sweep,
    write_results,
)
from egcbf.services.policies import NominalPolicy

OPEN_WORLD = WorldConfig(num_agents=2, num_obstacles=0, lidar_rays=4, episode_len=400)


def _episode(starts, targets):
    return Episode(states=stack_states([AgentState(p=p) for p in starts]), targets=np.asarray(targets, dtype=float))


def _nominal(model, world=OPEN_WORLD):
    return NominalPolicy(model, world)


class TestRunEpisode:
    def test_single_agent_reaches(self, di_model):
        world = OPEN_WORLD.model_copy(update={"num_agents": 1})
        ep = _episode([[0.5, 0.5, 0.5]], [[1.5, 0.5, 0.5]])
        metrics, records = run_episode(_nominal(di_model, world), world, di_model, seed=0, episode=ep)
        assert metrics.safety_rate == 1.0
        assert metrics.reach_rate == 1.0
        assert metrics.cost == 0.0
        assert metrics.reward == 0.0
        assert len([r for r in records if r["type"] == "step"]) == world.episode_len + 1

    def test_head_on_collision_costs(self, di_model):
        a, b = [0.5, 0.5, 0.5], [1.3, 0.5, 0.5]
        metrics, _ = run_episode(_nominal(di_model), OPEN_WORLD, di_model, seed=0, episode=_episode([a, b], [b, a]))
        assert metrics.safety_rate == 0.0
        assert metrics.success_rate == 0.0
        assert metrics.cost >= 1.0

    def test_violation_at_start_is_not_a_cost_event(self, tmp_path, di_model):
        # touching at t = 0, then pulled apart
        a, b = [0.5, 0.5, 0.5], [0.52, 0.5, 0.5]
        ep = _episode([a, b], [[0.2, 0.5, 0.5], [1.5, 0.5, 0.5]])
        path = tmp_path / "start.jsonl"
        metrics, records = run_episode(_nominal(di_model), OPEN_WORLD, di_model, seed=0, episode=ep, horizon=60, log_path=path)
        steps = [r for r in records if r["type"] == "step"]
        assert steps[0]["safe"] == [False, False]
        assert all(steps[-1]["safe"])
        assert metrics.safety_rate == 0.0
        assert metrics.cost == 0.0
        assert replay_log(path, verify=True)["verified"]

    def test_success_is_safe_and_reached(self, di_model):
        ep = _episode([[0.5, 0.5, 0.5], [0.5, 1.5, 0.5]], [[1.5, 0.5, 0.5], [0.5, 1.5, 0.5]])
        metrics, _ = run_episode(_nominal(di_model), OPEN_WORLD, di_model, seed=0, episode=ep, horizon=20)
        expected = [s and r for s, r in zip(metrics.safe_flags, metrics.reach_flags)]
        assert metrics.success_flags == expected
        assert metrics.reach_flags == [False, True]

    def test_metrics_invariant_under_group(self, rng, di_model):
        ep = _episode([[0.5, 0.5, 0.5], [1.2, 0.6, 0.5]], [[1.2, 0.6, 0.5], [0.5, 0.5, 0.5]])
        base, _ = run_episode(_nominal(di_model), OPEN_WORLD, di_model, seed=0, episode=ep, horizon=150)
        moved, _ = run_episode(
            _nominal(di_model), OPEN_WORLD, di_model, seed=0, episode=transform_episode(random_element(rng), ep), horizon=150
        )
        assert moved.safe_flags == base.safe_flags
        assert moved.reach_flags == base.reach_flags
        assert moved.cost == base.cost
        assert moved.reward == pytest.approx(base.reward)

    def test_log_replays_to_the_same_metrics(self, tmp_path, di_model):
        a, b = [0.5, 0.5, 0.5], [1.3, 0.5, 0.5]
        path = tmp_path / "logs" / "episode.jsonl"
        metrics, _ = run_episode(
            _nominal(di_model), OPEN_WORLD, di_model, seed=3, episode=_episode([a, b], [b, a]), horizon=60, log_path=path
        )
        out = replay_log(path, verify=True)
        assert out["verified"], out["mismatches"]
        assert out["steps"] == 60
        assert out["metrics"]["cost"] == metrics.cost

    def test_replay_rejects_headerless_log(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"type": "step", "positions": [[0, 0, 0]]}\n')
        with pytest.raises(ValueError):
            replay_log(path)


class TestSweep:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SweepSpec(None, episodes=0)
        with pytest.raises(ValueError):
            SweepSpec(None, methods=("nominal", "mpc"))

    def test_cell_density(self):
        base = WorldConfig()
        densities = [cell_world(base, n, 2.0, 0).density for n in (1, 4, 16)]
        assert densities == [0.125, 0.5, 2.0]

    def test_deterministic_results(self, tmp_path, tiny_experiment):
        spec = SweepSpec(None, swarm_sizes=(2, 3), side_length=1.5, episodes=2, methods=("nominal",))
        first = write_results(sweep(spec, tiny_experiment), tmp_path / "a")[0].read_text()
        second = write_results(sweep(spec, tiny_experiment), tmp_path / "b")[0].read_text()
        assert first == second
        lines = first.splitlines()
        assert lines[0] == ",".join(RESULT_FIELDS)
        assert len(lines) == 3
        assert lines[1].startswith("nominal,2,")

    def test_learned_needs_checkpoint(self, tiny_experiment):
        with pytest.raises(CheckpointError):
            sweep(SweepSpec(None, swarm_sizes=(2,), episodes=1, methods=("learned",)), tiny_experiment)

    def test_quadrotor_skips_baselines(self, caplog, tiny_experiment):
        exp = tiny_experiment.model_copy(update={"model": ModelConfig(system="quadrotor")})
        spec = SweepSpec(None, swarm_sizes=(2,), side_length=1.5, episodes=1, methods=("ccbf", "nominal"))
        with caplog.at_level(logging.WARNING, logger="egcbf.services.harness"):
            rows = sweep(spec, exp)
        assert [r["method"] for r in rows] == ["nominal"]
        assert "Skipping ccbf" in caplog.text


class TestOutput:
    def _rows(self):
        world = WorldConfig(num_agents=2)
        eps = [
            {"safety_rate": 1.0, "reach_rate": 0.5, "success_rate": 0.5, "cost": 0.0, "reward": -1.25},
            {"safety_rate": 0.5, "reach_rate": 1.0, "success_rate": 0.5, "cost": 1.0, "reward": -0.75},
        ]
        return [aggregate("nominal", world, eps), aggregate("learned", cell_world(world, 4, 2.0, 0), eps)]

    def test_aggregate(self):
        row = self._rows()[0]
        assert row["safe"] == 0.75 and row["reach"] == 0.75 and row["succ"] == 0.5
        assert row["cost_mean"] == 0.5
        assert row["cost_p25"] == 0.25 and row["cost_p75"] == 0.75
        assert row["reward"] == -1.0

    def test_write_results_formats_floats(self, tmp_path):
        csv_path, json_path = write_results(self._rows(), tmp_path)
        lines = csv_path.read_text().splitlines()
        assert lines[1] == "nominal,2,0.250000,0.750000,0.750000,0.500000,0.500000,0.250000,0.750000,-1.000000"
        assert json_path.exists()

    def test_plot_is_svg(self, tmp_path):
        path = plot_safety(self._rows(), tmp_path / "plots" / "safety.svg", num_obstacles=3)
        assert "<svg" in path.read_text()

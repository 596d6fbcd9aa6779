"""
Tests for egcbf/services/learner.py.

Covers: labelling rules, class-balanced batches, the loss (hand-built minima,
gradients, symmetry), Adam, train-state persistence, data collection and the
training loop including divergence handling.
"""

import json
import math

import numpy as np
import pytest

from egcbf.config import TrainConfig
from egcbf.exceptions import TrainingDivergedError
from egcbf.models.liegroup import random_element
from egcbf.models.world import is_safe
from egcbf.services.checkpoint_service import load_checkpoint
from egcbf.services.egformer import init_params, policy_controls
from egcbf.services import learner as learner_module
from egcbf.services.learner import (
    CURVE_FIELDS,
    Dataset,
    Label,
    LossReport,
    LossWeights,
    Snapshot,
    TrainState,
    batch_references,
    collect,
    label_agents,
    loss,
    outer_ring_gradient_ratio,
    reference_controls,
    sample_batch,
    train,
    transform_snapshot,
)
from egcbf.services.policies import snapshot_graph
from egcbf.services.safety import nominal_controls

S, U, N = Label.SAFE, Label.UNSAFE, Label.UNLABELED
NOMINAL = TrainConfig(reference="nominal")


def _snapshot(episode, world, model, labels=None):
    n = episode.num_agents
    return Snapshot(
        graph=snapshot_graph(episode, world),
        targets=episode.targets.copy(),
        controls=nominal_controls(episode.states, episode.targets, model),
        labels=tuple(labels or [S if k % 2 == 0 else U for k in range(n)]),
        obstacle_centers=episode.obstacle_centers.copy(),
        obstacle_radii=episode.obstacle_radii.copy(),
    )


def _constant_cbf(params, value):
    params["cbf.head.W2"] = np.zeros_like(params["cbf.head.W2"])
    params["cbf.head.b2"] = np.full_like(params["cbf.head.b2"], value)
    return params


class TestLabels:
    def test_unsafe_now_wins(self):
        window = np.array([[True, False], [True, True], [True, True]])
        assert label_agents(window, 2) == [S, U]

    def test_short_window_is_unlabeled(self):
        window = np.array([[True, False], [True, True]])
        assert label_agents(window, 3) == [N, U]

    def test_later_violation_is_unlabeled(self):
        assert label_agents(np.array([[True], [False], [True]]), 2) == [N]

    def test_zero_horizon(self):
        assert label_agents(np.array([[True, False]]), 0) == [S, U]


class TestBatches:
    def test_balanced(self, rng, scene, small_world, di_model):
        snap = _snapshot(scene("double_integrator"), small_world, di_model, [S, S, U])
        dataset = Dataset([snap, snap, snap])
        assert dataset.counts() == {"safe": 6, "unsafe": 3, "unlabeled": 0}
        batch = sample_batch(dataset, 4, rng)
        assert sorted(s.label.value for s in batch) == ["safe", "safe", "unsafe", "unsafe"]

    def test_short_class_is_topped_up(self, rng, scene, small_world, di_model):
        snap = _snapshot(scene("double_integrator"), small_world, di_model, [S, S, U])
        batch = sample_batch(Dataset([snap, snap]), 6, rng)
        assert len(batch) == 6
        assert sum(s.label == U for s in batch) == 2

    def test_empty(self, rng, scene, small_world, di_model):
        assert sample_batch(Dataset(), 8, rng) == []
        snap = _snapshot(scene("double_integrator"), small_world, di_model, [N, N, N])
        assert sample_batch(Dataset([snap]), 8, rng) == []
        assert len(sample_batch(Dataset([snap]), 8, rng, use_unlabeled=True)) == 3


class TestLossWeights:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(eta_d=-0.1)

    def test_from_config(self):
        w = LossWeights.from_config(TrainConfig(gamma=0.05, alpha_slope=2.0))
        assert w.gamma == 0.05 and w.alpha.slope == 2.0


class TestLoss:
    def test_empty_batch(self, di_model, make_params):
        with pytest.raises(ValueError):
            loss(make_params(di_model), [], LossWeights(), di_model, NOMINAL)

    def test_zero_at_hand_built_minimum(self, rng, scene, small_world, di_model, make_params):
        params = _constant_cbf(make_params(di_model), 10.0)
        snap = _snapshot(scene("double_integrator"), small_world, di_model, [S, S, S])
        batch = sample_batch(Dataset([snap]), 3, rng)
        refs = {id(snap): policy_controls(params, snap.graph)}
        report = loss(params, batch, LossWeights(), di_model, NOMINAL, references=refs)
        assert report.total == pytest.approx(0.0, abs=1e-12)
        # inactive hinges pass no gradient to the CBF
        assert all(np.all(report.grads[k] == 0.0) for k in params.names("cbf"))

    def test_margin_terms_only(self, rng, scene, small_world, di_model, make_params):
        params = _constant_cbf(make_params(di_model), 0.0)
        snap = _snapshot(scene("double_integrator"), small_world, di_model, [S, U, N])
        batch = sample_batch(Dataset([snap]), 3, rng, use_unlabeled=True)
        weights = LossWeights(eta_c=0.0, eta_d=0.0, gamma=0.02)
        report = loss(params, batch, weights, di_model, NOMINAL)
        assert report.total == pytest.approx(2 * 0.02)
        assert report.counts == {"safe": 1, "unsafe": 1, "unlabeled": 1}
        assert report.components["safe"] == pytest.approx(0.02)
        assert report.components["unsafe"] == pytest.approx(0.02)

    def test_gradient_matches_finite_differences(self, rng):
        from egcbf.services.checks import loss_gradient_error

        assert loss_gradient_error(rng, samples=12) < 1e-3

    def test_derivative_controls_change_only_the_derivative_term(self, rng, scene, small_world, di_model, make_params):
        params = make_params(di_model, seed=4)
        snap = _snapshot(scene("double_integrator"), small_world, di_model)
        batch = sample_batch(Dataset([snap]), 3, rng)
        refs = batch_references(params, batch, di_model, NOMINAL)
        ego = loss(params, batch, LossWeights(), di_model, NOMINAL, references=refs)
        everyone = loss(
            params, batch, LossWeights(), di_model, TrainConfig(reference="nominal", derivative_controls="all"), references=refs
        )
        for part in ("control", "safe", "unsafe"):
            assert everyone.components[part] == pytest.approx(ego.components[part])
        assert math.isfinite(everyone.components["derivative"])

    def test_invariant_under_group(self, rng, scene, small_world, di_model, make_params):
        params = make_params(di_model, seed=2)
        snap = _snapshot(scene("double_integrator"), small_world, di_model)
        weights = LossWeights(gamma=0.5)
        base = loss(params, sample_batch(Dataset([snap]), 3, np.random.default_rng(0)), weights, di_model, NOMINAL)
        for _ in range(3):
            moved = transform_snapshot(random_element(rng), snap, di_model)
            batch = sample_batch(Dataset([moved]), 3, np.random.default_rng(0))
            report = loss(params, batch, weights, di_model, NOMINAL)
            assert report.total == pytest.approx(base.total, abs=1e-6)
            for name, g in base.grads.items():
                assert np.allclose(report.grads[name], g, atol=1e-6)

    def test_invariant_under_group_with_qp_reference(self, rng, scene, small_world, di_model, make_params):
        params = make_params(di_model, seed=3)
        snap = _snapshot(scene("double_integrator"), small_world, di_model)
        weights = LossWeights(gamma=0.5)
        qp = TrainConfig(reference="qp")
        base = loss(params, sample_batch(Dataset([snap]), 3, np.random.default_rng(0)), weights, di_model, qp)
        for _ in range(2):
            moved = transform_snapshot(random_element(rng), snap, di_model)
            batch = sample_batch(Dataset([moved]), 3, np.random.default_rng(0))
            report = loss(params, batch, weights, di_model, qp)
            assert report.total == pytest.approx(base.total, abs=1e-5)
            for name, g in base.grads.items():
                assert np.allclose(report.grads[name], g, atol=1e-5)

    def test_nominal_reference(self, scene, small_world, di_model, make_params):
        ep = scene("double_integrator")
        snap = _snapshot(ep, small_world, di_model)
        ref = reference_controls(make_params(di_model), snap, di_model, NOMINAL)
        assert np.array_equal(ref, nominal_controls(ep.states, ep.targets, di_model))


class TestTrainState:
    def test_first_adam_step_uses_separate_rates(self, tiny_experiment, di_model):
        state = TrainState.create(tiny_experiment, di_model)
        before = state.params.copy()
        grads = {k: np.zeros_like(a) for k, a in state.params.arrays.items()}
        grads["policy.head.b2"] = np.ones_like(grads["policy.head.b2"])
        grads["cbf.head.b2"] = -np.ones_like(grads["cbf.head.b2"])
        state.apply_gradients(grads)
        assert np.allclose(before["policy.head.b2"] - state.params["policy.head.b2"], state.lr_policy, rtol=1e-6)
        assert np.allclose(state.params["cbf.head.b2"] - before["cbf.head.b2"], state.lr_cbf, rtol=1e-6)
        assert np.array_equal(state.params["cbf.head.W2"], before["cbf.head.W2"])
        assert state.step == 1

    def test_save_load_roundtrip(self, tmp_path, tiny_experiment, di_model):
        state = TrainState.create(tiny_experiment, di_model)
        state.apply_gradients({k: np.full_like(a, 0.3) for k, a in state.params.arrays.items()})
        path = state.save(tmp_path / "state.ckpt", {"note": "x"})
        loaded = TrainState.load(path)
        assert loaded.step == 1
        assert loaded.lr_policy == state.lr_policy and loaded.lr_cbf == state.lr_cbf
        for name in state.params.names():
            assert np.array_equal(loaded.params[name], state.params[name])
            assert np.array_equal(loaded.m[name], state.m[name])
            assert np.array_equal(loaded.v[name], state.v[name])
        assert loaded.rng.integers(1 << 30) == state.rng.integers(1 << 30)


class TestCollect:
    def test_labels_follow_safety(self, tiny_experiment, di_model):
        state = TrainState.create(tiny_experiment, di_model)
        dataset = collect(state, tiny_experiment, steps=4, episodes=1)
        assert 0 < len(dataset) <= 4
        world = tiny_experiment.world
        for snap in dataset.snapshots:
            assert snap.num_agents == world.num_agents
            flags, _ = is_safe(snap.states, snap.obstacle_centers, snap.obstacle_radii, world)
            for ok, lab in zip(flags, snap.labels):
                assert (lab == U) == (not ok)

    def test_exploration_snapshots(self, tiny_experiment, di_model):
        exp = tiny_experiment.model_copy(
            update={"train": tiny_experiment.train.model_copy(update={"exploration_prob": 1.0})}
        )
        dataset = collect(TrainState.create(exp, di_model), exp, steps=4, episodes=1)
        # without an unroll, a safe agent cannot be labelled safe
        for k, snap in enumerate(dataset.snapshots):
            if k % exp.train.explore_label_stride:
                assert S not in snap.labels

    @pytest.mark.parametrize("stride, unrolls", [(1, 4), (2, 2)])
    def test_exploration_unroll_stride(self, tiny_experiment, di_model, mocker, stride, unrolls):
        exp = tiny_experiment.model_copy(
            update={
                "train": tiny_experiment.train.model_copy(
                    update={"exploration_prob": 1.0, "explore_label_stride": stride}
                )
            }
        )
        spy = mocker.spy(learner_module, "_unroll_flags")
        dataset = collect(TrainState.create(exp, di_model), exp, steps=4, episodes=1)
        assert len(dataset) == 4
        assert spy.call_count == unrolls

    def test_every_exploration_snapshot_labelled_by_default(self):
        assert TrainConfig().explore_label_stride == 1


class TestTrain:
    def test_zero_iterations_keeps_initial_params(self, tmp_path, tiny_experiment):
        exp = tiny_experiment.model_copy(
            update={"train": tiny_experiment.train.model_copy(update={"iterations": 0})}
        )
        result = train(exp, tmp_path)
        params, meta, _ = load_checkpoint(result.checkpoint_path)
        init = init_params(params.spec, exp.net.init_seed)
        assert all(np.array_equal(params[k], init[k]) for k in init.names())
        assert meta["iteration"] == 0
        assert result.history == []

    def test_divergence_saves_checkpoint(self, tmp_path, tiny_experiment, mocker, scene, di_model):
        snap = _snapshot(scene("double_integrator"), tiny_experiment.world, di_model)
        dataset = Dataset([snap])
        mocker.patch("egcbf.services.learner.collect", return_value=dataset)
        mocker.patch("egcbf.services.learner.sample_batch", return_value=dataset.samples())
        mocker.patch(
            "egcbf.services.learner.loss",
            return_value=LossReport(total=float("nan"), grads={}, components={}, counts={}),
        )
        with pytest.raises(TrainingDivergedError) as err:
            train(tiny_experiment, tmp_path)
        assert err.value.iteration == 0
        assert err.value.checkpoint_path.exists()
        _, meta, _ = load_checkpoint(err.value.checkpoint_path)
        assert meta["diverged"] is True

    def test_short_run_writes_artifacts(self, tmp_path, tiny_experiment):
        result = train(tiny_experiment, tmp_path)
        assert result.checkpoint_path.exists()
        header = result.curve_path.read_text().splitlines()[0]
        assert header.split(",") == list(CURVE_FIELDS)
        summary = json.loads(result.summary_path.read_text())
        assert summary["iterations"] == 2
        assert summary["config_hash"] == tiny_experiment.config_hash()
        assert len(result.history) <= 2
        for row in result.history:
            assert math.isfinite(row["loss"])

    def test_data_budget_does_not_depend_on_workers(self, tmp_path, tiny_experiment, mocker):
        exp = tiny_experiment.model_copy(
            update={"train": tiny_experiment.train.model_copy(update={"iterations": 1, "collect_episodes": 2})}
        )
        spy = mocker.spy(learner_module, "collect")
        sizes = []
        for workers in (1, 2):
            train(exp, tmp_path / f"w{workers}", workers=workers)
            assert spy.call_args.kwargs["episodes"] == 2
            sizes.append(len(spy.spy_return))
        assert sizes[0] == sizes[1]


def test_outer_ring_diagnostic_keys(scene, small_world, di_model, make_params):
    graph = snapshot_graph(scene("double_integrator"), small_world)
    out = outer_ring_gradient_ratio(make_params(di_model), [graph], small_world.comm_range)
    assert {"outer_mean", "inner_mean", "outer_count", "inner_count"} <= set(out)
    assert out["outer_count"] + out["inner_count"] >= 0

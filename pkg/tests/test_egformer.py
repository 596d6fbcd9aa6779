"""
Tests for egcbf/services/egformer.py.

Covers: parameter layout, canonicalisation, policy and CBF symmetry for every
trunk mode, control-set squashing, input gradients against finite differences
and Haar averaging.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from egcbf.config import ModelConfig
from egcbf.models.dynamics import build_model
from egcbf.models.graph import NodeKind, all_subgraphs, transform_graph
from egcbf.models.liegroup import GroupElement, random_element, rot_z, state_transform_matrix, yaw_of
from egcbf.models.world import transform_episode
from egcbf.services.egformer import (
    canonical_states,
    canonicalize,
    cbf_input_gradients,
    cbf_value_and_input_gradient,
    forward_cbf,
    forward_policy,
    haar_invariantize,
    policy_controls,
    rotate_subgraph,
)
from egcbf.services.policies import snapshot_graph


def _graphs(scene, world, system, g):
    ep = scene(system)
    return snapshot_graph(ep, world), snapshot_graph(transform_episode(g, ep), world)


class TestParams:
    def test_layout(self, quad_model, make_params):
        params = make_params(quad_model)
        assert params["policy.head.W2"].shape == (8, 4)
        assert params["cbf.head.W2"].shape == (8, 1)
        assert params["policy.layers.0.W_Q"].shape == (8, 8)
        assert set(params.names("policy")) | set(params.names("cbf")) == set(params.names())
        assert params.num_parameters > 0

    def test_same_seed_same_weights(self, di_model, make_params):
        a, b = make_params(di_model, seed=3), make_params(di_model, seed=3)
        assert all(np.array_equal(a[k], b[k]) for k in a.names())

    def test_with_trunk_copies(self, di_model, make_params):
        params = make_params(di_model)
        raw = params.with_trunk("raw")
        assert raw.spec.trunk == "raw" and params.spec.trunk == "equivariant"
        raw.arrays["cbf.head.b2"][0] = 5.0
        assert params["cbf.head.b2"][0] == 0.0


class TestCanonicalisation:
    def test_ego_lands_at_origin_facing_x(self, scene, small_world):
        graph = snapshot_graph(scene("quadrotor"), small_world)
        sg = all_subgraphs(graph)[0]
        canon = canonical_states(sg.states, sg.kinds, "equivariant")
        assert np.allclose(canon[0, :3], 0.0, atol=1e-12)
        assert yaw_of(canon[0, 3:12].reshape(3, 3)) == pytest.approx(0.0, abs=1e-12)

    def test_static_nodes_keep_padding(self, scene, small_world):
        graph = snapshot_graph(scene("quadrotor"), small_world)
        sg = all_subgraphs(graph)[0]
        canon = canonical_states(sg.states, sg.kinds, "equivariant")
        static = sg.kinds != NodeKind.AGENT
        assert np.array_equal(canon[static, 3:], sg.states[static, 3:])

    def test_relative_only_translates(self, scene, small_world):
        graph = snapshot_graph(scene("double_integrator"), small_world)
        sg = all_subgraphs(graph)[0]
        canon = canonical_states(sg.states, sg.kinds, "relative")
        assert np.allclose(canon[:, :3], sg.states[:, :3] - sg.states[0, :3])
        assert np.array_equal(canon[:, 3:], sg.states[:, 3:])

    def test_unknown_trunk(self, scene, small_world):
        sg = all_subgraphs(snapshot_graph(scene("double_integrator"), small_world))[0]
        with pytest.raises(ValueError):
            canonicalize(sg, "spherical")


class TestSymmetry:
    @pytest.mark.parametrize("system", ["quadrotor", "double_integrator"])
    def test_equivariant_trunk(self, system, rng, scene, small_world, make_params):
        model = build_model(ModelConfig(system=system))
        params = make_params(model, seed=int(rng.integers(1000)))
        for _ in range(3):
            g = random_element(rng)
            graph, moved = _graphs(scene, small_world, system, g)
            U, U_moved = policy_controls(params, graph), policy_controls(params, moved)
            assert np.max(np.abs(U_moved - model.act_controls(g, U))) < 1e-8
            h = [forward_cbf(params, sg) for sg in all_subgraphs(graph)]
            h_moved = [forward_cbf(params, sg) for sg in all_subgraphs(moved)]
            assert np.max(np.abs(np.subtract(h_moved, h))) < 1e-8

    def test_relative_trunk_is_translation_invariant(self, rng, scene, small_world, di_model, make_params):
        params = make_params(di_model, trunk="relative")
        g = GroupElement(0.0, rng.normal(size=3))
        graph, moved = _graphs(scene, small_world, "double_integrator", g)
        h = [forward_cbf(params, sg) for sg in all_subgraphs(graph)]
        h_moved = [forward_cbf(params, sg) for sg in all_subgraphs(moved)]
        assert np.allclose(h, h_moved, atol=1e-10)

    def test_raw_trunk_is_not_invariant(self, rng, scene, small_world, di_model, make_params):
        params = make_params(di_model, trunk="raw")
        g = GroupElement(1.3, [2.0, -1.0, 0.5])
        graph, moved = _graphs(scene, small_world, "double_integrator", g)
        h = [forward_cbf(params, sg) for sg in all_subgraphs(graph)]
        h_moved = [forward_cbf(params, sg) for sg in all_subgraphs(moved)]
        assert np.max(np.abs(np.subtract(h, h_moved))) > 1e-6

    def test_attention_weights_cannot_break_invariance(self, rng, scene, small_world, quad_model, make_params):
        params = make_params(quad_model)
        params["cbf.layers.0.W_Q"] = 50.0 * rng.normal(size=params["cbf.layers.0.W_Q"].shape)
        g = random_element(rng)
        graph, moved = _graphs(scene, small_world, "quadrotor", g)
        h = [forward_cbf(params, sg) for sg in all_subgraphs(graph)]
        h_moved = [forward_cbf(params, sg) for sg in all_subgraphs(moved)]
        assert np.max(np.abs(np.subtract(h, h_moved))) < 1e-8

    @pytest.mark.parametrize("system", ["quadrotor", "double_integrator"])
    def test_zero_parameters_give_squashed_zero(self, system, scene, small_world, make_params):
        model = build_model(ModelConfig(system=system))
        params = make_params(model).zeros_like()
        U = policy_controls(params, snapshot_graph(scene(system), small_world))
        expected = np.zeros(model.control_dim)
        if system == "quadrotor":
            expected[3] = params.spec.thrust_center
        assert np.array_equal(U, np.tile(expected, (U.shape[0], 1)))

    def test_far_duplicate_leaves_h_unchanged(self, scene, small_world, quad_model, make_params):
        params = make_params(quad_model)
        ep = scene("quadrotor")
        twin = ep.states[0].copy()
        twin[0] += 50.0
        crowded = replace(ep, states=np.vstack([ep.states, twin]), targets=np.vstack([ep.targets, ep.targets[0]]))
        h = [forward_cbf(params, sg) for sg in all_subgraphs(snapshot_graph(ep, small_world))]
        h_crowded = [forward_cbf(params, sg) for sg in all_subgraphs(snapshot_graph(crowded, small_world))]
        assert len(h_crowded) == len(h) + 1
        assert np.allclose(h_crowded[: len(h)], h, rtol=0.0, atol=1e-12)


class TestSquashing:
    def test_quadrotor_controls_in_box(self, scene, small_world, quad_model, make_params):
        params = make_params(quad_model)
        for name in params.names("policy.head"):
            params[name] = 100.0 * params[name] + 10.0
        U = policy_controls(params, snapshot_graph(scene("quadrotor"), small_world))
        lo, hi = quad_model.control_bounds()
        assert np.all(U >= lo) and np.all(U <= hi)

    def test_double_integrator_in_cylinder(self, scene, small_world, di_model, make_params):
        params = make_params(di_model)
        params["policy.head.b2"] = np.array([30.0, -40.0, 5.0])
        U = policy_controls(params, snapshot_graph(scene("double_integrator"), small_world))
        assert np.all(np.hypot(U[:, 0], U[:, 1]) < 2.0)
        assert np.all(np.abs(U[:, 2]) < 2.0)

    def test_double_integrator_output_rotates_with_ego(self, scene, small_world, di_model, make_params):
        params = make_params(di_model)
        sg = all_subgraphs(snapshot_graph(scene("double_integrator"), small_world))[0]
        u = forward_policy(params, sg)
        turned = rotate_subgraph(sg, 0.5)
        assert np.allclose(forward_policy(params, turned), rot_z(0.5) @ u, atol=1e-10)


class TestInputGradients:
    @pytest.mark.parametrize("trunk", ["equivariant", "relative", "raw"])
    def test_matches_finite_differences(self, trunk, scene, small_world, quad_model, make_params):
        params = make_params(quad_model, trunk=trunk, seed=11)
        sg = all_subgraphs(snapshot_graph(scene("quadrotor"), small_world))[0]
        h0, G = cbf_value_and_input_gradient(params, sg)
        assert h0 == pytest.approx(forward_cbf(params, sg))
        step = 1e-6
        local, _ = sg.agent_nodes()
        coords = [(0, 0), (0, 1), (0, 3), (0, 6), (0, 12)]
        coords += [(int(k), c) for k in local[1:2] for c in (0, 2, 13)]
        for node, coord in coords:
            plus, minus = sg.states.copy(), sg.states.copy()
            plus[node, coord] += step
            minus[node, coord] -= step
            numeric = (forward_cbf(params, sg.with_states(plus)) - forward_cbf(params, sg.with_states(minus))) / (2 * step)
            assert G[node, coord] == pytest.approx(numeric, abs=1e-6, rel=1e-4)

    def test_static_padding_gets_no_gradient(self, scene, small_world, quad_model, make_params):
        params = make_params(quad_model)
        sg = all_subgraphs(snapshot_graph(scene("quadrotor"), small_world))[0]
        _, G = cbf_value_and_input_gradient(params, sg)
        static = sg.kinds != NodeKind.AGENT
        assert np.all(G[static, 3:] == 0.0)

    def test_nodes_outside_the_subgraph_get_exact_zeros(self, scene, small_world, quad_model, make_params):
        params = make_params(quad_model)
        ep = scene("quadrotor")
        far = ep.states[1].copy()
        far[0] += 50.0
        ep = replace(ep, states=np.vstack([ep.states, far]), targets=np.vstack([ep.targets, ep.targets[1]]))
        graph = snapshot_graph(ep, small_world)
        num_nodes = graph.states.shape[0]
        for cg in cbf_input_gradients(params, graph):
            outside = np.setdiff1d(np.arange(num_nodes), cg.node_ids)
            assert outside.size > 0
            assert np.all(cg.dense(num_nodes)[outside] == 0.0)

    def test_gradients_push_forward_under_the_group(self, rng, scene, small_world, quad_model, make_params):
        params = make_params(quad_model, seed=5)
        graph = snapshot_graph(scene("quadrotor"), small_world)
        for _ in range(3):
            g = random_element(rng)
            A = state_transform_matrix(g.theta)
            moved = cbf_input_gradients(params, transform_graph(g, graph))
            for base, turned in zip(cbf_input_gradients(params, graph), moved):
                assert np.array_equal(base.node_ids, turned.node_ids)
                assert np.max(np.abs(turned.grads - base.grads @ A.T)) < 1e-7


class TestHaarAveraging:
    def test_invariant_function_is_unchanged(self, scene, small_world, di_model, make_params):
        params = make_params(di_model)
        sg = all_subgraphs(snapshot_graph(scene("double_integrator"), small_world))[0]
        h_hat = haar_invariantize(lambda s: forward_cbf(params, s), 16, np.random.default_rng(0))
        assert h_hat(sg) == pytest.approx(forward_cbf(params, sg), abs=1e-9)

    def test_bitwise_invariant_function_is_returned_exactly(self, scene, small_world):
        sg = all_subgraphs(snapshot_graph(scene("double_integrator"), small_world))[0]
        h_hat = haar_invariantize(lambda s: float(s.states[0, 2]) / 3.0, 7, np.random.default_rng(2))
        assert h_hat(sg) == float(sg.states[0, 2]) / 3.0

    @pytest.mark.parametrize("k", [16, 64, 256, 1024])
    def test_cosine_of_yaw_averages_out(self, k, scene, small_world):
        sg = all_subgraphs(snapshot_graph(scene("quadrotor"), small_world))[0]
        h_hat = haar_invariantize(lambda s: math.cos(yaw_of(s.states[0, 3:12].reshape(3, 3))), k, np.random.default_rng(k))
        assert abs(h_hat(sg)) < 3.0 / math.sqrt(k)

    def test_error_shrinks_with_more_samples(self, scene, small_world):
        sg = all_subgraphs(snapshot_graph(scene("double_integrator"), small_world))[0]

        # the node farthest from the ego gives the strongest angular dependence
        far = int(np.argmax(np.linalg.norm(sg.states[:, :3] - sg.states[0, :3], axis=1)))

        def h_raw(s):
            return float(math.exp(s.states[far, 0] - s.states[0, 0]))

        errors = []
        for k in (4, 16, 64, 256):
            h_hat = haar_invariantize(h_raw, k, np.random.default_rng(0), stratified=True)
            base = h_hat(sg)
            errors.append(max(abs(h_hat(rotate_subgraph(sg, t)) - base) for t in (0.3, 1.1, 2.5, -2.0)))
        assert errors[0] > 1e-6
        for a, b in zip(errors, errors[1:]):
            assert b <= a + 1e-12

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            haar_invariantize(lambda s: 0.0, 0)

    def test_thetas_are_exposed(self):
        h_hat = haar_invariantize(lambda s: 0.0, 8, np.random.default_rng(1), stratified=True)
        assert len(h_hat.thetas) == 8
        assert np.allclose(np.diff(h_hat.thetas), 2 * math.pi / 8)


def test_transform_graph_matches_transformed_episode(rng, scene, small_world, di_model, make_params):
    """Moving the graph directly gives the same CBF values as rebuilding it from a moved episode."""
    params = make_params(di_model)
    ep = scene("double_integrator")
    g = random_element(rng)
    a = snapshot_graph(transform_episode(g, ep), small_world)
    b = transform_graph(g, snapshot_graph(ep, small_world))
    ha = [forward_cbf(params, sg) for sg in all_subgraphs(a)]
    hb = [forward_cbf(params, sg) for sg in all_subgraphs(b)]
    assert np.allclose(ha, hb, atol=1e-8)

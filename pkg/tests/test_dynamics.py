"""
Tests for egcbf/models/dynamics.py.

Covers: model parameters, hover and free fall, energy and control-affinity,
double-integrator kinematics, SO(3) preservation, single-step equivariance
and integration failures.
"""

import numpy as np
import pytest

from egcbf.config import ModelConfig
from egcbf.exceptions import IntegrationError
from egcbf.models.dynamics import (
    AgentState,
    DoubleIntegratorModel,
    ModelParams,
    QuadrotorModel,
    build_model,
    stack_states,
    unstack_states,
)
from egcbf.models.liegroup import act_states, is_rotation, random_element, rot_z


class TestModelParams:
    def test_defaults(self):
        p = ModelParams()
        assert p.m == 0.1
        assert p.dt == 0.03
        assert p.hover_thrust == pytest.approx(0.981)

    @pytest.mark.parametrize(
        "kwargs",
        [{"m": 0.0}, {"dt": -0.01}, {"J": np.diag([1.0, -1.0, 1.0])}, {"J": np.array([[1, 2, 0], [0, 1, 0], [0, 0, 1.0]])}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelParams(**kwargs)

    def test_build_model_selects_system(self):
        assert isinstance(build_model(ModelConfig(system="quadrotor")), QuadrotorModel)
        assert isinstance(build_model(ModelConfig(system="double_integrator")), DoubleIntegratorModel)

    def test_control_bounds(self, quad_model, di_model):
        lo, hi = quad_model.control_bounds()
        assert np.allclose(lo, [-0.1, -0.1, -0.1, 0.0])
        assert np.allclose(hi, [0.1, 0.1, 0.1, 2 * 0.981])
        lo, hi = di_model.control_bounds()
        assert np.allclose(lo, -2.0) and np.allclose(hi, 2.0)


class TestAgentState:
    def test_vector_roundtrip(self, rng):
        x = AgentState(p=rng.normal(size=3), R=rot_z(0.2), v=rng.normal(size=3), omega=rng.normal(size=3))
        y = AgentState.from_vector(x.to_vector())
        assert np.array_equal(x.to_vector(), y.to_vector())
        assert x.is_valid()

    def test_stack_unstack(self):
        xs = [AgentState(p=[i, 0.0, 0.0]) for i in range(3)]
        S = stack_states(xs)
        assert S.shape == (3, 18)
        assert [x.p[0] for x in unstack_states(S)] == [0.0, 1.0, 2.0]
        assert stack_states([]).shape == (0, 18)


class TestQuadrotor:
    def test_hover_is_an_equilibrium(self, quad_model):
        x = AgentState(p=[1.0, 2.0, 3.0])
        y = quad_model.step(x, quad_model.hover_control())
        assert np.allclose(y.v, 0.0, atol=1e-12)
        assert np.allclose(y.p, x.p, atol=1e-12)

    def test_free_fall(self, quad_model):
        dt = quad_model.dt
        y = quad_model.step(AgentState(p=np.zeros(3)), np.zeros(4))
        assert y.v[2] == pytest.approx(-9.81 * dt)
        assert y.p[2] == pytest.approx(-0.5 * 9.81 * dt * dt)

    def test_derivative_shapes(self, quad_model):
        p_dot, R_dot, v_dot, w_dot = quad_model.derivative(AgentState(p=np.zeros(3)), quad_model.hover_control())
        assert p_dot.shape == (3,) and R_dot.shape == (3, 3)
        assert v_dot.shape == (3,) and w_dot.shape == (3,)
        assert np.allclose(v_dot, 0.0)

    def test_spin_keeps_rotation_valid(self, quad_model):
        x = AgentState(p=np.zeros(3), omega=[3.0, -2.0, 5.0])
        for _ in range(200):
            x = quad_model.step(x, np.array([0.01, -0.02, 0.005, 0.5]))
        assert is_rotation(x.R, tol=1e-10)

    def test_torque_spins_up_body_rate(self, quad_model):
        y = quad_model.step(AgentState(p=np.zeros(3)), np.array([0.0, 0.0, 0.01, 0.981]))
        assert y.omega[2] > 0.0


class TestDoubleIntegrator:
    def test_constant_acceleration_is_exact(self, di_model):
        dt = di_model.dt
        a = np.array([0.5, -1.0, 2.0])
        x = AgentState(p=[1.0, 1.0, 1.0], v=[0.1, 0.2, 0.3])
        y = di_model.step(x, a)
        assert np.allclose(y.p, x.p + x.v * dt + 0.5 * a * dt * dt)
        assert np.allclose(y.v, x.v + a * dt)

    def test_attitude_untouched(self, di_model):
        x = AgentState(p=np.zeros(3), R=rot_z(0.8), omega=[0.0, 0.0, 0.0])
        y = di_model.step(x, np.array([1.0, 0.0, 0.0]))
        assert np.allclose(y.R, rot_z(0.8))


class TestFlowProperties:
    def test_free_fall_one_second(self):
        model = QuadrotorModel(ModelParams(dt=0.01))
        x = AgentState(p=np.zeros(3))
        for _ in range(100):
            x = model.step(x, np.zeros(4))
        assert x.p[2] == pytest.approx(-4.905, abs=1e-6)
        assert np.allclose(x.p[:2], 0.0)

    @pytest.mark.parametrize("system", ["quadrotor", "double_integrator"])
    def test_hover_holds_for_100_steps(self, system):
        model = build_model(ModelConfig(system=system))
        x0 = AgentState(p=[0.5, -1.0, 2.0])
        x = x0
        for _ in range(100):
            x = model.step(x, model.hover_control())
        assert np.max(np.abs(x.to_vector() - x0.to_vector())) < 1e-9

    @pytest.mark.parametrize("system", ["quadrotor", "double_integrator"])
    def test_derivative_is_affine_in_control(self, system, rng, scene):
        model = build_model(ModelConfig(system=system))
        x = AgentState.from_vector(scene(system).states[0])
        lo, hi = model.control_bounds()
        u1, u2 = rng.uniform(lo, hi), rng.uniform(lo, hi)
        for alpha in (0.0, 0.3, 1.0, 1.7):
            mixed = model.derivative(x, alpha * u1 + (1.0 - alpha) * u2)
            parts = zip(model.derivative(x, u1), model.derivative(x, u2))
            for got, (d1, d2) in zip(mixed, parts):
                assert np.allclose(got, alpha * d1 + (1.0 - alpha) * d2, rtol=1e-12, atol=1e-12)

    def test_energy_conserved_without_inputs(self, quad_model):
        params = quad_model.params

        def energy(x):
            kinetic = 0.5 * params.m * x.v @ x.v + 0.5 * x.omega @ params.J @ x.omega
            return kinetic - params.m * params.gvec @ x.p

        x = AgentState(p=[0.0, 0.0, 5.0], R=rot_z(0.4), v=[0.3, -0.2, 1.0], omega=[3.0, -2.0, 5.0])
        for _ in range(100):
            y = quad_model.step(x, np.zeros(4))
            assert abs(energy(y) - energy(x)) < quad_model.dt**4
            x = y


class TestEquivariance:
    @pytest.mark.parametrize("system", ["quadrotor", "double_integrator"])
    def test_single_step_commutes_with_group(self, system, rng, scene):
        model = build_model(ModelConfig(system=system))
        S = scene(system).states
        lo, hi = model.control_bounds()
        U = rng.uniform(lo, hi, size=(S.shape[0], model.control_dim))
        for _ in range(5):
            g = random_element(rng)
            lhs = model.step_batch(act_states(g, S), model.act_controls(g, U))
            rhs = act_states(g, model.step_batch(S, U))
            assert np.max(np.abs(lhs - rhs)) < 1e-9


class TestIntegrationFailure:
    def test_reports_offending_agent(self, di_model):
        S = stack_states([AgentState(p=np.zeros(3)), AgentState(p=np.ones(3), v=[np.nan, 0.0, 0.0])])
        with pytest.raises(IntegrationError) as exc:
            di_model.step_batch(S, np.zeros((2, 3)))
        assert exc.value.agent_id == 1

    def test_uses_agent_ids(self, di_model):
        S = stack_states([AgentState(p=np.zeros(3)), AgentState(p=[np.inf, 0.0, 0.0])])
        with pytest.raises(IntegrationError) as exc:
            di_model.step_batch(S, np.zeros((2, 3)), agent_ids=["alpha", "bravo"])
        assert exc.value.agent_id == "bravo"

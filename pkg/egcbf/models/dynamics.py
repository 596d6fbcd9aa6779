"""
Control-affine robot models and the fixed-step RK4 integrator.

Both models share the 18-vector state layout from ``liegroup`` and expose
``drift(S)`` (n, 18) and ``input_matrix(S)`` (n, 18, c) so that the
time derivative of a batch is ``drift(S) + input_matrix(S) @ U``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from egcbf.exceptions import IntegrationError
from egcbf.models.liegroup import (
    P_SLICE,
    R_SLICE,
    STATE_DIM,
    V_SLICE,
    W_SLICE,
    GroupElement,
    is_rotation,
    project_batch_to_so3,
    rot_z,
    yaw_of,
)
from utils.logger_config import get_logger

logger = get_logger(__name__)

GRAVITY = 9.81


@dataclass(frozen=True)
class AgentState:
    p: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64).reshape(3))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).reshape(3))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64).reshape(3))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.R.reshape(9), self.v, self.omega])

    @classmethod
    def from_vector(cls, s) -> "AgentState":
        s = np.asarray(s, dtype=np.float64)
        return cls(p=s[P_SLICE], R=s[R_SLICE].reshape(3, 3), v=s[V_SLICE], omega=s[W_SLICE])

    def is_valid(self, tol: float = 1e-10) -> bool:
        return bool(np.all(np.isfinite(self.to_vector()))) and is_rotation(self.R, tol)

    def to_json(self):
        return self.to_vector().tolist()

    @classmethod
    def from_json(cls, data):
        return cls.from_vector(data)


def _skew_batch(w: np.ndarray) -> np.ndarray:
    out = np.zeros((w.shape[0], 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -w[:, 2], w[:, 1]
    out[:, 1, 0], out[:, 1, 2] = w[:, 2], -w[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -w[:, 1], w[:, 0]
    return out


def stack_states(states) -> np.ndarray:
    return np.stack([x.to_vector() for x in states]) if states else np.zeros((0, STATE_DIM))


def unstack_states(S: np.ndarray) -> list[AgentState]:
    return [AgentState.from_vector(s) for s in S]


@dataclass(frozen=True)
class ModelParams:
    m: float = 0.1
    J: np.ndarray = field(default_factory=lambda: np.diag([1.5e-4, 1.5e-4, 3e-4]))
    gvec: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY]))
    dt: float = 0.03
    torque_limit: float = 0.1
    thrust_max_factor: float = 2.0
    accel_limit: float = 2.0

    def __post_init__(self):
        J = np.asarray(self.J, dtype=np.float64).reshape(3, 3)
        if self.m <= 0:
            raise ValueError("mass must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not np.allclose(J, J.T) or np.min(np.linalg.eigvalsh(J)) <= 0:
            raise ValueError("inertia must be symmetric positive definite")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "gvec", np.asarray(self.gvec, dtype=np.float64).reshape(3))

    @property
    def J_inv(self) -> np.ndarray:
        return np.linalg.inv(self.J)

    @property
    def hover_thrust(self) -> float:
        return float(self.m * np.linalg.norm(self.gvec))

    @classmethod
    def from_config(cls, model_config) -> "ModelParams":
        return cls(
            m=model_config.mass,
            J=np.diag(model_config.inertia),
            gvec=np.array(model_config.gravity),
            dt=model_config.dt,
            torque_limit=model_config.torque_limit,
            thrust_max_factor=model_config.thrust_max_factor,
            accel_limit=model_config.accel_limit,
        )


class ControlAffineModel:
    """Shared integrator and batch plumbing; subclasses provide the vector field."""

    system = ""
    control_dim = 0

    def __init__(self, params: ModelParams | None = None):
        self.params = params or ModelParams()

    @property
    def dt(self) -> float:
        return self.params.dt

    def drift(self, S: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def input_matrix(self, S: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def control_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def box_frames(self, S: np.ndarray) -> np.ndarray | None:
        """Per-agent orthogonal maps taking a control into the coordinates its box is
        stated in; None when the box does not depend on the state."""
        return None

    def hover_control(self) -> np.ndarray:
        return np.zeros(self.control_dim)

    def clamp(self, U: np.ndarray) -> np.ndarray:
        lo, hi = self.control_bounds()
        return np.clip(U, lo, hi)

    def act_controls(self, g: GroupElement, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vector_field(self, S: np.ndarray, U: np.ndarray) -> np.ndarray:
        S = np.atleast_2d(S)
        U = np.atleast_2d(U)
        return self.drift(S) + np.einsum("nij,nj->ni", self.input_matrix(S), U)

    def derivative(self, x: AgentState, u) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(p_dot, R_dot, v_dot, omega_dot) at a single state."""
        d = self.vector_field(x.to_vector()[None], np.asarray(u, dtype=np.float64)[None])[0]
        return d[P_SLICE], d[R_SLICE].reshape(3, 3), d[V_SLICE], d[W_SLICE]

    def step_batch(self, S: np.ndarray, U: np.ndarray, agent_ids=None) -> np.ndarray:
        """One RK4 step with zero-order-hold control, then re-orthonormalise R."""
        S = np.asarray(S, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        h = self.dt
        k1 = self.vector_field(S, U)
        k2 = self.vector_field(S + 0.5 * h * k1, U)
        k3 = self.vector_field(S + 0.5 * h * k2, U)
        k4 = self.vector_field(S + h * k3, U)
        out = S + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        bad = ~np.all(np.isfinite(out), axis=1)
        if np.any(bad):
            idx = int(np.flatnonzero(bad)[0])
            agent = agent_ids[idx] if agent_ids is not None else idx
            logger.error(f"Non-finite state after integration step for agent {agent}")
            raise IntegrationError(f"non-finite state for agent {agent}", agent_id=agent)

        rs = project_batch_to_so3(out[:, R_SLICE].reshape(-1, 3, 3))
        out[:, R_SLICE] = rs.reshape(-1, 9)
        return out

    def step(self, x: AgentState, u) -> AgentState:
        out = self.step_batch(x.to_vector()[None], np.asarray(u, dtype=np.float64)[None])
        return AgentState.from_vector(out[0])


class QuadrotorModel(ControlAffineModel):
    """
    6-DOF rigid body with body torque and collective thrust, u = (tau_x, tau_y, tau_z, F3).

        p_dot = v
        R_dot = (R omega)^ R = R omega^
        v_dot = g + (F3 / m) R e3
        omega_dot = J^-1 (tau - omega x J omega)
    """

    system = "quadrotor"
    control_dim = 4

    def drift(self, S):
        S = np.atleast_2d(S)
        n = S.shape[0]
        R = S[:, R_SLICE].reshape(n, 3, 3)
        w = S[:, W_SLICE]
        J = self.params.J

        d = np.zeros_like(S)
        d[:, P_SLICE] = S[:, V_SLICE]
        d[:, R_SLICE] = (R @ _skew_batch(w)).reshape(n, 9)
        d[:, V_SLICE] = self.params.gvec
        Jw = w @ J.T
        d[:, W_SLICE] = -np.cross(w, Jw) @ self.params.J_inv.T
        return d

    def input_matrix(self, S):
        S = np.atleast_2d(S)
        n = S.shape[0]
        R = S[:, R_SLICE].reshape(n, 3, 3)
        B = np.zeros((n, STATE_DIM, self.control_dim))
        B[:, V_SLICE, 3] = R[:, :, 2] / self.params.m
        B[:, W_SLICE, 0:3] = self.params.J_inv
        return B

    def control_bounds(self):
        tl = self.params.torque_limit
        fmax = self.params.thrust_max_factor * self.params.hover_thrust
        return np.array([-tl, -tl, -tl, 0.0]), np.array([tl, tl, tl, fmax])

    def hover_control(self):
        return np.array([0.0, 0.0, 0.0, self.params.hover_thrust])

    def act_controls(self, g, U):
        # body-frame torque and thrust are attached to the body
        return np.array(U, dtype=np.float64, copy=True)


class DoubleIntegratorModel(ControlAffineModel):
    """
    p_dot = v, v_dot = a with a world-frame acceleration command; R and omega stay fixed.

    The acceleration box is stated in the agent's heading frame, so it turns with
    the agent under the symmetry group.
    """

    system = "double_integrator"
    control_dim = 3

    def drift(self, S):
        S = np.atleast_2d(S)
        d = np.zeros_like(S)
        d[:, P_SLICE] = S[:, V_SLICE]
        return d

    def input_matrix(self, S):
        S = np.atleast_2d(S)
        B = np.zeros((S.shape[0], STATE_DIM, self.control_dim))
        B[:, V_SLICE, :] = np.eye(3)
        return B

    def control_bounds(self):
        a = self.params.accel_limit
        return -a * np.ones(3), a * np.ones(3)

    def box_frames(self, S):
        S = np.atleast_2d(S)
        return np.stack([rot_z(yaw_of(s[R_SLICE].reshape(3, 3))).T for s in S])

    def act_controls(self, g, U):
        return np.asarray(U, dtype=np.float64) @ g.rotation.T


def build_model(model_config) -> ControlAffineModel:
    params = ModelParams.from_config(model_config)
    if model_config.system == "quadrotor":
        return QuadrotorModel(params)
    return DoubleIntegratorModel(params)

"""
The symmetry group G = SE(2) x R (rotations about world z plus 3-D translations),
the SO(3) helpers the simulator needs, and the group actions on states, controls
and points.

State vectors use the 18-entry layout shared across the package:
``p (3) | R row-major (9) | v (3) | omega (3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi
GIMBAL_TOL = 1e-9

# slices into the 18-vector state layout
P_SLICE = slice(0, 3)
R_SLICE = slice(3, 12)
V_SLICE = slice(12, 15)
W_SLICE = slice(15, 18)
STATE_DIM = 18

# generator of z-rotations: d/dtheta rot_z(theta) = Z_GEN @ rot_z(theta)
Z_GEN = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])

Rotation3 = np.ndarray


def wrap_angle(theta: float) -> float:
    """Wrap to [-pi, pi)."""
    wrapped = (theta + math.pi) % TWO_PI - math.pi
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return float(wrapped)


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Closest rotation in Frobenius norm (polar projection)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] *= -1.0
        r = u @ vt
    return r


def project_batch_to_so3(ms: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(ms)
    r = u @ vt
    flip = np.linalg.det(r) < 0
    if np.any(flip):
        u = u.copy()
        u[flip, :, -1] *= -1.0
        r = u @ vt
    return r


def is_rotation(m: np.ndarray, tol: float = 1e-10) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(
        np.allclose(m.T @ m, np.eye(3), atol=tol) and abs(np.linalg.det(m) - 1.0) <= tol
    )


def yaw_of(r: np.ndarray) -> float:
    """Heading of a rotation about world z.

    Uses the horizontal projection of the body x-axis (first column). When that
    projection vanishes (body x-axis vertical) the second column is used instead.
    """
    x, y = r[0, 0], r[1, 0]
    if math.hypot(x, y) < GIMBAL_TOL:
        return math.atan2(-r[0, 1], r[1, 1])
    return math.atan2(y, x)


@dataclass(frozen=True)
class GroupElement:
    """(theta, lambda): rotation about world z followed by translation."""

    theta: float = 0.0
    lam: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        lam = np.array(self.lam, dtype=np.float64).reshape(3)
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def rotation(self) -> np.ndarray:
        return rot_z(self.theta)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.lam
        return m

    def to_json(self):
        return {"theta": self.theta, "lambda": self.lam.tolist()}

    @classmethod
    def from_json(cls, data):
        return cls(data["theta"], data["lambda"])

    def __repr__(self):
        return f"GroupElement(theta={self.theta:.6g}, lam={self.lam.tolist()})"


def identity() -> GroupElement:
    return GroupElement(0.0, np.zeros(3))


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    return GroupElement(a.theta + b.theta, a.rotation @ b.lam + a.lam)


def inverse(g: GroupElement) -> GroupElement:
    return GroupElement(-g.theta, -(rot_z(-g.theta) @ g.lam))


def from_matrix(m: np.ndarray) -> GroupElement:
    return GroupElement(math.atan2(m[1, 0], m[0, 0]), m[:3, 3])


def random_element(rng: np.random.Generator, translation_scale: float = 5.0) -> GroupElement:
    return GroupElement(
        rng.uniform(-math.pi, math.pi), rng.uniform(-translation_scale, translation_scale, 3)
    )


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------


def state_transform_matrix(theta: float) -> np.ndarray:
    """Linear part A of the state action, x -> A x + (lambda, 0, 0, 0)."""
    rz = rot_z(theta)
    a = np.zeros((STATE_DIM, STATE_DIM))
    a[P_SLICE, P_SLICE] = rz
    a[R_SLICE, R_SLICE] = np.kron(rz, np.eye(3))
    a[V_SLICE, V_SLICE] = rz
    a[W_SLICE, W_SLICE] = np.eye(3)
    return a


def state_transform_derivative(theta: float) -> np.ndarray:
    """d/dtheta of ``state_transform_matrix``."""
    d = Z_GEN @ rot_z(theta)
    a = np.zeros((STATE_DIM, STATE_DIM))
    a[P_SLICE, P_SLICE] = d
    a[R_SLICE, R_SLICE] = np.kron(d, np.eye(3))
    a[V_SLICE, V_SLICE] = d
    return a


def act_states(g: GroupElement, states: np.ndarray) -> np.ndarray:
    """Batched action on an (n, 18) array of state vectors."""
    states = np.asarray(states, dtype=np.float64)
    rz = g.rotation
    out = np.empty_like(states)
    out[..., P_SLICE] = states[..., P_SLICE] @ rz.T + g.lam
    rs = states[..., R_SLICE].reshape(states.shape[:-1] + (3, 3))
    out[..., R_SLICE] = np.einsum("ij,...jk->...ik", rz, rs).reshape(states.shape[:-1] + (9,))
    out[..., V_SLICE] = states[..., V_SLICE] @ rz.T
    out[..., W_SLICE] = states[..., W_SLICE]
    return out


def act_state(g: GroupElement, x):
    """phi_g: p -> Rz p + lambda, R -> Rz R, v -> Rz v, body omega unchanged."""
    from egcbf.models.dynamics import AgentState

    rz = g.rotation
    return AgentState(
        p=rz @ x.p + g.lam,
        R=rz @ x.R,
        v=rz @ x.v,
        omega=np.array(x.omega, copy=True),
    )


def act_points(g: GroupElement, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ g.rotation.T + g.lam


def act_control(g: GroupElement, u: np.ndarray, system: str) -> np.ndarray:
    """psi_g: body-frame (tau, F3) is frame-attached; world-frame accelerations rotate."""
    u = np.asarray(u, dtype=np.float64)
    if system == "quadrotor":
        return np.array(u, copy=True)
    return u @ g.rotation.T


def frame_of(x) -> GroupElement:
    """The torsor element (yaw(R), p) carried by a state."""
    return GroupElement(yaw_of(x.R), x.p)


def frame_of_vector(s: np.ndarray) -> GroupElement:
    return GroupElement(yaw_of(s[R_SLICE].reshape(3, 3)), s[P_SLICE])

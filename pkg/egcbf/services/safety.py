"""
CBF machinery: class-K functions, nominal goal-reaching controllers, the
distributed CBF constraint, the centralised min-norm CBF-QP and the hand-crafted
distance barriers used by the cCBF / dCBF baselines.

A *barrier* is any object with ``evaluate(graph) -> list[CbfGradient]``: one
value per ego agent with gradients w.r.t. the raw states of its subgraph nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from egcbf.exceptions import BaselineUnsupportedError, MissingControlError
from egcbf.models.graph import GraphSnapshot, NodeKind, all_subgraphs
from egcbf.models.liegroup import P_SLICE, R_SLICE, STATE_DIM, V_SLICE, W_SLICE, vee
from egcbf.services.egformer import CbfGradient
from egcbf.services.qp_solver import QPProblem, QPResult, QPStatus, solve_qp
from utils.logger_config import get_logger

logger = get_logger(__name__)

DENOM_CLAMP = 1e-9


@dataclass(frozen=True)
class ClassK:
    """Linear extended class-K function alpha(h) = slope * h."""

    slope: float = 1.0

    def __post_init__(self):
        if self.slope <= 0:
            raise ValueError("class-K slope must be positive")

    def __call__(self, h):
        return self.slope * h


# ---------------------------------------------------------------------------
# Nominal controllers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NominalGains:
    kp: float = 1.0
    kd: float = 1.6
    k_rot: float = 0.015
    k_omega: float = 0.0024
    yaw_mode: str = "hold"

    @classmethod
    def from_config(cls, model_config) -> "NominalGains":
        return cls(
            kp=model_config.kp,
            kd=model_config.kd,
            k_rot=model_config.k_rot,
            k_omega=model_config.k_omega,
            yaw_mode=model_config.yaw_mode,
        )


def saturate_cylinder(a: np.ndarray, a_max: float) -> np.ndarray:
    """Clip horizontal magnitude and vertical component separately (rotation invariant)."""
    a = np.array(a, dtype=np.float64, copy=True)
    horiz = math.hypot(a[0], a[1])
    if horiz > a_max:
        a[:2] *= a_max / horiz
    a[2] = min(max(a[2], -a_max), a_max)
    return a


def _unit(v, fallback):
    nrm = np.linalg.norm(v)
    return v / nrm if nrm > 1e-9 else fallback


def _geometric_control(state: np.ndarray, target: np.ndarray, model, gains: NominalGains) -> np.ndarray:
    p, v, w = state[P_SLICE], state[V_SLICE], state[W_SLICE]
    R = state[R_SLICE].reshape(3, 3)
    prm = model.params

    a_des = -gains.kp * (p - target) - gains.kd * v
    force = prm.m * (a_des - prm.gvec)
    thrust = float(force @ R[:, 2])

    b3 = _unit(force, np.array([0.0, 0.0, 1.0]))
    heading = R[:, 0]
    if gains.yaw_mode == "velocity":
        horiz = np.array([a_des[0], a_des[1], 0.0])
        heading = _unit(horiz, R[:, 0])
    b2 = np.cross(b3, heading)
    b2 = _unit(b2, R[:, 1])
    b1 = np.cross(b2, b3)
    Rd = np.column_stack([b1, b2, b3])

    e_R = 0.5 * vee(Rd.T @ R - R.T @ Rd)
    tau = -gains.k_rot * e_R - gains.k_omega * w + np.cross(w, prm.J @ w)
    return model.clamp(np.concatenate([tau, [thrust]])[None])[0]


def nominal_control(state, target, model, gains: NominalGains | None = None) -> np.ndarray:
    """
    Goal-reaching controller commuting with the symmetry group.

    Double integrator: PD on position, saturated in the rotation-invariant cylinder.
    Quadrotor: cascaded geometric law (PD desired acceleration, thrust along body z,
    SO(3) attitude PD towards the desired body axes).
    """
    gains = gains or NominalGains()
    s = state.to_vector() if hasattr(state, "to_vector") else np.asarray(state, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if model.system == "quadrotor":
        return _geometric_control(s, target, model, gains)
    a = -gains.kp * (s[P_SLICE] - target) - gains.kd * s[V_SLICE]
    return saturate_cylinder(a, model.params.accel_limit)


def nominal_controls(states: np.ndarray, targets: np.ndarray, model, gains: NominalGains | None = None) -> np.ndarray:
    return np.stack([nominal_control(s, t, model, gains) for s, t in zip(states, targets)])


# ---------------------------------------------------------------------------
# Distributed CBF constraint and the centralised QP
# ---------------------------------------------------------------------------


def _agent_rows(grad: CbfGradient, graph: GraphSnapshot):
    """(agent indices, gradient rows) for the agent nodes of one ego's subgraph."""
    kinds = graph.kinds[grad.node_ids]
    sel = kinds == NodeKind.AGENT
    return graph.owners[grad.node_ids[sel]], grad.grads[sel]


def _control_of(controls, agent: int) -> np.ndarray:
    if isinstance(controls, dict):
        if agent not in controls:
            raise MissingControlError(f"no control supplied for agent {agent}")
        return np.asarray(controls[agent], dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    if agent >= controls.shape[0]:
        raise MissingControlError(f"no control supplied for agent {agent}")
    return controls[agent]


def cbf_constraint_value(barrier, graph: GraphSnapshot, controls, model, alpha: ClassK | None = None, evaluated=None) -> np.ndarray:
    """Per ego: sum_j <grad_j h_i, f(x_j, u_j)> + alpha(h_i); static nodes contribute nothing."""
    alpha = alpha or ClassK()
    evaluated = evaluated if evaluated is not None else barrier.evaluate(graph)
    agent_states = graph.states[graph.kinds == NodeKind.AGENT]
    out = np.zeros(len(evaluated))
    for k, g in enumerate(evaluated):
        agents, rows = _agent_rows(g, graph)
        if agents.size:
            U = np.stack([_control_of(controls, int(a)) for a in agents])
            f = model.vector_field(agent_states[agents], U)
            out[k] = float(np.sum(rows * f))
        out[k] += alpha(g.h)
    return out


def box_basis(model, agent_states: np.ndarray) -> np.ndarray | None:
    """Block-diagonal box basis for stacked controls (None when every box is world-fixed)."""
    frames = model.box_frames(agent_states)
    return None if frames is None else block_diag(*frames)


def build_cbf_qp(barrier, graph: GraphSnapshot, model, u_nom: np.ndarray, alpha: ClassK | None = None, evaluated=None) -> QPProblem:
    """
    One row per ego i over the stacked controls of all agents:
        sum_j grad_j h_i . B(x_j) u_j >= -alpha(h_i) - sum_j grad_j h_i . f0(x_j)
    """
    alpha = alpha or ClassK()
    evaluated = evaluated if evaluated is not None else barrier.evaluate(graph)
    agent_states = graph.states[graph.kinds == NodeKind.AGENT]
    n_agents, c = u_nom.shape
    f0 = model.drift(agent_states)
    B = model.input_matrix(agent_states)

    C = np.zeros((len(evaluated), n_agents * c))
    b = np.zeros(len(evaluated))
    for k, g in enumerate(evaluated):
        agents, rows = _agent_rows(g, graph)
        rhs = -alpha(g.h)
        for a, row in zip(agents, rows):
            C[k, a * c:(a + 1) * c] += row @ B[a]
            rhs -= float(row @ f0[a])
        b[k] = rhs
    lo, hi = model.control_bounds()
    return QPProblem(
        u_nom=u_nom.reshape(-1),
        C=C,
        b=b,
        lo=np.tile(lo, n_agents),
        hi=np.tile(hi, n_agents),
        box_basis=box_basis(model, agent_states),
    )


def qp_controls(barrier, graph: GraphSnapshot, model, u_nom: np.ndarray, alpha: ClassK | None = None, solver_options=None, evaluated=None) -> tuple[np.ndarray, QPResult]:
    """pi_QP for every agent of a snapshot; infeasibility is logged, not raised."""
    problem = build_cbf_qp(barrier, graph, model, u_nom, alpha, evaluated)
    result = solve_qp(problem, **(solver_options or {}))
    if result.status == QPStatus.INFEASIBLE:
        logger.warning(
            f"CBF-QP infeasible for {u_nom.shape[0]} agents; "
            f"using least-violating controls (violation {problem.violation(result.u):.3g})"
        )
    return result.u.reshape(u_nom.shape), result


# ---------------------------------------------------------------------------
# Hand-crafted distance barrier
# ---------------------------------------------------------------------------


def handcrafted_cbf(dp, dv, radius: float, c: float = 0.5) -> float:
    """h = |dp|^2 - r^2 + c (dp . dv) / |dp|, denominator clamped at 1e-9."""
    dp = np.asarray(dp, dtype=np.float64)
    dist = max(float(np.linalg.norm(dp)), DENOM_CLAMP)
    return float(dp @ dp - radius * radius + c * (dp @ np.asarray(dv)) / dist)


def handcrafted_cbf_gradient(dp, dv, radius: float, c: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """(dh/d dp, dh/d dv)."""
    dp = np.asarray(dp, dtype=np.float64)
    dv = np.asarray(dv, dtype=np.float64)
    dist = max(float(np.linalg.norm(dp)), DENOM_CLAMP)
    g_p = 2.0 * dp + c * (dv / dist - (dp @ dv) * dp / dist**3)
    g_v = c * dp / dist
    return g_p, g_v


def handcrafted_cbf_dot(dp, dv, da, radius: float, c: float = 0.5) -> float:
    g_p, g_v = handcrafted_cbf_gradient(dp, dv, radius, c)
    return float(g_p @ np.asarray(dv) + g_v @ np.asarray(da))


class NearestPairBarrier:
    """
    Per ego, the hand-crafted barrier of the closest neighbouring agent in its
    subgraph. Egos without neighbours get ``default_h`` with zero gradient.
    """

    def __init__(self, radius: float, c: float = 0.5, default_h: float = 1.0):
        self.radius = radius
        self.c = c
        self.default_h = default_h

    def evaluate(self, graph: GraphSnapshot) -> list[CbfGradient]:
        out = []
        for sg in all_subgraphs(graph):
            grads = np.zeros((sg.size, STATE_DIM))
            local, _ = sg.agent_nodes()
            others = [k for k in local if k != 0]
            if not others:
                out.append(CbfGradient(sg.ego_agent, self.default_h, sg.node_ids, grads))
                continue
            ego = sg.states[0]
            dists = [np.linalg.norm(ego[P_SLICE] - sg.states[k, P_SLICE]) for k in others]
            j = others[int(np.argmin(dists))]
            dp = ego[P_SLICE] - sg.states[j, P_SLICE]
            dv = ego[V_SLICE] - sg.states[j, V_SLICE]
            h = handcrafted_cbf(dp, dv, self.radius, self.c)
            g_p, g_v = handcrafted_cbf_gradient(dp, dv, self.radius, self.c)
            grads[0, P_SLICE], grads[0, V_SLICE] = g_p, g_v
            grads[j, P_SLICE], grads[j, V_SLICE] = -g_p, -g_v
            out.append(CbfGradient(sg.ego_agent, h, sg.node_ids, grads))
        return out


# ---------------------------------------------------------------------------
# Baselines (double integrator only)
# ---------------------------------------------------------------------------


def _require_double_integrator(model):
    if model.system != "double_integrator":
        raise BaselineUnsupportedError(
            f"hand-crafted CBF baselines need the double integrator, not {model.system}"
        )


def _pair_rows(episode, world_cfg, margin, c, alpha, agents=None):
    """Yield (i, j or None, g_v, rhs) for agent pairs and agent-obstacle pairs."""
    P = episode.positions
    V = episode.states[:, V_SLICE]
    n = episode.num_agents
    r_agent = world_cfg.safety_radius * (1.0 + margin)
    rows = []
    egos = range(n) if agents is None else agents
    for i in egos:
        for j in range(n):
            if j == i or (agents is None and j < i):
                continue
            dp, dv = P[i] - P[j], V[i] - V[j]
            if np.linalg.norm(dp) > world_cfg.comm_range:
                continue
            h = handcrafted_cbf(dp, dv, r_agent, c)
            g_p, g_v = handcrafted_cbf_gradient(dp, dv, r_agent, c)
            rows.append((i, j, g_v, -alpha(h) - float(g_p @ dv)))
        for center, rho in zip(episode.obstacle_centers, episode.obstacle_radii):
            dp, dv = P[i] - center, V[i]
            if np.linalg.norm(dp) - rho > world_cfg.comm_range:
                continue
            r_obs = rho + world_cfg.safety_radius * margin
            h = handcrafted_cbf(dp, dv, r_obs, c)
            g_p, g_v = handcrafted_cbf_gradient(dp, dv, r_obs, c)
            rows.append((i, None, g_v, -alpha(h) - float(g_p @ dv)))
    return rows


def centralized_baseline_qp(episode, model, world_cfg, u_nom: np.ndarray, margin: float = 0.2, c: float = 0.5, alpha: ClassK | None = None, solver_options=None) -> tuple[np.ndarray, QPResult]:
    """cCBF: every pair (and agent-obstacle) barrier in one joint QP over all accelerations."""
    _require_double_integrator(model)
    alpha = alpha or ClassK()
    n, dim = u_nom.shape
    rows = _pair_rows(episode, world_cfg, margin, c, alpha)
    C = np.zeros((len(rows), n * dim))
    b = np.zeros(len(rows))
    for k, (i, j, g_v, rhs) in enumerate(rows):
        C[k, i * dim:(i + 1) * dim] += g_v
        if j is not None:
            C[k, j * dim:(j + 1) * dim] -= g_v
        b[k] = rhs
    lo, hi = model.control_bounds()
    problem = QPProblem(u_nom.reshape(-1), C, b, np.tile(lo, n), np.tile(hi, n), box_basis(model, episode.states))
    result = solve_qp(problem, **(solver_options or {}))
    if not result.ok:
        logger.warning(f"cCBF-QP infeasible for {n} agents")
    return result.u.reshape(n, dim), result


def decentralized_baseline_controls(episode, model, world_cfg, u_nom: np.ndarray, margin: float = 0.2, c: float = 0.5, alpha: ClassK | None = None, solver_options=None) -> np.ndarray:
    """dCBF: one QP per agent over its own acceleration; neighbours hold their velocity."""
    _require_double_integrator(model)
    alpha = alpha or ClassK()
    lo, hi = model.control_bounds()
    frames = model.box_frames(episode.states)
    out = np.zeros_like(u_nom)
    for i in range(episode.num_agents):
        rows = _pair_rows(episode, world_cfg, margin, c, alpha, agents=[i])
        C = np.array([g_v for _, _, g_v, _ in rows]).reshape(-1, u_nom.shape[1])
        b = np.array([rhs for _, _, _, rhs in rows])
        result = solve_qp(QPProblem(u_nom[i], C, b, lo, hi, frames[i]), **(solver_options or {}))
        if not result.ok:
            logger.warning(f"dCBF-QP infeasible for agent {i}")
        out[i] = result.u
    return out

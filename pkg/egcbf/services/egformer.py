"""
Equivariant graphormer.

Each ego subgraph is canonicalised into the ego's frame, passed through a shared
graph-transformer trunk (masked single-head attention followed by a feed-forward
update), read out at the ego row and mapped by a small MLP head. The policy head
is squashed into the control set and de-canonicalised; the CBF head is left as is,
which makes it invariant.

Parameters for the two networks live in one flat ``NetParams`` mapping with
``policy.`` and ``cbf.`` prefixes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from egcbf.models.graph import (
    NUM_KINDS,
    GraphSnapshot,
    NodeKind,
    Subgraph,
    all_subgraphs,
    one_hot,
    transform_subgraph,
)
from egcbf.models.liegroup import (
    P_SLICE,
    R_SLICE,
    STATE_DIM,
    Z_GEN,
    GroupElement,
    rot_z,
    state_transform_matrix,
    yaw_of,
)
from egcbf.services.autodiff import Tape, Tensor, grad
from utils.logger_config import get_logger

logger = get_logger(__name__)

TRUNKS = ("policy", "cbf")
TRUNK_MODES = ("equivariant", "relative", "raw")
FEATURE_DIM = NUM_KINDS + STATE_DIM


@dataclass(frozen=True)
class NetSpec:
    """Architecture plus the control-set constants the policy squashing needs."""

    d_model: int = 64
    d_ff: int = 128
    layers: int = 2
    head_hidden: int = 64
    trunk: str = "equivariant"
    system: str = "quadrotor"
    control_dim: int = 4
    torque_limit: float = 0.1
    thrust_center: float = 0.981
    thrust_amplitude: float = 0.981
    accel_limit: float = 2.0

    @classmethod
    def from_configs(cls, net_config, model) -> "NetSpec":
        p = model.params
        hover = p.hover_thrust
        return cls(
            d_model=net_config.d_model,
            d_ff=net_config.d_ff,
            layers=net_config.layers,
            head_hidden=net_config.head_hidden,
            trunk=net_config.trunk,
            system=model.system,
            control_dim=model.control_dim,
            torque_limit=p.torque_limit,
            thrust_center=hover,
            thrust_amplitude=min(hover, p.thrust_max_factor * hover - hover),
            accel_limit=p.accel_limit,
        )

    def to_json(self):
        return asdict(self)


@dataclass
class NetParams:
    spec: NetSpec
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self.arrays

    def names(self, prefix: str | None = None) -> list[str]:
        return [k for k in self.arrays if prefix is None or k.startswith(prefix + ".")]

    @property
    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "NetParams":
        return NetParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "NetParams":
        return NetParams(self.spec, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def layer(self, prefix: str, index: int) -> "LayerParams":
        base = f"{prefix}.layers.{index}."
        return LayerParams(**{k: self.arrays[base + k] for k in LayerParams.__annotations__})

    def with_trunk(self, trunk: str) -> "NetParams":
        spec = NetSpec(**{**asdict(self.spec), "trunk": trunk})
        return NetParams(spec, {k: v.copy() for k, v in self.arrays.items()})


@dataclass(frozen=True)
class LayerParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


def _xavier(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(spec: NetSpec, seed: int = 0) -> NetParams:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    d, dff, hh = spec.d_model, spec.d_ff, spec.head_hidden
    params = NetParams(spec)
    for prefix, out_dim in (("policy", spec.control_dim), ("cbf", 1)):
        params[f"{prefix}.embed.W"] = _xavier(rng, FEATURE_DIM, d)
        params[f"{prefix}.embed.b"] = np.zeros(d)
        for l in range(spec.layers):
            base = f"{prefix}.layers.{l}."
            for name in ("W_Q", "W_K", "W_V"):
                params[base + name] = _xavier(rng, d, d)
            params[base + "W1"] = _xavier(rng, d, dff)
            params[base + "b1"] = np.zeros(dff)
            params[base + "W2"] = _xavier(rng, dff, d)
            params[base + "b2"] = np.zeros(d)
        params[f"{prefix}.head.W1"] = _xavier(rng, d, hh)
        params[f"{prefix}.head.b1"] = np.zeros(hh)
        params[f"{prefix}.head.W2"] = _xavier(rng, hh, out_dim)
        params[f"{prefix}.head.b2"] = np.zeros(out_dim)
    logger.info(f"Initialised {spec.trunk} graphormer with {params.num_parameters} parameters")
    return params


# ---------------------------------------------------------------------------
# Canonicalisation
# ---------------------------------------------------------------------------


def canonical_transform(ego_state: np.ndarray, trunk: str) -> tuple[np.ndarray, np.ndarray]:
    """(A, c) such that the canonical block of a node with raw state s is A s + c."""
    A = np.eye(STATE_DIM)
    c = np.zeros(STATE_DIM)
    if trunk == "equivariant":
        psi = yaw_of(ego_state[R_SLICE].reshape(3, 3))
        A = state_transform_matrix(-psi)
        c[P_SLICE] = -(rot_z(-psi) @ ego_state[P_SLICE])
    elif trunk == "relative":
        c[P_SLICE] = -ego_state[P_SLICE]
    elif trunk != "raw":
        raise ValueError(f"unknown trunk mode {trunk!r}")
    return A, c


def canonical_states(
    states: np.ndarray, kinds: np.ndarray, trunk: str, ego_state: np.ndarray | None = None
) -> np.ndarray:
    """Agents are mapped whole; static nodes only move their position and keep the q0 padding."""
    ego_state = states[0] if ego_state is None else ego_state
    A, c = canonical_transform(ego_state, trunk)
    out = states @ A.T + c
    static = np.asarray(kinds) != NodeKind.AGENT
    out[static, 3:] = states[static, 3:]
    return out


def canonicalize(subgraph: Subgraph, trunk: str = "equivariant") -> np.ndarray:
    """Feature matrix (kind one-hot | state block re-expressed in the ego frame)."""
    return np.concatenate(
        [one_hot(subgraph.kinds), canonical_states(subgraph.states, subgraph.kinds, trunk)], axis=1
    )


def output_rotation(subgraph_or_state, trunk: str) -> np.ndarray:
    """Rotation that de-canonicalises world-frame vector outputs."""
    if trunk != "equivariant":
        return np.eye(3)
    s = subgraph_or_state.states[0] if isinstance(subgraph_or_state, Subgraph) else subgraph_or_state
    return rot_z(yaw_of(s[R_SLICE].reshape(3, 3)))


# ---------------------------------------------------------------------------
# Network on a tape
# ---------------------------------------------------------------------------


def param_leaves(tape: Tape, params: NetParams, prefix: str | None = None) -> dict[str, Tensor]:
    return {k: tape.leaf(params[k], name=k) for k in params.names(prefix)}


def trunk_forward(tape: Tape, leaves, prefix: str, X: Tensor, mask: np.ndarray, spec: NetSpec) -> Tensor:
    """Embedding and graphormer layers; returns the ego readout (d_model,)."""
    H = tape.add(X @ leaves[f"{prefix}.embed.W"], leaves[f"{prefix}.embed.b"])
    inv_sqrt_d = 1.0 / math.sqrt(spec.d_model)
    for l in range(spec.layers):
        base = f"{prefix}.layers.{l}."
        Q = H @ leaves[base + "W_Q"]
        K = H @ leaves[base + "W_K"]
        V = H @ leaves[base + "W_V"]
        weights = tape.softmax((Q @ K.T) * inv_sqrt_d, mask)
        Z = H + weights @ V
        hidden = tape.relu(tape.add(Z @ leaves[base + "W1"], leaves[base + "b1"]))
        H = tape.add(hidden @ leaves[base + "W2"], leaves[base + "b2"])
    return H[0]


def head_forward(tape: Tape, leaves, prefix: str, z: Tensor) -> Tensor:
    hidden = tape.tanh(z @ leaves[f"{prefix}.head.W1"] + leaves[f"{prefix}.head.b1"])
    return hidden @ leaves[f"{prefix}.head.W2"] + leaves[f"{prefix}.head.b2"]


def squash(tape: Tape, raw: Tensor, spec: NetSpec, rotation: np.ndarray) -> Tensor:
    """Map unconstrained head outputs into the control set, then de-canonicalise."""
    if spec.system == "quadrotor":
        t = tape.tanh(raw)
        amp = np.array([spec.torque_limit] * 3 + [spec.thrust_amplitude])
        offset = np.array([0.0, 0.0, 0.0, spec.thrust_center])
        # body-frame torque and thrust need no de-canonicalisation
        return tape.shift(tape.mul(t, tape.constant(amp)), offset)

    a = spec.accel_limit
    xy = raw[0:2]
    den = tape.sqrt(tape.shift(tape.sum(xy * xy), 1.0))
    den2 = tape.reshape(den, (1,)) @ tape.constant(np.ones((1, 2)))
    a_xy = tape.div(xy, den2) * a
    a_z = tape.tanh(raw[2:3]) * a
    local = tape.concat([a_xy, a_z])
    return tape.constant(rotation) @ local


def policy_on_tape(tape: Tape, leaves, X: Tensor, mask, spec: NetSpec, rotation) -> Tensor:
    z = trunk_forward(tape, leaves, "policy", X, mask, spec)
    return squash(tape, head_forward(tape, leaves, "policy", z), spec, rotation)


def cbf_on_tape(tape: Tape, leaves, X: Tensor, mask, spec: NetSpec) -> Tensor:
    z = trunk_forward(tape, leaves, "cbf", X, mask, spec)
    return head_forward(tape, leaves, "cbf", z)[0]


def _clip_control(u: np.ndarray, spec: NetSpec) -> np.ndarray:
    if spec.system == "quadrotor":
        lim = spec.torque_limit
        fmax = spec.thrust_center + spec.thrust_amplitude
        return np.clip(u, [-lim, -lim, -lim, 0.0], [lim, lim, lim, fmax])
    return np.clip(u, -spec.accel_limit, spec.accel_limit)


def forward_policy(params: NetParams, subgraph: Subgraph) -> np.ndarray:
    spec = params.spec
    tape = Tape()
    leaves = param_leaves(tape, params, "policy")
    X = tape.constant(canonicalize(subgraph, spec.trunk))
    u = policy_on_tape(
        tape, leaves, X, subgraph.attention_mask(), spec, output_rotation(subgraph, spec.trunk)
    )
    return _clip_control(u.value, spec)


def forward_cbf(params: NetParams, subgraph: Subgraph) -> float:
    spec = params.spec
    tape = Tape()
    leaves = param_leaves(tape, params, "cbf")
    X = tape.constant(canonicalize(subgraph, spec.trunk))
    return float(cbf_on_tape(tape, leaves, X, subgraph.attention_mask(), spec).value)


def policy_controls(params: NetParams, graph: GraphSnapshot) -> np.ndarray:
    """pi_theta for every agent of a snapshot, (N, c)."""
    return np.stack([forward_policy(params, sg) for sg in all_subgraphs(graph)])


# ---------------------------------------------------------------------------
# Input gradients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CbfGradient:
    """h for one ego and its gradients w.r.t. raw states of its subgraph nodes."""

    ego: int
    h: float
    node_ids: np.ndarray
    grads: np.ndarray  # (k, 18)

    def dense(self, num_nodes: int) -> np.ndarray:
        out = np.zeros((num_nodes, STATE_DIM))
        out[self.node_ids] = self.grads
        return out


def pull_back_gradients(G: np.ndarray, states: np.ndarray, kinds: np.ndarray, trunk: str) -> np.ndarray:
    """
    Chain gradients w.r.t. canonical blocks (k, 18) back to raw states, including the
    dependence of the ego frame on the ego's own position and heading. The q0 padding of
    static nodes is constant and receives no gradient.
    """
    G = np.array(G, dtype=np.float64, copy=True)
    G[np.asarray(kinds) != NodeKind.AGENT, 3:] = 0.0
    if trunk == "raw":
        return G
    ego = states[0]
    A, c = canonical_transform(ego, trunk)
    raw = G @ A
    if trunk == "relative":
        raw[0, P_SLICE] -= G[:, P_SLICE].sum(axis=0)
        return raw

    psi = yaw_of(ego[R_SLICE].reshape(3, 3))
    raw[0, P_SLICE] -= rot_z(psi) @ G[:, P_SLICE].sum(axis=0)

    canon = canonical_states(states, kinds, trunk)
    D = np.zeros((STATE_DIM, STATE_DIM))
    D[P_SLICE, P_SLICE] = -Z_GEN
    D[R_SLICE, R_SLICE] = np.kron(-Z_GEN, np.eye(3))
    D[12:15, 12:15] = -Z_GEN
    dL_dpsi = float(np.sum(G * (canon @ D.T)))

    R = ego[R_SLICE].reshape(3, 3)
    x, y = R[0, 0], R[1, 0]
    den = x * x + y * y
    if math.sqrt(den) >= 1e-9:
        raw[0, 3] += dL_dpsi * (-y / den)  # R00
        raw[0, 6] += dL_dpsi * (x / den)  # R10
    else:
        x, y = R[1, 1], -R[0, 1]
        den = x * x + y * y
        raw[0, 4] += dL_dpsi * (-x / den)  # R01
        raw[0, 7] += dL_dpsi * (-y / den)  # R11
    return raw


def cbf_value_and_input_gradient(params: NetParams, subgraph: Subgraph) -> tuple[float, np.ndarray]:
    spec = params.spec
    tape = Tape()
    leaves = param_leaves(tape, params, "cbf")
    X = tape.leaf(canonicalize(subgraph, spec.trunk))
    h = cbf_on_tape(tape, leaves, X, subgraph.attention_mask(), spec)
    (gX,) = grad(tape, h, [X])
    return float(h.value), pull_back_gradients(gX[:, NUM_KINDS:], subgraph.states, subgraph.kinds, spec.trunk)


def cbf_input_gradients(params: NetParams, graph: GraphSnapshot) -> list[CbfGradient]:
    out = []
    for sg in all_subgraphs(graph):
        h, g = cbf_value_and_input_gradient(params, sg)
        out.append(CbfGradient(ego=sg.ego_agent, h=h, node_ids=sg.node_ids, grads=g))
    return out


class LearnedBarrier:
    """Adapter exposing the CBF network through the barrier interface used by safety."""

    def __init__(self, params: NetParams):
        self.params = params

    def evaluate(self, graph: GraphSnapshot) -> list[CbfGradient]:
        return cbf_input_gradients(self.params, graph)

    def value(self, subgraph: Subgraph) -> float:
        return forward_cbf(self.params, subgraph)


# ---------------------------------------------------------------------------
# Haar averaging over the rotation factor
# ---------------------------------------------------------------------------


def rotate_subgraph(subgraph: Subgraph, theta: float) -> Subgraph:
    return transform_subgraph(GroupElement(theta, np.zeros(3)), subgraph)


def haar_invariantize(
    h_raw: Callable[[Subgraph], float],
    samples: int,
    rng: np.random.Generator | None = None,
    stratified: bool = False,
) -> Callable[[Subgraph], float]:
    """
    Average ``h_raw`` over K rotations about world z. Translations are not averaged;
    ``h_raw`` is expected to see relative coordinates. With ``stratified`` the angles
    form an evenly spaced grid with one random offset.

    When every rotated copy equals ``h_raw(subgraph)`` bit for bit that value is returned
    as is. A function that is invariant only up to rounding gets the plain mean.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = rng or np.random.default_rng(0)
    if stratified:
        offset = rng.uniform()
        thetas = -math.pi + 2.0 * math.pi * (np.arange(samples) + offset) / samples
    else:
        thetas = rng.uniform(-math.pi, math.pi, samples)

    def h_hat(subgraph: Subgraph) -> float:
        base = float(h_raw(subgraph))
        values = np.array([h_raw(rotate_subgraph(subgraph, t)) for t in thetas], dtype=np.float64)
        if np.all(values == base):
            return base
        return float(np.mean(values))

    h_hat.thetas = thetas
    return h_hat

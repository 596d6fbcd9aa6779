"""
Swarm graph: typed nodes (agents, lidar hits, targets) with raw state blocks and
local frames, directed (receiver, sender) edges, and agent-centric subgraphs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from egcbf.exceptions import UnknownAgentError
from egcbf.models.liegroup import P_SLICE, STATE_DIM, GroupElement, act_states, frame_of_vector
from egcbf.models.world import Episode, WorldConfig, pad_points

NUM_KINDS = 3
FEATURE_DIM = NUM_KINDS + STATE_DIM


class NodeKind(IntEnum):
    AGENT = 0
    LIDAR = 1
    TARGET = 2


def one_hot(kinds: np.ndarray) -> np.ndarray:
    out = np.zeros((len(kinds), NUM_KINDS))
    out[np.arange(len(kinds)), np.asarray(kinds, dtype=int)] = 1.0
    return out


def node_frame(kind: int, state: np.ndarray) -> GroupElement:
    """Agents carry (yaw, p); static nodes a zero-yaw frame at their position."""
    if kind == NodeKind.AGENT:
        return frame_of_vector(state)
    return GroupElement(0.0, state[P_SLICE])


@dataclass(frozen=True)
class GraphSnapshot:
    kinds: np.ndarray  # (n,) NodeKind values
    states: np.ndarray  # (n, 18) raw state blocks
    owners: np.ndarray  # (n,) agent index owning the node (itself for agents)
    edges: np.ndarray  # (E, 2) receiver, sender
    agent_ids: tuple = ()

    @property
    def num_nodes(self) -> int:
        return self.kinds.shape[0]

    @property
    def num_agents(self) -> int:
        return int(np.sum(self.kinds == NodeKind.AGENT))

    @property
    def agent_index(self) -> dict:
        """agent id -> node id (agents occupy the first N nodes)."""
        ids = self.agent_ids or tuple(range(self.num_agents))
        return {aid: k for k, aid in enumerate(ids)}

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([one_hot(self.kinds), self.states], axis=1)

    def frame(self, node: int) -> GroupElement:
        return node_frame(int(self.kinds[node]), self.states[node])

    @property
    def frames(self) -> list[GroupElement]:
        return [self.frame(k) for k in range(self.num_nodes)]

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}

    def in_neighbors(self, node: int) -> np.ndarray:
        return self.edges[self.edges[:, 0] == node, 1]

    def to_json(self):
        return {
            "kinds": self.kinds.tolist(),
            "states": self.states.tolist(),
            "owners": self.owners.tolist(),
            "edges": self.edges.tolist(),
            "agent_ids": list(self.agent_ids),
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            kinds=np.asarray(data["kinds"], dtype=int),
            states=np.asarray(data["states"], dtype=np.float64).reshape(-1, STATE_DIM),
            owners=np.asarray(data["owners"], dtype=int),
            edges=np.asarray(data["edges"], dtype=int).reshape(-1, 2),
            agent_ids=tuple(data.get("agent_ids", ())),
        )


@dataclass(frozen=True)
class Subgraph:
    """
    The 1-hop in-neighbourhood of one ego agent. Local node 0 is the ego; the remaining
    nodes follow parent order. ``edges`` use local indices.
    """

    ego_id: object
    ego_agent: int
    node_ids: np.ndarray  # global node ids
    kinds: np.ndarray
    states: np.ndarray
    owners: np.ndarray
    edges: np.ndarray

    @property
    def size(self) -> int:
        return self.kinds.shape[0]

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([one_hot(self.kinds), self.states], axis=1)

    @property
    def ego_frame(self) -> GroupElement:
        return frame_of_vector(self.states[0])

    def attention_mask(self) -> np.ndarray:
        """mask[receiver, sender], self-loops included."""
        mask = np.eye(self.size, dtype=bool)
        if len(self.edges):
            mask[self.edges[:, 0], self.edges[:, 1]] = True
        return mask

    def agent_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """(local indices, agent indices) of the agent nodes."""
        local = np.flatnonzero(self.kinds == NodeKind.AGENT)
        return local, self.owners[local]

    def with_states(self, states: np.ndarray) -> "Subgraph":
        return replace(self, states=np.asarray(states, dtype=np.float64))


def build_graph(episode: Episode, scans, cfg: WorldConfig, agent_ids=None) -> GraphSnapshot:
    """Nodes: agents, then lidar hits by (agent, ray), then targets."""
    n = episode.num_agents
    if len(scans) != n:
        raise ValueError(f"expected one lidar scan per agent, got {len(scans)} for {n} agents")

    hit_blocks, hit_owners = [], []
    for i, scan in enumerate(scans):
        padded = scan.padded()
        hit_blocks.append(padded)
        hit_owners.extend([i] * padded.shape[0])
    hits = np.concatenate(hit_blocks, axis=0) if hit_blocks else np.zeros((0, STATE_DIM))
    num_hits = hits.shape[0]

    states = np.concatenate([episode.states, hits, pad_points(episode.targets)], axis=0)
    kinds = np.concatenate(
        [
            np.full(n, NodeKind.AGENT, dtype=int),
            np.full(num_hits, NodeKind.LIDAR, dtype=int),
            np.full(n, NodeKind.TARGET, dtype=int),
        ]
    )
    owners = np.concatenate([np.arange(n), np.asarray(hit_owners, dtype=int), np.arange(n)])

    pos = episode.positions
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    hit_ids = n + np.arange(num_hits)
    hit_owner_arr = np.asarray(hit_owners, dtype=int)

    edges = []
    for i in range(n):
        for j in range(n):
            if i != j and dist[i, j] <= cfg.comm_range:
                edges.append((i, j))
        for k in hit_ids[hit_owner_arr == i]:
            edges.append((i, int(k)))
        edges.append((i, n + num_hits + i))

    ids = tuple(agent_ids) if agent_ids is not None else tuple(range(n))
    return GraphSnapshot(
        kinds=kinds,
        states=states,
        owners=owners,
        edges=np.asarray(edges, dtype=int).reshape(-1, 2),
        agent_ids=ids,
    )


def ego_subgraph(graph: GraphSnapshot, agent_id) -> Subgraph:
    index = graph.agent_index
    if agent_id not in index:
        raise UnknownAgentError(f"unknown agent id {agent_id!r}")
    ego = index[agent_id]

    senders = graph.in_neighbors(ego)
    others = sorted(set(int(s) for s in senders) - {ego})
    node_ids = np.asarray([ego] + others, dtype=int)
    local = {int(g): k for k, g in enumerate(node_ids)}

    keep = [
        (local[int(a)], local[int(b)])
        for a, b in graph.edges
        if int(a) in local and int(b) in local
    ]
    return Subgraph(
        ego_id=agent_id,
        ego_agent=ego,
        node_ids=node_ids,
        kinds=graph.kinds[node_ids],
        states=graph.states[node_ids],
        owners=graph.owners[node_ids],
        edges=np.asarray(keep, dtype=int).reshape(-1, 2),
    )


def all_subgraphs(graph: GraphSnapshot) -> list[Subgraph]:
    return [ego_subgraph(graph, aid) for aid in graph.agent_index]


def permute_agents(episode: Episode, perm) -> Episode:
    """Relabel agents: new agent k is old agent perm[k] (targets follow their agent)."""
    perm = np.asarray(perm, dtype=int)
    return replace(episode, states=episode.states[perm].copy(), targets=episode.targets[perm].copy())


def dump_graphs(path, graphs) -> None:
    """Line-delimited JSON, one snapshot per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for graph in graphs:
            fh.write(json.dumps(graph.to_json()) + "\n")


def load_graphs(path) -> list[GraphSnapshot]:
    with open(path) as fh:
        return [GraphSnapshot.from_json(json.loads(line)) for line in fh if line.strip()]


def transform_states(g: GroupElement, states: np.ndarray, kinds: np.ndarray) -> np.ndarray:
    """phi_g on node blocks: agents move whole, static nodes move their position only."""
    out = act_states(g, states)
    static = np.asarray(kinds) != NodeKind.AGENT
    out[static, 3:] = states[static, 3:]
    return out


def transform_graph(g: GroupElement, graph: GraphSnapshot) -> GraphSnapshot:
    return replace(graph, states=transform_states(g, graph.states, graph.kinds))


def transform_subgraph(g: GroupElement, subgraph: Subgraph) -> Subgraph:
    return subgraph.with_states(transform_states(g, subgraph.states, subgraph.kinds))

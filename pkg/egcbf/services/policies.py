"""
Swarm controllers used by rollouts: the learned graphormer policy, the nominal
controller, the learned-CBF QP filter and the hand-crafted cCBF / dCBF baselines.

Every policy maps (episode, graph) to an (N, c) control array.
"""

from __future__ import annotations

import numpy as np

from egcbf.exceptions import BaselineUnsupportedError
from egcbf.models.graph import build_graph
from egcbf.models.world import scan_all
from egcbf.services.egformer import LearnedBarrier, policy_controls
from egcbf.services.safety import (
    ClassK,
    NominalGains,
    centralized_baseline_qp,
    decentralized_baseline_controls,
    nominal_controls,
    qp_controls,
)
from utils.logger_config import get_logger

logger = get_logger(__name__)

METHODS = ("learned", "learned_qp", "ccbf", "dcbf", "nominal")
LEARNED_METHODS = ("learned", "learned_qp")


def snapshot_graph(episode, world_cfg):
    return build_graph(episode, scan_all(episode, world_cfg), world_cfg)


class Policy:
    name = ""
    needs_graph = False

    def __init__(self, model, world_cfg, gains: NominalGains | None = None):
        self.model = model
        self.world_cfg = world_cfg
        self.gains = gains or NominalGains()

    def nominal(self, episode) -> np.ndarray:
        return nominal_controls(episode.states, episode.targets, self.model, self.gains)

    def act(self, episode, graph=None) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, episode, graph=None) -> np.ndarray:
        if graph is None and self.needs_graph:
            graph = snapshot_graph(episode, self.world_cfg)
        return self.act(episode, graph)


class NominalPolicy(Policy):
    name = "nominal"

    def act(self, episode, graph=None):
        return self.nominal(episode)


class LearnedPolicy(Policy):
    name = "learned"
    needs_graph = True

    def __init__(self, params, model, world_cfg, gains=None):
        super().__init__(model, world_cfg, gains)
        self.params = params

    def act(self, episode, graph=None):
        return policy_controls(self.params, graph)


class LearnedQPPolicy(Policy):
    """pi_QP: the nominal controller filtered through the learned CBF."""

    name = "learned_qp"
    needs_graph = True

    def __init__(self, params, model, world_cfg, gains=None, alpha: ClassK | None = None, solver_options=None):
        super().__init__(model, world_cfg, gains)
        self.barrier = LearnedBarrier(params)
        self.alpha = alpha or ClassK()
        self.solver_options = solver_options or {}

    def act(self, episode, graph=None):
        U, _ = qp_controls(
            self.barrier, graph, self.model, self.nominal(episode), self.alpha, self.solver_options
        )
        return U


class CentralizedCbfPolicy(Policy):
    name = "ccbf"

    def __init__(self, model, world_cfg, gains=None, margin=0.2, c=0.5, alpha=None, solver_options=None):
        super().__init__(model, world_cfg, gains)
        self.margin, self.c = margin, c
        self.alpha = alpha or ClassK()
        self.solver_options = solver_options or {}

    def act(self, episode, graph=None):
        U, _ = centralized_baseline_qp(
            episode, self.model, self.world_cfg, self.nominal(episode),
            self.margin, self.c, self.alpha, self.solver_options,
        )
        return U


class DecentralizedCbfPolicy(CentralizedCbfPolicy):
    name = "dcbf"

    def act(self, episode, graph=None):
        return decentralized_baseline_controls(
            episode, self.model, self.world_cfg, self.nominal(episode),
            self.margin, self.c, self.alpha, self.solver_options,
        )


def build_policy(method: str, model, world_cfg, params=None, gains=None, eval_cfg=None) -> Policy:
    if method in LEARNED_METHODS:
        if params is None:
            raise ValueError(f"the {method} policy needs network parameters")
        if method == "learned_qp":
            return LearnedQPPolicy(params, model, world_cfg, gains)
        return LearnedPolicy(params, model, world_cfg, gains)
    if method == "nominal":
        return NominalPolicy(model, world_cfg, gains)
    if method in ("ccbf", "dcbf"):
        if model.system != "double_integrator":
            raise BaselineUnsupportedError(f"{method} baseline is only defined for the double integrator")
        margin = eval_cfg.baseline_margin if eval_cfg else 0.2
        c = eval_cfg.baseline_velocity_gain if eval_cfg else 0.5
        cls = CentralizedCbfPolicy if method == "ccbf" else DecentralizedCbfPolicy
        return cls(model, world_cfg, gains, margin=margin, c=c)
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")

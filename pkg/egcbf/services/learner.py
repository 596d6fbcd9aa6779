"""
Joint training of the graphormer policy (``policy.*``) and CBF (``cbf.*``).

One iteration: roll episodes to collect ego snapshots, label them by a finite-horizon
reachability check, sample a class-balanced batch, build the loss on a tape per
snapshot and take an Adam step with separate learning rates for the two networks.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from egcbf.exceptions import IntegrationError, TrainingDivergedError
from egcbf.models.dynamics import build_model
from egcbf.models.graph import (
    GraphSnapshot,
    NodeKind,
    Subgraph,
    all_subgraphs,
    ego_subgraph,
    one_hot,
    transform_graph,
)
from egcbf.models.liegroup import GroupElement, act_points
from egcbf.models.world import is_safe, sample_episode
from egcbf.services.autodiff import Tape, grad
from egcbf.services.checkpoint_service import load_checkpoint, save_checkpoint
from egcbf.services.egformer import (
    LearnedBarrier,
    NetParams,
    NetSpec,
    canonical_states,
    canonical_transform,
    canonicalize,
    cbf_input_gradients,
    cbf_on_tape,
    init_params,
    output_rotation,
    param_leaves,
    policy_on_tape,
)
from egcbf.services.harness import run_episode
from egcbf.services.policies import LearnedPolicy, NominalPolicy, snapshot_graph
from egcbf.services.safety import ClassK, NominalGains, nominal_controls, qp_controls
from utils.logger_config import get_logger

logger = get_logger(__name__)

CURVE_FIELDS = (
    "iteration",
    "loss",
    "control",
    "derivative",
    "safe",
    "unsafe",
    "n_safe",
    "n_unsafe",
    "n_unlabeled",
    "eval_safe",
    "eval_reach",
)


class Label(str, Enum):
    SAFE = "safe"
    UNSAFE = "unsafe"
    UNLABELED = "unlabeled"


def label_agents(window: np.ndarray, horizon: int) -> list[Label]:
    """
    ``window[k, i]`` is the safety flag of agent i k steps after the snapshot (row 0 is the
    snapshot itself). Unsafe now wins; safe needs a complete horizon of safe steps.
    """
    window = np.atleast_2d(np.asarray(window, dtype=bool))
    complete = window.shape[0] >= horizon + 1
    labels = []
    for i in range(window.shape[1]):
        if not window[0, i]:
            labels.append(Label.UNSAFE)
        elif complete and window[: horizon + 1, i].all():
            labels.append(Label.SAFE)
        else:
            labels.append(Label.UNLABELED)
    return labels


@dataclass(frozen=True)
class Snapshot:
    """One collected time step: the graph, the controls applied and a label per agent."""

    graph: GraphSnapshot
    targets: np.ndarray  # (N, 3)
    controls: np.ndarray  # (N, c) controls in effect
    labels: tuple[Label, ...]
    obstacle_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    obstacle_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seed: int = 0
    t: int = 0

    @property
    def num_agents(self) -> int:
        return len(self.labels)

    @property
    def states(self) -> np.ndarray:
        return self.graph.states[: self.num_agents]


@dataclass(frozen=True)
class LabeledSample:
    snapshot: Snapshot
    agent: int
    label: Label

    @property
    def subgraph(self) -> Subgraph:
        ids = self.snapshot.graph.agent_ids
        return ego_subgraph(self.snapshot.graph, ids[self.agent] if ids else self.agent)


@dataclass
class Dataset:
    snapshots: list[Snapshot] = field(default_factory=list)

    def __len__(self):
        return len(self.snapshots)

    def extend(self, snapshots) -> None:
        self.snapshots.extend(snapshots)

    def samples(self, label: Label | None = None) -> list[LabeledSample]:
        return [
            LabeledSample(s, i, lab)
            for s in self.snapshots
            for i, lab in enumerate(s.labels)
            if label is None or lab == label
        ]

    def counts(self) -> dict[str, int]:
        out = {lab.value: 0 for lab in Label}
        for s in self.snapshots:
            for lab in s.labels:
                out[lab.value] += 1
        return out


@dataclass(frozen=True)
class LossWeights:
    eta_c: float = 1.0
    eta_d: float = 0.2
    gamma: float = 0.02
    alpha: ClassK = ClassK()

    def __post_init__(self):
        if min(self.eta_c, self.eta_d, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def from_config(cls, train_cfg) -> "LossWeights":
        return cls(
            eta_c=train_cfg.eta_c,
            eta_d=train_cfg.eta_d,
            gamma=train_cfg.gamma,
            alpha=ClassK(train_cfg.alpha_slope),
        )


def solver_options(train_cfg) -> dict:
    return {
        "rho": train_cfg.qp_rho,
        "max_iter": train_cfg.qp_max_iter,
        "eps_abs": train_cfg.qp_eps,
        "eps_rel": train_cfg.qp_eps,
    }


# ---------------------------------------------------------------------------
# Optimiser state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: NetParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: np.random.Generator
    step: int = 0
    lr_policy: float = 1e-5
    lr_cbf: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, exp_cfg, model) -> "TrainState":
        spec = NetSpec.from_configs(exp_cfg.net, model)
        params = init_params(spec, exp_cfg.net.init_seed)
        t = exp_cfg.train
        return cls(
            params=params,
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
            rng=np.random.default_rng(t.seed),
            lr_policy=t.lr_policy,
            lr_cbf=t.lr_cbf,
            beta1=t.adam_beta1,
            beta2=t.adam_beta2,
            eps=t.adam_eps,
        )

    def learning_rate(self, name: str) -> float:
        return self.lr_policy if name.startswith("policy.") else self.lr_cbf

    def apply_gradients(self, grads: dict[str, np.ndarray]) -> None:
        """Bias-corrected Adam step."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / (1.0 - b1**self.step)
            v_hat = self.v[name] / (1.0 - b2**self.step)
            self.params[name] = self.params[name] - self.learning_rate(name) * m_hat / (np.sqrt(v_hat) + self.eps)

    def save(self, path, metadata=None) -> Path:
        extra = {f"adam.m.{k}": a for k, a in self.m.items()}
        extra.update({f"adam.v.{k}": a for k, a in self.v.items()})
        meta = dict(metadata or {})
        meta["train_state"] = {
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
            "lr_policy": self.lr_policy,
            "lr_cbf": self.lr_cbf,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
        }
        return save_checkpoint(path, self.params, meta, extra)

    @classmethod
    def load(cls, path) -> "TrainState":
        params, meta, extra = load_checkpoint(path)
        info = meta.get("train_state", {})
        rng = np.random.default_rng()
        if "rng_state" in info:
            rng.bit_generator.state = info["rng_state"]
        names = params.names()
        betas = info.get("betas", [0.9, 0.999])
        return cls(
            params=params,
            m={k: extra.get(f"adam.m.{k}", np.zeros_like(params[k])) for k in names},
            v={k: extra.get(f"adam.v.{k}", np.zeros_like(params[k])) for k in names},
            rng=rng,
            step=int(info.get("step", 0)),
            lr_policy=float(info.get("lr_policy", 1e-5)),
            lr_cbf=float(info.get("lr_cbf", 1e-4)),
            beta1=float(betas[0]),
            beta2=float(betas[1]),
            eps=float(info.get("eps", 1e-8)),
        )


# ---------------------------------------------------------------------------
# Data collection
# ---------------------------------------------------------------------------


def _flags(episode, world_cfg) -> np.ndarray:
    return is_safe(episode.states, episode.obstacle_centers, episode.obstacle_radii, world_cfg)[0]


def _unroll_flags(episode, policy, model, world_cfg, horizon: int) -> np.ndarray:
    """Safety flags along an explicit policy unroll from a copy of the episode."""
    flags = [_flags(episode, world_cfg)]
    try:
        for _ in range(horizon):
            episode.advance(model, policy(episode))
            flags.append(_flags(episode, world_cfg))
    except IntegrationError as e:
        logger.warning(f"Label unroll stopped early: {e}")
    return np.asarray(flags)


def _collect_episode(params: NetParams, exp_cfg, seed: int, explore: bool, steps: int) -> list[Snapshot]:
    """Roll one episode and label every visited snapshot. Top level so workers can pickle it."""
    model = build_model(exp_cfg.model)
    world = exp_cfg.world
    gains = NominalGains.from_config(exp_cfg.model)
    horizon = exp_cfg.train.label_horizon
    stride = exp_cfg.train.explore_label_stride

    episode = sample_episode(world, random_yaw=model.system == "quadrotor", seed=seed)
    learned = LearnedPolicy(params, model, world, gains)
    actor = NominalPolicy(model, world, gains) if explore else learned
    # on-policy episodes keep running under pi_theta so the last snapshots get a full window
    total = steps if explore else steps + horizon

    records, flags = [], []
    try:
        for k in range(total):
            flags.append(_flags(episode, world))
            if k < steps:
                graph = snapshot_graph(episode, world)
                U = actor(episode, graph)
                unroll = None
                if explore and k % stride == 0:
                    unroll = _unroll_flags(episode.copy(), learned, model, world, horizon)
                records.append((graph, U, episode.t, unroll))
            else:
                U = learned(episode)
            if k < total - 1:
                episode.advance(model, U)
    except IntegrationError as e:
        logger.error(f"Integration failed while collecting (seed {seed}, agent {e.agent_id}): {e}")

    flags = np.asarray(flags)
    snapshots = []
    for k, (graph, U, t, unroll) in enumerate(records):
        if explore:
            window = unroll if unroll is not None else flags[k : k + 1]
        else:
            window = flags[k : k + horizon + 1]
        snapshots.append(
            Snapshot(
                graph=graph,
                targets=episode.targets.copy(),
                controls=np.asarray(U, dtype=np.float64),
                labels=tuple(label_agents(window, horizon)),
                obstacle_centers=episode.obstacle_centers.copy(),
                obstacle_radii=episode.obstacle_radii.copy(),
                seed=seed,
                t=t,
            )
        )
    return snapshots


def collect(train_state: TrainState, exp_cfg, steps: int | None = None, episodes: int = 1, workers: int = 1) -> Dataset:
    """
    Roll ``episodes`` episodes of ``steps`` steps. Each episode is an exploration episode
    (driven by pi_nom) with probability ``exploration_prob``, otherwise on-policy.
    """
    t = exp_cfg.train
    steps = steps or t.collect_steps
    seeds = [int(s) for s in train_state.rng.integers(0, 2**31 - 1, size=episodes)]
    explore = [bool(x) for x in train_state.rng.random(episodes) < t.exploration_prob]
    params = train_state.params.copy()

    dataset = Dataset()
    if workers > 1 and episodes > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_collect_episode, params, exp_cfg, s, e, steps) for s, e in zip(seeds, explore)
            ]
            for f in futures:
                dataset.extend(f.result())
    else:
        for s, e in zip(seeds, explore):
            dataset.extend(_collect_episode(params, exp_cfg, s, e, steps))

    counts = dataset.counts()
    logger.info(
        f"Collected {len(dataset)} snapshots from {episodes} episode(s) "
        f"({sum(explore)} exploring): {counts}"
    )
    return dataset


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator, use_unlabeled: bool = False) -> list[LabeledSample]:
    """Class-balanced batch; a short class is topped up from the others."""
    pools = [dataset.samples(Label.SAFE), dataset.samples(Label.UNSAFE)]
    if use_unlabeled:
        pools.append(dataset.samples(Label.UNLABELED))
    pools = [p for p in pools if p]
    if not pools:
        return []

    share = batch_size // len(pools)
    chosen, spare = [], []
    for pool in pools:
        order = rng.permutation(len(pool))
        chosen.extend(pool[i] for i in order[:share])
        spare.extend(pool[i] for i in order[share:])
    missing = batch_size - len(chosen)
    if missing > 0 and spare:
        order = rng.permutation(len(spare))
        chosen.extend(spare[i] for i in order[:missing])
    return chosen


def transform_snapshot(g: GroupElement, snapshot: Snapshot, model) -> Snapshot:
    """Move a snapshot by g: graph states, targets and obstacles by phi_g, controls by psi_g."""
    return replace(
        snapshot,
        graph=transform_graph(g, snapshot.graph),
        targets=act_points(g, snapshot.targets),
        controls=model.act_controls(g, snapshot.controls),
        obstacle_centers=act_points(g, snapshot.obstacle_centers),
    )


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass
class LossReport:
    total: float
    grads: dict[str, np.ndarray]
    components: dict[str, float]
    counts: dict[str, int]

    def is_finite(self) -> bool:
        return math.isfinite(self.total) and all(np.all(np.isfinite(g)) for g in self.grads.values())


def reference_controls(params: NetParams, snapshot: Snapshot, model, train_cfg, gains: NominalGains | None = None) -> np.ndarray:
    """The controller pi_theta imitates: pi_QP (nominal filtered by the current CBF) or pi_nom."""
    u_nom = nominal_controls(snapshot.states, snapshot.targets, model, gains)
    if train_cfg.reference == "nominal":
        return u_nom
    U, _ = qp_controls(
        LearnedBarrier(params),
        snapshot.graph,
        model,
        u_nom,
        ClassK(train_cfg.alpha_slope),
        solver_options(train_cfg),
    )
    return U


def _group(batch) -> list[tuple[Snapshot, list[LabeledSample]]]:
    groups: dict[int, tuple[Snapshot, list]] = {}
    for sample in batch:
        groups.setdefault(id(sample.snapshot), (sample.snapshot, []))[1].append(sample)
    return list(groups.values())


def batch_references(params, batch, model, train_cfg, gains=None) -> dict[int, np.ndarray]:
    """Reference controls per snapshot of a batch, keyed by ``id(snapshot)``."""
    return {
        id(snap): reference_controls(params, snap, model, train_cfg, gains) for snap, _ in _group(batch)
    }


def _next_step_features(tape: Tape, sg: Subgraph, snapshot: Snapshot, model, controls: dict, spec: NetSpec):
    """
    Canonical features of the subgraph one step ahead, x + dt (f0(x) + B(x) u), with u a
    tape tensor where the policy drives the agent. The ego frame at the new state depends
    on the drift only, so the control enters linearly.
    """
    dt = model.dt
    local, agents = sg.agent_nodes()
    S = sg.states
    f0 = np.zeros_like(S)
    f0[local] = model.drift(S[local])
    S_drift = S + dt * f0
    A, _ = canonical_transform(S_drift[0], spec.trunk)
    C = canonical_states(S_drift, sg.kinds, spec.trunk)

    c = spec.control_dim
    Bc = np.zeros(S.shape + (c,))
    Bc[local] = dt * np.einsum("ij,njc->nic", A, model.input_matrix(S[local]))

    zero = np.zeros(c)
    rows = []
    for k in range(sg.size):
        if sg.kinds[k] == NodeKind.AGENT:
            a = int(sg.owners[k])
            rows.append(controls[a] if a in controls else tape.constant(snapshot.controls[a]))
        else:
            rows.append(tape.constant(zero))
    U = tape.stack_rows(rows)
    moved = tape.add(tape.constant(C), tape.batched_matvec(tape.constant(Bc), U))
    return tape.concat([tape.constant(one_hot(sg.kinds)), moved], axis=1)


def loss(
    params: NetParams,
    batch: list[LabeledSample],
    weights: LossWeights,
    model,
    train_cfg,
    references: dict[int, np.ndarray] | None = None,
    gains: NominalGains | None = None,
) -> LossReport:
    """
    Sum over the batch of
        eta_c |pi_theta - pi_ref|
        + eta_d [gamma - (hdot + alpha(h))]+      (labelled samples, or all with use_unlabeled)
        + [gamma - h]+ (safe)  /  [gamma + h]+ (unsafe)
    with hdot the forward difference of h over one step, the ego (or every subgraph agent
    with ``derivative_controls = "all"``) driven by pi_theta.
    """
    if not batch:
        raise ValueError("loss needs a non-empty batch")
    spec = params.spec
    grads = {k: np.zeros_like(a) for k, a in params.arrays.items()}
    parts = {"control": 0.0, "derivative": 0.0, "safe": 0.0, "unsafe": 0.0}
    counts = {lab.value: 0 for lab in Label}
    total = 0.0
    gamma, slope, dt = weights.gamma, weights.alpha.slope, model.dt

    for snapshot, samples in _group(batch):
        if references is not None and id(snapshot) in references:
            ref = references[id(snapshot)]
        else:
            ref = reference_controls(params, snapshot, model, train_cfg, gains)

        subgraphs = {sg.ego_agent: sg for sg in all_subgraphs(snapshot.graph)}
        drivers = {s.agent for s in samples}
        if train_cfg.derivative_controls == "all":
            for s in samples:
                drivers.update(int(a) for a in subgraphs[s.agent].agent_nodes()[1])

        tape = Tape()
        leaves = param_leaves(tape, params)
        pi = {}
        for a in sorted(drivers):
            sg = subgraphs[a]
            X = tape.constant(canonicalize(sg, spec.trunk))
            pi[a] = policy_on_tape(tape, leaves, X, sg.attention_mask(), spec, output_rotation(sg, spec.trunk))

        terms = []
        for s in samples:
            counts[s.label.value] += 1
            sg = subgraphs[s.agent]
            mask = sg.attention_mask()
            h = cbf_on_tape(tape, leaves, tape.constant(canonicalize(sg, spec.trunk)), mask, spec)

            control = tape.scale(tape.norm(pi[s.agent] - tape.constant(ref[s.agent])), weights.eta_c)
            terms.append(("control", control))
            if s.label == Label.SAFE:
                terms.append(("safe", tape.relu(tape.shift(-h, gamma))))
            elif s.label == Label.UNSAFE:
                terms.append(("unsafe", tape.relu(tape.shift(h, gamma))))

            if s.label != Label.UNLABELED or train_cfg.use_unlabeled:
                if train_cfg.derivative_controls == "ego":
                    drive = {s.agent: pi[s.agent]}
                else:
                    drive = {a: pi[a] for a in sg.agent_nodes()[1].tolist()}
                X_next = _next_step_features(tape, sg, snapshot, model, drive, spec)
                h_next = cbf_on_tape(tape, leaves, X_next, mask, spec)
                h_dot = tape.scale(h_next - h, 1.0 / dt)
                margin = tape.shift(-(h_dot + tape.scale(h, slope)), gamma)
                terms.append(("derivative", tape.scale(tape.relu(margin), weights.eta_d)))

        snapshot_loss = terms[0][1]
        for _, t in terms[1:]:
            snapshot_loss = snapshot_loss + t
        for name, t in terms:
            parts[name] += float(t.value)
        total += float(snapshot_loss.value)

        names = list(leaves)
        for name, g in zip(names, grad(tape, snapshot_loss, [leaves[n] for n in names])):
            grads[name] += g

    return LossReport(total=total, grads=grads, components=parts, counts=counts)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    curve_path: Path
    summary_path: Path
    history: list[dict]
    first_reach_iteration: int | None = None


def outer_ring_gradient_ratio(params: NetParams, graphs, comm_range: float) -> dict:
    """
    Mean |dh/dx_j| for neighbour agents at distance in (0.9 R, R] against those within R/2.
    A diagnostic only: gradients that stay large at the edge of the communication range
    make h sensitive to neighbours entering or leaving the graph.
    """
    outer, inner = [], []
    for graph in graphs:
        for g in cbf_input_gradients(params, graph):
            ego_pos = graph.states[g.ego, 0:3]
            for node, row in zip(g.node_ids[1:], g.grads[1:]):
                if graph.kinds[node] != NodeKind.AGENT:
                    continue
                d = float(np.linalg.norm(graph.states[node, 0:3] - ego_pos))
                if 0.9 * comm_range < d <= comm_range:
                    outer.append(float(np.linalg.norm(row)))
                elif d <= 0.5 * comm_range:
                    inner.append(float(np.linalg.norm(row)))
    out = {
        "outer_mean": float(np.mean(outer)) if outer else None,
        "inner_mean": float(np.mean(inner)) if inner else None,
        "outer_count": len(outer),
        "inner_count": len(inner),
    }
    if outer and inner:
        out["decays"] = out["outer_mean"] < out["inner_mean"]
    return out


def evaluate_training_policy(params: NetParams, exp_cfg, model, episodes: int, seed_base: int) -> dict:
    """In-distribution safety and reach rates of pi_theta."""
    gains = NominalGains.from_config(exp_cfg.model)
    policy = LearnedPolicy(params, model, exp_cfg.world, gains)
    results = [
        run_episode(policy, exp_cfg.world, model, seed_base + k)[0] for k in range(episodes)
    ]
    return {
        "safe": float(np.mean([m.safety_rate for m in results])),
        "reach": float(np.mean([m.reach_rate for m in results])),
    }


def _write_curve(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in CURVE_FIELDS})


def train(exp_cfg, output_dir, workers: int = 1, resume=None) -> TrainResult:
    """
    Alternate collection and updates for ``train.iterations`` iterations. A non-finite
    loss stops training after saving the last good parameters.
    """
    t = exp_cfg.train
    model = build_model(exp_cfg.model)
    gains = NominalGains.from_config(exp_cfg.model)
    weights = LossWeights.from_config(t)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = output_dir / "checkpoint.ckpt"
    curve_path = output_dir / "learning_curve.csv"
    summary_path = output_dir / "train_summary.json"
    metadata = {"config": exp_cfg.to_dict(), "config_hash": exp_cfg.config_hash()}

    state = TrainState.load(resume) if resume else TrainState.create(exp_cfg, model)
    logger.info(
        f"Training {state.params.spec.trunk} model ({t.reference} reference) for {t.iterations} "
        f"iterations on {exp_cfg.world.num_agents} agents"
    )

    history: list[dict] = []
    first_reach = None
    dataset = Dataset()
    eval_seed_base = exp_cfg.world.seed + 100_000

    for it in range(t.iterations):
        if it % t.collect_every == 0:
            dataset = collect(state, exp_cfg, t.collect_steps, episodes=t.collect_episodes, workers=workers)
        batch = sample_batch(dataset, t.batch_size, state.rng, t.use_unlabeled)
        if not batch:
            logger.warning(f"Iteration {it}: no labelled samples, skipping update")
            continue

        report = loss(state.params, batch, weights, model, t, gains=gains)
        if not report.is_finite():
            path = state.save(checkpoint_path, {**metadata, "iteration": it, "diverged": True})
            _write_curve(curve_path, history)
            logger.error(f"Loss diverged at iteration {it}; last good checkpoint saved to {path}")
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}", checkpoint_path=path, iteration=it
            )
        state.apply_gradients(report.grads)

        row = {
            "iteration": it,
            "loss": report.total / len(batch),
            **{k: v / len(batch) for k, v in report.components.items()},
            "n_safe": report.counts["safe"],
            "n_unsafe": report.counts["unsafe"],
            "n_unlabeled": report.counts["unlabeled"],
        }
        if (it + 1) % t.eval_every == 0:
            rates = evaluate_training_policy(state.params, exp_cfg, model, t.eval_episodes, eval_seed_base)
            row["eval_safe"], row["eval_reach"] = rates["safe"], rates["reach"]
            if first_reach is None and rates["reach"] >= 0.5:
                first_reach = it
        history.append(row)
        logger.info(
            f"iter {it}: loss {row['loss']:.4f} (control {row['control']:.4f}, "
            f"deriv {row['derivative']:.4f}, safe {row['safe']:.4f}, unsafe {row['unsafe']:.4f})"
            + (f" eval safe {row['eval_safe']:.3f} reach {row['eval_reach']:.3f}" if "eval_safe" in row else "")
        )

    state.save(checkpoint_path, {**metadata, "iteration": t.iterations})
    _write_curve(curve_path, history)

    diagnostic = outer_ring_gradient_ratio(
        state.params, [s.graph for s in dataset.snapshots[:16]], exp_cfg.world.comm_range
    )
    logger.info(f"Outer-ring gradient diagnostic: {diagnostic}")
    summary = {
        "iterations": t.iterations,
        "first_reach_iteration": first_reach,
        "final_loss": history[-1]["loss"] if history else None,
        "outer_ring": diagnostic,
        "config_hash": metadata["config_hash"],
    }
    summary_path.write_text(json.dumps(summary, indent=2))
    return TrainResult(checkpoint_path, curve_path, summary_path, history, first_reach)

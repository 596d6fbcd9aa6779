"""
Evaluation harness: single-episode metrics, zero-shot swarm-size sweeps, result tables,
safety plots and trajectory-log replay.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from egcbf.exceptions import CheckpointError
from egcbf.models.dynamics import build_model
from egcbf.models.graph import dump_graphs
from egcbf.models.world import Episode, WorldConfig, is_safe, sample_episode
from egcbf.services.checkpoint_service import load_checkpoint
from egcbf.services.policies import LEARNED_METHODS, METHODS, build_policy, snapshot_graph
from egcbf.services.safety import NominalGains
from utils.logger_config import get_logger

logger = get_logger(__name__)

RESULT_FIELDS = (
    "method",
    "N",
    "density",
    "safe",
    "reach",
    "succ",
    "cost_mean",
    "cost_p25",
    "cost_p75",
    "reward",
)


@dataclass
class EpisodeMetrics:
    safety_rate: float
    reach_rate: float
    success_rate: float
    cost: float  # collision events per agent
    reward: float
    seed: int = 0
    num_agents: int = 0
    safe_flags: list = field(default_factory=list)
    reach_flags: list = field(default_factory=list)
    success_flags: list = field(default_factory=list)

    def to_json(self):
        return asdict(self)


def _metrics(safe: np.ndarray, reach: np.ndarray, events: np.ndarray, reward: float, seed: int) -> EpisodeMetrics:
    success = safe & reach
    n = len(safe)
    return EpisodeMetrics(
        safety_rate=float(np.mean(safe)),
        reach_rate=float(np.mean(reach)),
        success_rate=float(np.mean(success)),
        cost=float(np.sum(events)) / n,
        reward=float(reward),
        seed=int(seed),
        num_agents=n,
        safe_flags=safe.tolist(),
        reach_flags=reach.tolist(),
        success_flags=success.tolist(),
    )


def run_episode(
    policy,
    world_cfg: WorldConfig,
    model,
    seed: int,
    horizon: int | None = None,
    log_path=None,
    episode: Episode | None = None,
    graphs: list | None = None,
) -> tuple[EpisodeMetrics, list[dict]]:
    """
    Roll one episode and score it. An agent is safe if it never violates the collision
    predicate, has reached if it ends within ``reach_radius`` of its target; a cost event
    is a transition from safe to unsafe. Reward is minus the accumulated control gap to
    pi_nom. Returns the metrics and the trajectory records (also written to ``log_path``).
    """
    if episode is None:
        episode = sample_episode(world_cfg, random_yaw=model.system == "quadrotor", seed=seed)
    else:
        episode = episode.copy()
    horizon = world_cfg.episode_len if horizon is None else horizon

    def flags_of(ep):
        return is_safe(ep.states, ep.obstacle_centers, ep.obstacle_radii, world_cfg)[0]

    flags = flags_of(episode)
    ever_safe = flags.copy()
    # only safe-to-unsafe transitions count; a violation at t = 0 is not an event
    events = np.zeros(flags.shape[0], dtype=int)
    reward = 0.0
    records = [
        {
            "type": "episode",
            "seed": int(seed),
            "method": policy.name,
            "world": world_cfg.model_dump(mode="json"),
            "targets": episode.targets.tolist(),
            "obstacle_centers": episode.obstacle_centers.tolist(),
            "obstacle_radii": episode.obstacle_radii.tolist(),
        },
        {"type": "step", "t": 0, "positions": episode.positions.tolist(), "safe": flags.tolist(), "gap": 0.0},
    ]

    for _ in range(horizon):
        graph = None
        if policy.needs_graph or graphs is not None:
            graph = snapshot_graph(episode, world_cfg)
            if graphs is not None:
                graphs.append(graph)
        U = policy(episode, graph)
        gap = float(np.sum(np.linalg.norm(U - policy.nominal(episode), axis=1)))
        reward -= gap
        episode.advance(model, U)

        new_flags = flags_of(episode)
        events += (flags & ~new_flags).astype(int)
        ever_safe &= new_flags
        flags = new_flags
        records.append(
            {
                "type": "step",
                "t": episode.t,
                "positions": episode.positions.tolist(),
                "safe": flags.tolist(),
                "gap": gap,
            }
        )

    reach = np.linalg.norm(episode.positions - episode.targets, axis=1) < world_cfg.reach_radius
    metrics = _metrics(ever_safe, reach, events, reward, seed)
    records.append({"type": "metrics", **metrics.to_json()})

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return metrics, records


def replay_log(path, verify: bool = False) -> dict:
    """
    Recompute metrics from a trajectory log using only the stored positions. With
    ``verify`` the recomputed metrics are compared to the logged ones.
    """
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    header = next((r for r in records if r.get("type") == "episode"), None)
    if header is None:
        raise ValueError(f"{path} has no episode header")
    world = WorldConfig.model_validate(header["world"])
    steps = [r for r in records if r.get("type") == "step"]
    if not steps:
        raise ValueError(f"{path} has no steps")

    centers = np.asarray(header["obstacle_centers"]).reshape(-1, 3)
    radii = np.asarray(header["obstacle_radii"]).reshape(-1)
    targets = np.asarray(header["targets"]).reshape(-1, 3)

    flags = [is_safe(np.asarray(s["positions"]), centers, radii, world)[0] for s in steps]
    ever_safe = np.logical_and.reduce(flags)
    events = np.zeros(flags[0].shape[0], dtype=int)
    for prev, cur in zip(flags, flags[1:]):
        events += (prev & ~cur).astype(int)
    final = np.asarray(steps[-1]["positions"])
    reach = np.linalg.norm(final - targets, axis=1) < world.reach_radius
    reward = -sum(float(s.get("gap", 0.0)) for s in steps)

    metrics = _metrics(ever_safe, reach, events, reward, header.get("seed", 0))
    out = {"path": str(path), "steps": len(steps) - 1, "metrics": metrics.to_json()}
    if verify:
        logged = next((r for r in records if r.get("type") == "metrics"), None)
        mismatches = []
        if logged is None:
            mismatches.append("no logged metrics")
        else:
            for key in ("safety_rate", "reach_rate", "success_rate", "cost"):
                if abs(float(logged[key]) - getattr(metrics, key)) > 1e-12:
                    mismatches.append(key)
            if abs(float(logged["reward"]) - metrics.reward) > 1e-6 * max(1.0, abs(metrics.reward)):
                mismatches.append("reward")
        out["verified"] = not mismatches
        out["mismatches"] = mismatches
    return out


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    checkpoint: str | None
    swarm_sizes: tuple[int, ...] = (8, 16, 32)
    side_length: float = 4.0
    num_obstacles: int = 0
    episodes: int = 50
    seed_base: int = 1000
    methods: tuple[str, ...] = METHODS

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes per cell must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {', '.join(sorted(unknown))}")

    @classmethod
    def from_config(cls, exp_cfg, checkpoint=None) -> "SweepSpec":
        e = exp_cfg.eval
        return cls(
            checkpoint=str(checkpoint) if checkpoint is not None else None,
            swarm_sizes=tuple(e.swarm_sizes),
            side_length=e.side_length,
            num_obstacles=e.num_obstacles,
            episodes=e.episodes,
            seed_base=e.seed_base,
            methods=tuple(e.methods),
        )


def cell_world(base: WorldConfig, num_agents: int, side_length: float, num_obstacles: int) -> WorldConfig:
    data = base.model_dump()
    data.update(num_agents=num_agents, side_length=side_length, num_obstacles=num_obstacles)
    return WorldConfig.model_validate(data)


def _run_job(job) -> dict:
    """One (method, N, seed) episode; top level so process workers can pickle it."""
    method, world_cfg, model_cfg, eval_cfg, params, seed = job
    model = build_model(model_cfg)
    policy = build_policy(method, model, world_cfg, params, NominalGains.from_config(model_cfg), eval_cfg)
    metrics, _ = run_episode(policy, world_cfg, model, seed)
    return metrics.to_json()


def _run_jobs(jobs, workers: int) -> list[dict]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def aggregate(method: str, world_cfg: WorldConfig, episodes: list[dict]) -> dict:
    costs = np.asarray([m["cost"] for m in episodes])
    return {
        "method": method,
        "N": world_cfg.num_agents,
        "density": world_cfg.density,
        "safe": float(np.mean([m["safety_rate"] for m in episodes])),
        "reach": float(np.mean([m["reach_rate"] for m in episodes])),
        "succ": float(np.mean([m["success_rate"] for m in episodes])),
        "cost_mean": float(np.mean(costs)),
        "cost_p25": float(np.percentile(costs, 25)),
        "cost_p75": float(np.percentile(costs, 75)),
        "reward": float(np.mean([m["reward"] for m in episodes])),
    }


def _load_params(checkpoint):
    if checkpoint is None:
        raise CheckpointError("the learned method needs a checkpoint")
    params, _, _ = load_checkpoint(checkpoint)
    return params


def sweep(spec: SweepSpec, exp_cfg, workers: int = 1) -> list[dict]:
    """
    One row per (method, N) with mean metrics over ``spec.episodes`` seeded episodes.
    Baselines are skipped with a warning for the quadrotor and above
    ``eval.baseline_max_agents``.
    """
    model = build_model(exp_cfg.model)
    params = _load_params(spec.checkpoint) if set(LEARNED_METHODS) & set(spec.methods) else None
    rows = []
    for method in spec.methods:
        for n in spec.swarm_sizes:
            if method in ("ccbf", "dcbf"):
                if model.system != "double_integrator":
                    logger.warning(f"Skipping {method}: baselines exist only for the double integrator")
                    continue
                if n > exp_cfg.eval.baseline_max_agents:
                    logger.warning(
                        f"Skipping {method} at N={n} (above baseline_max_agents={exp_cfg.eval.baseline_max_agents})"
                    )
                    continue
            world = cell_world(exp_cfg.world, n, spec.side_length, spec.num_obstacles)
            jobs = [
                (method, world, exp_cfg.model, exp_cfg.eval, params, spec.seed_base + k)
                for k in range(spec.episodes)
            ]
            row = aggregate(method, world, _run_jobs(jobs, workers))
            rows.append(row)
            logger.info(
                f"{method} N={n}: safe {row['safe']:.3f} reach {row['reach']:.3f} "
                f"succ {row['succ']:.3f} cost {row['cost_mean']:.3f}"
            )
    return rows


def evaluate(exp_cfg, checkpoint=None, method: str = "learned", episodes: int | None = None,
             workers: int = 1, log_dir=None, dump_graphs_path=None) -> dict:
    """In-distribution evaluation on the configured world; optionally logs every episode."""
    model = build_model(exp_cfg.model)
    params = _load_params(checkpoint) if method in LEARNED_METHODS else None
    episodes = episodes or exp_cfg.eval.episodes
    seeds = [exp_cfg.eval.seed_base + k for k in range(episodes)]

    if log_dir is None and dump_graphs_path is None:
        jobs = [(method, exp_cfg.world, exp_cfg.model, exp_cfg.eval, params, s) for s in seeds]
        results = _run_jobs(jobs, workers)
    else:
        policy = build_policy(method, model, exp_cfg.world, params, NominalGains.from_config(exp_cfg.model), exp_cfg.eval)
        results = []
        graphs = [] if dump_graphs_path is not None else None
        for k, s in enumerate(seeds):
            log_path = Path(log_dir) / f"{method}_seed{s}.jsonl" if log_dir is not None else None
            metrics, _ = run_episode(
                policy, exp_cfg.world, model, s, log_path=log_path, graphs=graphs if k == 0 else None
            )
            results.append(metrics.to_json())
        if graphs is not None:
            dump_graphs(dump_graphs_path, graphs)
            logger.info(f"Wrote {len(graphs)} graph snapshots to {dump_graphs_path}")
    return aggregate(method, exp_cfg.world, results)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_results(rows: list[dict], output_dir, name: str = "results") -> tuple[Path, Path]:
    """CSV with a fixed header plus a JSON mirror."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    csv_path = output_dir / f"{name}.csv"
    json_path = output_dir / f"{name}.json"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in RESULT_FIELDS])
    json_path.write_text(json.dumps(rows, indent=2, sort_keys=True))
    logger.info(f"Wrote {len(rows)} result rows to {csv_path}")
    return csv_path, json_path


def plot_safety(rows: list[dict], path, num_obstacles: int | None = None) -> Path:
    """Safety rate against swarm size, one line per method, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in dict.fromkeys(r["method"] for r in rows):
        pts = sorted((r["N"], r["safe"]) for r in rows if r["method"] == method)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("number of agents N")
    ax.set_ylabel("safety rate")
    ax.set_ylim(0.0, 1.05)
    title = "Zero-shot safety vs swarm size"
    if num_obstacles:
        title += f" ({num_obstacles} obstacles)"
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path

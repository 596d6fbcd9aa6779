"""
Property suites run on demand by ``egcbf check``.

Each suite returns a list of ``CheckResult``; ``run_checks`` bundles them into a
machine-readable report. Tolerances are absolute unless stated otherwise.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import expm

from egcbf.config import ModelConfig, NetConfig, TrainConfig
from egcbf.models.dynamics import build_model
from egcbf.models.graph import all_subgraphs, load_graphs, permute_agents, transform_graph
from egcbf.models.liegroup import (
    P_SLICE,
    R_SLICE,
    V_SLICE,
    W_SLICE,
    act_states,
    compose,
    identity,
    inverse,
    random_element,
    skew,
)
from egcbf.models.world import WorldConfig, sample_episode, transform_episode
from egcbf.services.autodiff import finite_difference_check, relative_error
from egcbf.services.egformer import LearnedBarrier, NetSpec, forward_cbf, init_params, policy_controls
from egcbf.services.learner import Dataset, Label, LossWeights, Snapshot, batch_references, loss, sample_batch
from egcbf.services.policies import snapshot_graph
from egcbf.services.qp_solver import QPProblem, QPStatus, kkt_residuals, solve_qp
from egcbf.services.safety import ClassK, NearestPairBarrier, cbf_constraint_value, qp_controls
from utils.logger_config import get_logger

logger = get_logger(__name__)

SUITES = ("group", "dynamics", "equivariance", "gradients", "qp", "constraint")
# alternative names accepted by run_checks and the CLI
SUITE_ALIASES = {"lemma2": "constraint"}
SYSTEMS = ("quadrotor", "double_integrator")

CHECK_WORLD = WorldConfig(
    side_length=1.5,
    num_agents=4,
    num_obstacles=2,
    safety_radius=0.05,
    sensing_range=0.5,
    comm_range=1.0,
    lidar_rays=8,
)
CHECK_NET = NetConfig(d_model=16, d_ff=32, layers=2, head_hidden=16)


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    max_error: float
    tolerance: float
    cases: int
    detail: str = ""

    def to_json(self):
        return asdict(self)


def _result(suite, name, errors, tol, detail="", invert=False) -> CheckResult:
    worst = float(max(errors)) if len(errors) else 0.0
    passed = worst > tol if invert else worst < tol
    if not passed:
        logger.error(f"check {suite}/{name} failed: max error {worst:.3g} (tolerance {tol:.1g})")
    return CheckResult(suite, name, passed, worst, tol, len(errors), detail)


def _model(system: str):
    return build_model(ModelConfig(system=system))


def random_scene(system: str, rng: np.random.Generator, world: WorldConfig = CHECK_WORLD):
    """A sampled episode with random tilt, velocities and body rates."""
    episode = sample_episode(world, random_yaw=True, seed=int(rng.integers(0, 2**31 - 1)))
    S = episode.states
    n = S.shape[0]
    S[:, V_SLICE] = rng.normal(scale=0.5, size=(n, 3))
    if system == "quadrotor":
        for i in range(n):
            tilt = expm(skew(np.array([*rng.normal(scale=0.2, size=2), 0.0])))
            S[i, R_SLICE] = (S[i, R_SLICE].reshape(3, 3) @ tilt).reshape(9)
        S[:, W_SLICE] = rng.normal(scale=0.5, size=(n, 3))
    return episode


def _random_controls(model, n, rng, scale: float = 1.0):
    """Uniform controls in the box shrunk by ``scale`` about its centre."""
    lo, hi = model.control_bounds()
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * scale
    return rng.uniform(mid - half, mid + half, size=(n, model.control_dim))


def _params(model, rng, trunk="equivariant"):
    spec = NetSpec.from_configs(CHECK_NET.model_copy(update={"trunk": trunk}), model)
    return init_params(spec, int(rng.integers(0, 2**31 - 1)))


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def check_group(rng, cases: int = 100) -> list[CheckResult]:
    assoc, ident, inv, hom, action = [], [], [], [], []
    S = rng.normal(size=(8, 18))
    for _ in range(cases):
        a, b, c = (random_element(rng) for _ in range(3))
        lhs, rhs = compose(compose(a, b), c), compose(a, compose(b, c))
        assoc.append(np.max(np.abs(lhs.matrix() - rhs.matrix())))
        ident.append(np.max(np.abs(compose(identity(), a).matrix() - a.matrix())))
        inv.append(np.max(np.abs(compose(a, inverse(a)).matrix() - np.eye(4))))
        hom.append(np.max(np.abs(compose(a, b).matrix() - a.matrix() @ b.matrix())))
        action.append(np.max(np.abs(act_states(compose(a, b), S) - act_states(a, act_states(b, S)))))
    return [
        _result("group", "associativity", assoc, 1e-12),
        _result("group", "identity", ident, 1e-12),
        _result("group", "inverse", inv, 1e-12),
        _result("group", "matrix_homomorphism", hom, 1e-12),
        _result("group", "action_composition", action, 1e-11),
    ]


# full-range torques spin the body at hundreds of rad/s; 0.01 s keeps RK4 stable
CHECK_DT = 0.01


def check_dynamics(rng, cases: int = 100, steps: int = 50) -> list[CheckResult]:
    """Step-then-transform against transform-then-step over ``steps`` steps."""
    out = []
    for system in SYSTEMS:
        model = build_model(ModelConfig(system=system, dt=CHECK_DT))
        episode = random_scene(system, rng, CHECK_WORLD.model_copy(update={"num_agents": 1, "num_obstacles": 0}))
        base = episode.states[0]
        X = np.repeat(base[None], cases, axis=0)
        X[:, V_SLICE] = rng.normal(scale=0.5, size=(cases, 3))
        if system == "quadrotor":
            X[:, W_SLICE] = rng.normal(scale=0.5, size=(cases, 3))
        U = _random_controls(model, cases, rng)
        gs = [random_element(rng) for _ in range(cases)]

        A = X.copy()
        B = np.stack([act_states(g, x[None])[0] for g, x in zip(gs, X)])
        UB = np.stack([model.act_controls(g, u[None])[0] for g, u in zip(gs, U)])
        for _ in range(steps):
            A = model.step_batch(A, U)
            B = model.step_batch(B, UB)
        moved = np.stack([act_states(g, a[None])[0] for g, a in zip(gs, A)])
        p_err = np.max(np.abs(moved[:, P_SLICE] - B[:, P_SLICE]), axis=1)
        v_err = np.max(np.abs(moved[:, V_SLICE] - B[:, V_SLICE]), axis=1)
        r_err = np.linalg.norm(moved[:, R_SLICE] - B[:, R_SLICE], axis=1)
        out += [
            _result("dynamics", f"{system}_rollout_position", p_err, 1e-7),
            _result("dynamics", f"{system}_rollout_velocity", v_err, 1e-7),
            _result("dynamics", f"{system}_rollout_attitude", r_err, 1e-8, detail="Frobenius norm"),
        ]
    return out


def _equivariance_errors(params, model, graph, moved_graph, g):
    U = policy_controls(params, graph)
    U_moved = policy_controls(params, moved_graph)
    u_err = float(np.max(np.abs(U_moved - model.act_controls(g, U))))
    h = np.array([forward_cbf(params, sg) for sg in all_subgraphs(graph)])
    h_moved = np.array([forward_cbf(params, sg) for sg in all_subgraphs(moved_graph)])
    return u_err, float(np.max(np.abs(h_moved - h)))


def check_equivariance(rng, cases: int = 100, graph_path=None) -> list[CheckResult]:
    out = []
    for system in SYSTEMS:
        model = _model(system)
        pol, cbf, perm_err, raw_pol = [], [], [], []
        for _ in range(cases):
            params = _params(model, rng)
            episode = random_scene(system, rng)
            g = random_element(rng)
            graph = snapshot_graph(episode, CHECK_WORLD)
            moved = snapshot_graph(transform_episode(g, episode), CHECK_WORLD)
            u_err, h_err = _equivariance_errors(params, model, graph, moved, g)
            pol.append(u_err)
            cbf.append(h_err)

            perm = rng.permutation(episode.num_agents)
            permuted = snapshot_graph(permute_agents(episode, perm), CHECK_WORLD)
            perm_err.append(
                float(np.max(np.abs(policy_controls(params, permuted) - policy_controls(params, graph)[perm])))
            )
        # the raw-feature ablation must fail the same audit
        for _ in range(min(cases, 10)):
            params = _params(model, rng, trunk="raw")
            episode = random_scene(system, rng)
            g = random_element(rng)
            graph = snapshot_graph(episode, CHECK_WORLD)
            moved = snapshot_graph(transform_episode(g, episode), CHECK_WORLD)
            raw_pol.append(max(_equivariance_errors(params, model, graph, moved, g)))

        out += [
            _result("equivariance", f"{system}_policy", pol, 1e-8),
            _result("equivariance", f"{system}_cbf", cbf, 1e-8),
            _result("equivariance", f"{system}_permutation", perm_err, 1e-10),
            _result(
                "equivariance",
                f"{system}_raw_trunk_detected",
                [np.median(raw_pol)] if raw_pol else [],
                1e-6,
                detail="median error of the uncanonicalised ablation must exceed the tolerance",
                invert=True,
            ),
        ]

    if graph_path is not None:
        graphs = load_graphs(graph_path)
        errors = []
        for graph in graphs:
            model = _model("quadrotor")
            params = _params(model, rng)
            g = random_element(rng)
            errors.append(max(_equivariance_errors(params, model, graph, transform_graph(g, graph), g)))
        out.append(_result("equivariance", "recorded_graphs", errors, 1e-8, detail=str(graph_path)))
    return out


def _op_cases(rng):
    mask = rng.random((5, 5)) < 0.5
    np.fill_diagonal(mask, True)
    return {
        "matmul": (lambda t, a, b: t.sum(a @ b), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "add_bias": (lambda t, a, b: t.sum(t.tanh(t.add(a, b))), [rng.normal(size=(3, 4)), rng.normal(size=4)]),
        "mul_div": (lambda t, a, b: t.sum(t.div(t.mul(a, b), t.shift(t.mul(b, b), 1.0))), [rng.normal(size=6), rng.normal(size=6)]),
        "relu": (lambda t, a: t.sum(t.relu(a) * a), [rng.normal(size=7) + 0.05]),
        "sqrt": (lambda t, a: t.sum(t.sqrt(t.shift(a * a, 0.5))), [rng.normal(size=5)]),
        "softmax": (lambda t, a, b: t.sum(t.softmax(a, mask) @ b), [rng.normal(size=(5, 5)), rng.normal(size=(5, 2))]),
        "sum_axis": (lambda t, a: t.norm(t.sum(a, axis=0)), [rng.normal(size=(4, 3))]),
        "mean": (lambda t, a: t.mean(t.tanh(a)), [rng.normal(size=(2, 3))]),
        "norm": (lambda t, a: t.norm(a), [rng.normal(size=(3, 3))]),
        "concat_slice": (lambda t, a, b: t.sum(t.concat([a, b])[1:4] * 2.0), [rng.normal(size=3), rng.normal(size=3)]),
        "transpose_reshape": (lambda t, a: t.sum(t.reshape(a.T, (6,)) * np.arange(6.0)), [rng.normal(size=(2, 3))]),
        "batched_matvec": (lambda t, B, U: t.norm(t.batched_matvec(B, U)), [rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 2))]),
        "stack_rows": (lambda t, a, b: t.sum(t.tanh(t.stack_rows([a, b]))), [rng.normal(size=3), rng.normal(size=3)]),
    }


def check_gradients(rng, samples: int = 20) -> list[CheckResult]:
    out = []
    errors = []
    for name, (fn, inputs) in _op_cases(rng).items():
        errors.append(finite_difference_check(fn, inputs, samples=samples, rng=rng))
    out.append(_result("gradients", "ops", errors, 1e-4))

    out.append(_result("gradients", "loss", [loss_gradient_error(rng, samples)], 1e-3))
    return out


def loss_gradient_error(rng, samples: int = 20, system: str = "double_integrator", h: float = 1e-6) -> float:
    """Worst relative error of the full loss gradient against central differences."""
    model = _model(system)
    params = _params(model, rng)
    episode = random_scene(system, rng)
    graph = snapshot_graph(episode, CHECK_WORLD)
    n = episode.num_agents
    labels = tuple(Label.SAFE if k % 2 == 0 else Label.UNSAFE for k in range(n))
    snapshot = Snapshot(
        graph=graph,
        targets=episode.targets,
        controls=_random_controls(model, n, rng),
        labels=labels,
        obstacle_centers=episode.obstacle_centers,
        obstacle_radii=episode.obstacle_radii,
    )
    batch = sample_batch(Dataset([snapshot]), n, rng)
    train_cfg = TrainConfig(reference="nominal", derivative_controls="all")
    weights = LossWeights(eta_c=1.0, eta_d=0.2, gamma=0.02, alpha=ClassK(1.0))
    refs = batch_references(params, batch, model, train_cfg)
    report = loss(params, batch, weights, model, train_cfg, references=refs)

    coords = [(name, idx) for name in params.names() for idx in np.ndindex(params[name].shape)]
    pick = rng.choice(len(coords), size=min(samples, len(coords)), replace=False)
    worst = 0.0
    for k in pick:
        name, idx = coords[k]
        plus, minus = params.copy(), params.copy()
        plus.arrays[name][idx] += h
        minus.arrays[name][idx] -= h
        numeric = (
            loss(plus, batch, weights, model, train_cfg, references=refs).total
            - loss(minus, batch, weights, model, train_cfg, references=refs).total
        ) / (2.0 * h)
        exact = report.grads[name][idx]
        worst = max(worst, relative_error(exact, numeric))
    return worst


def _grid_optimum(problem: QPProblem, step: float):
    axes = [np.arange(lo, hi + 0.5 * step, step) for lo, hi in zip(problem.lo, problem.hi)]
    grid = np.array(list(itertools.product(*axes)))
    feasible = np.all(grid @ problem.C.T >= problem.b, axis=1)
    if not feasible.any():
        return None
    cand = grid[feasible]
    obj = 0.5 * np.sum((cand - problem.u_nom) ** 2, axis=1)
    return cand[int(np.argmin(obj))]


def check_qp(rng, cases: int = 100) -> list[CheckResult]:
    kkt, analytic, grid_gap, grid_dist = [], [], [], []
    for _ in range(cases):
        n, m = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        C = rng.normal(size=(m, n))
        x0 = rng.uniform(-0.5, 0.5, n)
        b = C @ x0 - rng.uniform(0.0, 0.5, m)
        problem = QPProblem(u_nom=rng.normal(scale=2.0, size=n), C=C, b=b, lo=-np.ones(n), hi=np.ones(n))
        res = solve_qp(problem)
        if res.status == QPStatus.SOLVED:
            kkt.append(max(kkt_residuals(problem, res.u, res.y).values()))
        else:
            kkt.append(math.inf)

        c = rng.normal(size=n)
        u_nom = rng.normal(size=n)
        rhs = float(c @ u_nom) + rng.uniform(0.1, 1.0)
        single = QPProblem(u_nom=u_nom, C=c[None], b=[rhs], lo=-1e3 * np.ones(n), hi=1e3 * np.ones(n))
        expected = u_nom + (rhs - c @ u_nom) / (c @ c) * c
        analytic.append(float(np.max(np.abs(solve_qp(single).u - expected))))

    step = 0.1
    for _ in range(max(1, cases // 20)):
        # two agents with planar controls coupled by shared constraint rows
        C = rng.normal(size=(2, 4))
        b = C @ rng.uniform(-0.5, 0.5, 4) - rng.uniform(0.0, 0.3, 2)
        problem = QPProblem(u_nom=rng.normal(size=4), C=C, b=b, lo=-np.ones(4), hi=np.ones(4))
        best = _grid_optimum(problem, step)
        if best is None:
            continue
        res = solve_qp(problem)
        # no grid point may beat the solver, and the best one lies within a few cells of it
        grid_gap.append(max(0.0, problem.objective(res.u) - problem.objective(best)))
        grid_dist.append(float(np.max(np.abs(best - res.u))))

    # pi_QP of a moved scene against the moved pi_QP; references up to 1.5x the limit keep the box active
    model = _model("double_integrator")
    barrier = NearestPairBarrier(radius=2.0 * CHECK_WORLD.safety_radius)
    equiv = []
    for _ in range(max(1, cases // 10)):
        episode = random_scene("double_integrator", rng)
        u_nom = rng.uniform(-1.5, 1.5, size=(episode.num_agents, 3)) * model.params.accel_limit
        g = random_element(rng)
        U, res = qp_controls(barrier, snapshot_graph(episode, CHECK_WORLD), model, u_nom)
        moved = snapshot_graph(transform_episode(g, episode), CHECK_WORLD)
        U_g, res_g = qp_controls(barrier, moved, model, model.act_controls(g, u_nom))
        if res.ok and res_g.ok:
            equiv.append(float(np.max(np.abs(U_g - model.act_controls(g, U)))))
    return [
        _result("qp", "kkt_residuals", kkt, 1e-6),
        _result("qp", "single_constraint_projection", analytic, 1e-6),
        _result("qp", "grid_search_objective", grid_gap, 1e-6, detail=f"grid step {step}"),
        _result("qp", "grid_search_distance", grid_dist, 3.0 * step, detail=f"grid step {step}"),
        _result("qp", "cbf_qp_equivariance", equiv, 1e-5, detail="double integrator, heading-frame box"),
    ]


def check_constraint_invariance(rng, cases: int = 100) -> list[CheckResult]:
    """The CBF constraint value is unchanged when scene and controls move together."""
    out = []
    for system in SYSTEMS:
        model = _model(system)
        errors = []
        for _ in range(cases):
            barrier = LearnedBarrier(_params(model, rng))
            episode = random_scene(system, rng)
            U = _random_controls(model, episode.num_agents, rng)
            g = random_element(rng)
            graph = snapshot_graph(episode, CHECK_WORLD)
            moved = snapshot_graph(transform_episode(g, episode), CHECK_WORLD)
            a = cbf_constraint_value(barrier, graph, U, model)
            b = cbf_constraint_value(barrier, moved, model.act_controls(g, U), model)
            errors.append(float(np.max(np.abs(a - b))))
        out.append(_result("constraint", f"{system}_constraint_invariance", errors, 1e-6))
    return out


def run_checks(what="all", cases: int = 100, seed: int = 0, graph_path=None) -> dict:
    """Run one suite (or ``all``) and return {"passed": bool, "checks": [...]}."""
    what = SUITE_ALIASES.get(what, what)
    suites = SUITES if what == "all" else (what,)
    unknown = [s for s in suites if s not in SUITES]
    if unknown:
        raise ValueError(f"unknown check {unknown[0]!r}; expected one of all, {', '.join(SUITES)}")
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    for suite in suites:
        logger.info(f"Running check suite {suite}")
        if suite == "group":
            results += check_group(rng, cases)
        elif suite == "dynamics":
            results += check_dynamics(rng, cases)
        elif suite == "equivariance":
            results += check_equivariance(rng, cases, graph_path)
        elif suite == "gradients":
            results += check_gradients(rng)
        elif suite == "qp":
            results += check_qp(rng, cases)
        elif suite == "constraint":
            results += check_constraint_invariance(rng, cases)
    return {"passed": all(r.passed for r in results), "checks": [r.to_json() for r in results]}

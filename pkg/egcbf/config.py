import hashlib
import json
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator

from egcbf.models.world import WorldConfig
from utils.logger_config import get_logger

logger = get_logger(__name__)

env_path = Path(__file__).parent.parent / ".env"
if env_path.exists():
    load_dotenv(dotenv_path=env_path)

DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "configs" / "experiment.toml"


def get_setting(name, default=None):
    env_value = os.getenv(name)
    if env_value:
        return env_value
    return default


class Config:
    """Process-level settings (environment / .env)."""

    LOG_LEVEL = get_setting("EGCBF_LOG_LEVEL", default="INFO")
    CONFIG_PATH = get_setting("EGCBF_CONFIG", default=str(DEFAULT_CONFIG_PATH))
    OUTPUT_DIR = get_setting("EGCBF_OUTPUT_DIR", default="runs")
    WORKERS = int(get_setting("EGCBF_WORKERS", default="1"))

    # Debug Mode: eager NaN detection on every autodiff op
    DEBUG_MODE = get_setting("EGCBF_DEBUG", default="false").lower() in (
        "true",
        "1",
        "yes",
    )

    @classmethod
    def validate(cls):
        invalid = []
        if cls.WORKERS < 1:
            invalid.append("EGCBF_WORKERS")
        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            invalid.append("EGCBF_LOG_LEVEL")
        if invalid:
            raise RuntimeError(f"Invalid settings: {', '.join(invalid)}")


# ---------------------------------------------------------------------------
# Experiment file sections
# ---------------------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    system: Literal["quadrotor", "double_integrator"] = "quadrotor"
    mass: float = Field(0.1, gt=0)
    inertia: tuple[float, float, float] = (1.5e-4, 1.5e-4, 3e-4)
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    dt: float = Field(0.03, gt=0)
    torque_limit: float = Field(0.1, gt=0)
    thrust_max_factor: float = Field(2.0, gt=1.0)
    accel_limit: float = Field(2.0, gt=0)
    # nominal controller gains
    kp: float = Field(1.0, gt=0)
    kd: float = Field(1.6, gt=0)
    k_rot: float = Field(0.015, gt=0)
    k_omega: float = Field(0.0024, gt=0)
    yaw_mode: Literal["hold", "velocity"] = "hold"

    @field_validator("inertia")
    @classmethod
    def _positive_inertia(cls, value):
        if min(value) <= 0:
            raise ValueError("inertia must be positive definite")
        return value


class NetConfig(_Section):
    d_model: int = Field(64, ge=1)
    d_ff: int = Field(128, ge=1)
    layers: int = Field(2, ge=0)
    head_hidden: int = Field(64, ge=1)
    trunk: Literal["equivariant", "relative", "raw"] = "equivariant"
    init_seed: int = 0


class TrainConfig(_Section):
    iterations: int = Field(300, ge=0)
    collect_every: int = Field(10, ge=1)
    collect_steps: int = Field(256, ge=1)
    # episodes per collection round; workers only run them in parallel
    collect_episodes: int = Field(1, ge=1)
    batch_size: int = Field(256, ge=1)
    label_horizon: int = Field(32, ge=0)
    exploration_prob: float = Field(0.3, ge=0, le=1)
    # every stride-th exploration snapshot is labelled by an explicit policy unroll
    explore_label_stride: int = Field(1, ge=1)
    lr_cbf: float = Field(1e-4, gt=0)
    lr_policy: float = Field(1e-5, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    eta_c: float = Field(1.0, ge=0)
    eta_d: float = Field(0.2, ge=0)
    gamma: float = Field(0.02, ge=0)
    alpha_slope: float = Field(1.0, gt=0)
    reference: Literal["qp", "nominal"] = "qp"
    derivative_controls: Literal["ego", "all"] = "ego"
    use_unlabeled: bool = False
    eval_every: int = Field(10, ge=1)
    eval_episodes: int = Field(4, ge=1)
    qp_rho: float = Field(0.1, gt=0)
    qp_max_iter: int = Field(10_000, ge=1)
    qp_eps: float = Field(1e-7, gt=0)
    seed: int = 0


class EvalConfig(_Section):
    episodes: int = Field(50, ge=1)
    swarm_sizes: tuple[int, ...] = (8, 16, 32)
    side_length: float = Field(4.0, gt=0)
    num_obstacles: int = Field(0, ge=0)
    methods: tuple[Literal["learned", "learned_qp", "ccbf", "dcbf", "nominal"], ...] = (
        "learned",
        "ccbf",
        "dcbf",
        "nominal",
    )
    seed_base: int = 1000
    plot: bool = True
    baseline_velocity_gain: float = Field(0.5, ge=0)
    baseline_margin: float = Field(0.2, ge=0)
    baseline_max_agents: int = Field(16, ge=1)


class ExperimentConfig(_Section):
    world: WorldConfig = WorldConfig()
    model: ModelConfig = ModelConfig()
    net: NetConfig = NetConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    def to_dict(self):
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_updates(self, section: str, **updates):
        """Copy with fields of one section replaced (re-validated)."""
        data = self.to_dict()
        data[section].update(updates)
        return ExperimentConfig.model_validate(data)


def _parse_override(item: str):
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ValueError(f"Override must look like section.key=value, got {item!r}")
    path, raw = item.split("=", 1)
    section, key = path.split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return section, key, value


def load_experiment_config(path=None, overrides=()) -> ExperimentConfig:
    """Read the TOML experiment file and apply ``section.key=value`` overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Experiment config not found: {path}")
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        logger.info(f"Loaded experiment config from {path}")

    for item in overrides:
        section, key, value = _parse_override(item)
        data.setdefault(section, {})[key] = value
        logger.debug(f"Override {section}.{key} = {value!r}")

    return ExperimentConfig.model_validate(data)

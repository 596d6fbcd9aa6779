from dataclasses import dataclass
from pathlib import Path

from egcbf.config import Config


@dataclass
class Runtime:
    """What a command needs: validated experiment config, output location and worker count."""

    config: object
    output_dir: Path
    workers: int = 1
    settings: type = Config


def create_app(config_path=None, overrides=(), config_class=Config, output_dir=None, workers=None) -> Runtime:
    """
    Factory for a configured runtime.
    Sets up logging, validates process settings and loads the experiment file.
    """
    from utils.logger_config import get_logger, setup_logging

    setup_logging(config_class.LOG_LEVEL if not config_class.DEBUG_MODE else "DEBUG")
    config_class.validate()
    logger = get_logger(__name__)

    from egcbf.config import load_experiment_config
    from egcbf.models.world import density_warnings

    if config_path is None and Path(config_class.CONFIG_PATH).exists():
        config_path = config_class.CONFIG_PATH
    experiment = load_experiment_config(config_path, overrides)
    for message in density_warnings(experiment.world):
        logger.warning(f"Dense world configuration: {message}")

    runtime = Runtime(
        config=experiment,
        output_dir=Path(output_dir or config_class.OUTPUT_DIR),
        workers=int(workers or config_class.WORKERS),
        settings=config_class,
    )
    logger.info(
        f"Runtime ready: system={experiment.model.system}, trunk={experiment.net.trunk}, "
        f"output={runtime.output_dir}, workers={runtime.workers}"
    )
    return runtime

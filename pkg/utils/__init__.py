# Shared helpers for the library and the CLI
from .logger_config import get_logger, setup_logging
from .run_manifest import build_id, write_manifest

__all__ = ["setup_logging", "get_logger", "build_id", "write_manifest"]

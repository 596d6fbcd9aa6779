"""
Run manifest written next to every output directory: config hash, seed, a
git-style build id of the package sources, the command line and a timestamp.
"""

import datetime
import hashlib
import json
from pathlib import Path

from utils.logger_config import get_logger

logger = get_logger(__name__)

REPO_ROOT = Path(__file__).resolve().parent.parent
SOURCE_DIRS = ("egcbf", "utils")


def build_id(root: Path = REPO_ROOT) -> str:
    """SHA-1 over git blob hashes of the package sources, in path order."""
    outer = hashlib.sha1()
    for directory in SOURCE_DIRS:
        for path in sorted((root / directory).rglob("*.py")):
            data = path.read_bytes()
            blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
            outer.update(f"{path.relative_to(root).as_posix()} {blob}\n".encode("utf-8"))
    return outer.hexdigest()


def write_manifest(output_dir, config, command, seed=None, extra=None) -> Path:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_hash": config.config_hash(),
        "seed": seed if seed is not None else config.train.seed,
        "build_id": build_id(),
        "command": command,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": config.to_dict(),
    }
    if extra:
        manifest.update(extra)
    path = output_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.debug(f"Wrote run manifest {path}")
    return path

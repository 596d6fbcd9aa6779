"""
Binary checkpoint files for network parameters and optimiser state.

Layout (all integers little-endian):

    b"EGCBFCKP"                    magic
    uint32   format version (1)
    uint64   header length, then UTF-8 JSON header (spec, metadata)
    uint32   array count
    per array:
        uint32 name length, UTF-8 name
        uint32 ndim, uint64 x ndim shape
        float64 '<f8' data, C order
"""

import json
import struct
from pathlib import Path

import numpy as np

from egcbf.exceptions import CheckpointError
from egcbf.services.egformer import NetParams, NetSpec
from utils.logger_config import get_logger

logger = get_logger(__name__)

MAGIC = b"EGCBFCKP"
FORMAT_VERSION = 1


def _write_arrays(fh, arrays: dict):
    fh.write(struct.pack("<I", len(arrays)))
    for name, value in arrays.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", value.ndim))
        fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        fh.write(value.tobytes(order="C"))


def _read_exact(fh, size, path):
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint {path}")
    return data


def save_checkpoint(path, params: NetParams, metadata=None, extra_arrays=None) -> Path:
    """Write parameters plus optional extra arrays (e.g. Adam moments)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"spec": params.spec.to_json(), "metadata": metadata or {}}
    arrays = dict(params.arrays)
    for name, value in (extra_arrays or {}).items():
        if name in arrays:
            raise CheckpointError(f"extra array {name!r} collides with a parameter name")
        arrays[name] = value
    header["parameter_names"] = list(params.arrays)

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        encoded = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        _write_arrays(fh, arrays)
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path} ({params.num_parameters} parameters)")
    return path


def load_checkpoint(path):
    """Returns (NetParams, metadata, extra arrays)."""
    path = Path(path)
    if not path.exists():
        logger.error(f"Checkpoint not found: {path}")
        raise CheckpointError(f"checkpoint not found: {path}")

    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), path) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != FORMAT_VERSION:
            logger.error(f"Checkpoint {path} has version {version}, expected {FORMAT_VERSION}")
            raise CheckpointError(
                f"incompatible checkpoint version {version} (expected {FORMAT_VERSION})"
            )
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, path))
        try:
            header = json.loads(_read_exact(fh, header_len, path).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header in {path}") from e

        (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, path))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 8 * size, path), dtype="<f8")
            arrays[name] = data.reshape(shape).astype(np.float64)
        if fh.read(1):
            raise CheckpointError(f"trailing bytes in checkpoint {path}")

    try:
        spec = NetSpec(**header["spec"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint {path} has an invalid network spec") from e
    names = header.get("parameter_names", [])
    missing = [k for k in names if k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing arrays: {', '.join(missing[:5])}")
    params = NetParams(spec, {k: arrays.pop(k) for k in names})
    logger.info(f"Loaded checkpoint {path} ({params.num_parameters} parameters)")
    return params, header.get("metadata", {}), arrays

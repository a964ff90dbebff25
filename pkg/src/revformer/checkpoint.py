"""Bit-exact checkpoint files.

Layout (all integers little-endian)::

    magic      4 bytes  b"RVT1"
    version    u32
    config     u32 length + UTF-8 JSON (model section echo and run metadata)
    step       u64
    rng        u64 base seed; every stochastic draw derives from (seed, step, block, role)
    count      u32 number of tensors
    tensor*    u16 name length, UTF-8 name, u8 dtype code, u8 ndim, u32 * ndim shape,
               little-endian payload

Model parameters are stored under their module paths; optimiser buffers under
``optim.m/<path>`` and ``optim.v/<path>``.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

from revformer.exceptions import ConfigError
from revformer.kernels import Tensor
from revformer.layers import Module
from revformer.optim import Optimizer
from revformer.utils import convert_numpy_to_python, ensure_dir

logger = logging.getLogger(__name__)

MAGIC = b"RVT1"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {dt.str: code for code, dt in _DTYPES.items()}


@dataclass
class Checkpoint:
    config: dict[str, Any]
    step: int
    seed: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def model_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}


def _write_tensor(f: BinaryIO, name: str, t: Tensor) -> None:
    le = np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<"))
    code = _CODES.get(le.dtype.str)
    if code is None:
        raise ConfigError(f"cannot store tensor {name!r} of dtype {t.dtype}")
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<BB", code, le.ndim))
    f.write(struct.pack(f"<{le.ndim}I", *le.shape))
    f.write(le.tobytes())


def _read(f: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    data = f.read(size)
    if len(data) != size:
        raise ConfigError("checkpoint truncated")
    return struct.unpack(fmt, data)


def _read_tensor(f: BinaryIO) -> tuple[str, Tensor]:
    (n,) = _read(f, "<H")
    name = f.read(n).decode("utf-8")
    code, ndim = _read(f, "<BB")
    if code not in _DTYPES:
        raise ConfigError(f"tensor {name!r}: unknown dtype code {code}")
    shape = _read(f, f"<{ndim}I") if ndim else ()
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    payload = f.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ConfigError(f"tensor {name!r} truncated")
    return name, np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    ensure_dir(path.parent)
    config = json.dumps(convert_numpy_to_python(ckpt.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(config)))
        f.write(config)
        f.write(struct.pack("<QQ", ckpt.step, ckpt.seed))
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name, t in ckpt.tensors.items():
            _write_tensor(f, name, t)
    return path


def read_checkpoint(path: Path) -> Checkpoint:
    """Raises ``ConfigError`` on a foreign, newer or truncated file."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ConfigError(f"{path} is not a revformer checkpoint")
        (version,) = _read(f, "<I")
        if version > VERSION:
            raise ConfigError(f"{path}: checkpoint version {version} is newer than {VERSION}")
        (n,) = _read(f, "<I")
        config = json.loads(f.read(n).decode("utf-8"))
        step, seed = _read(f, "<QQ")
        (count,) = _read(f, "<I")
        tensors = dict(_read_tensor(f) for _ in range(count))
    return Checkpoint(config=config, step=step, seed=seed, tensors=tensors)


def save(
    path: Path,
    model: Module,
    step: int,
    seed: int,
    config: dict[str, Any],
    optimizer: Optimizer | None = None,
) -> Path:
    """Write parameters (and optimiser buffers) after ``step`` completed steps."""
    tensors = {name: p.value for name, p in model.named_parameters()}
    if optimizer is not None:
        tensors.update(optimizer.state_dict())
    logger.info(f"Saving checkpoint at step {step} to {path}")
    return write_checkpoint(path, Checkpoint(config=config, step=step, seed=seed, tensors=tensors))


def restore(ckpt: Checkpoint, model: Module, optimizer: Optimizer | None = None) -> None:
    """Copy stored tensors into ``model`` (and ``optimizer``) in place."""
    stored = ckpt.model_tensors()
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(stored))
    unexpected = sorted(set(stored) - set(params))
    if missing or unexpected:
        raise ConfigError(
            f"checkpoint does not match model: missing {missing}, unexpected {unexpected}"
        )
    for name, p in params.items():
        if stored[name].shape != p.value.shape or stored[name].dtype != p.value.dtype:
            raise ConfigError(
                f"{name}: stored {stored[name].dtype}{stored[name].shape}, "
                f"model {p.value.dtype}{p.value.shape}"
            )
        p.value[...] = stored[name]
    if optimizer is not None:
        optimizer.load_state_dict(ckpt.tensors, ckpt.step)

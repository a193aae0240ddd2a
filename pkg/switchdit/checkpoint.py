"""
Versioned binary checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then every array as little-endian float64 in header order. The header holds
the format string, the full TrainConfig, step, schedule parameters, optimizer
step count, the current assignment, the last stacked gate map and the build
version, plus the name/group/shape of every stored array.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .config import TrainConfig
from .errors import (
    CheckpointShapeError,
    CheckpointVersionError,
    CorruptCheckpointError,
    MissingCheckpointError,
)
from .export import build_version
from .matching import Assignment
from .network import SwitchDiT

logger = logging.getLogger(__name__)

MAGIC = b"SWDITCK\x00"
FORMAT = "switchdit-ckpt/1"
GROUPS = ("model", "ema", "optim.m", "optim.v")


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    model_state: Dict[str, np.ndarray]
    ema_state: Dict[str, np.ndarray]
    optim_state: dict
    assignment: Optional[Assignment]
    last_gate_map: Optional[np.ndarray]
    version: str
    schedule: dict

    def build_model(self, use_ema: bool = False) -> SwitchDiT:
        """A fresh network carrying the stored online (or EMA) parameters."""
        model = SwitchDiT(self.config.model, self.config.schedule.timesteps, seed=self.config.seed)
        model.load_state_dict(self.ema_state if use_ema else self.model_state)
        return model


def save_checkpoint(path: Path, trainer) -> Path:
    """Write the trainer's full state; returns the path."""
    arrays: List[Tuple[str, str, np.ndarray]] = []
    optim = trainer.optimizer.state_dict()
    for group, state in (
        ("model", trainer.model.state_dict()),
        ("ema", trainer.ema.state_dict()),
        ("optim.m", optim["m"]),
        ("optim.v", optim["v"]),
    ):
        arrays.extend((group, name, array) for name, array in state.items())

    header = {
        "format": FORMAT,
        "version": build_version(),
        "config": trainer.cfg.model_dump(mode="json"),
        "step": trainer.step,
        "schedule": {"timesteps": trainer.schedule.T, "cosine_s": trainer.schedule.s},
        "optim_t": optim["t"],
        "assignment": trainer.assignment.to_json() if trainer.assignment is not None else None,
        "last_gate_map": trainer.last_gate_map.tolist() if trainer.last_gate_map is not None else None,
        "tensors": [{"group": g, "name": n, "shape": list(a.shape)} for g, n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, _, array in arrays:
            f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    logger.info(f"Saved checkpoint at step {trainer.step} to {path}")
    return path


def _read_header(data: bytes, path: Path) -> Tuple[dict, int]:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path} is not a switchdit checkpoint (bad magic)")
    (length,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + length > len(data):
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict):
        raise CorruptCheckpointError(f"{path}: header is not an object")
    return header, start + length


def load_checkpoint(path: Path) -> Checkpoint:
    """Read and validate a checkpoint.

    Raises:
        MissingCheckpointError: no such file.
        CorruptCheckpointError: bad magic, unreadable header, truncated payload.
        CheckpointVersionError: written by another format version.
        CheckpointShapeError: arrays disagree with the stored config.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpointError(f"Checkpoint not found: {path}")
    data = path.read_bytes()
    header, offset = _read_header(data, path)
    found = header.get("format")
    if found != FORMAT:
        raise CheckpointVersionError(str(found), FORMAT)
    try:
        config = TrainConfig.model_validate(header["config"])
        entries = header["tensors"]
        step = int(header["step"])
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise CorruptCheckpointError(f"{path}: invalid header ({exc})") from None

    states: Dict[str, Dict[str, np.ndarray]] = {group: {} for group in GROUPS}
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise CorruptCheckpointError(f"{path}: truncated payload at {entry['group']}/{entry['name']}")
        array = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        states.setdefault(entry["group"], {})[entry["name"]] = array.astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise CorruptCheckpointError(f"{path}: {len(data) - offset} trailing bytes")

    expected = {
        name: p.shape
        for name, p in SwitchDiT(config.model, config.schedule.timesteps, seed=config.seed).named_parameters()
    }
    for group in GROUPS:
        got = {name: a.shape for name, a in states[group].items()}
        if got != expected:
            diff = sorted(set(got.items()) ^ set(expected.items()))[:3]
            raise CheckpointShapeError(f"{path}: {group} arrays do not match the stored config: {diff}")

    assignment = header.get("assignment")
    gate_map = header.get("last_gate_map")
    logger.info(f"Loaded checkpoint {path} (step {step}, {header.get('version')})")
    return Checkpoint(
        config=config,
        step=step,
        model_state=states["model"],
        ema_state=states["ema"],
        optim_state={"t": int(header.get("optim_t", 0)), "m": states["optim.m"], "v": states["optim.v"]},
        assignment=Assignment(assignment["perm"], assignment["cost"]) if assignment else None,
        last_gate_map=np.array(gate_map, dtype=np.int64) if gate_map is not None else None,
        version=str(header.get("version")),
        schedule=header.get("schedule", {}),
    )

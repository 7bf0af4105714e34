"""Checkpoint files and run configuration.

Checkpoint layout (all integers little-endian)::

    magic        4 bytes   b"PSCK"
    version      u32       FORMAT_VERSION
    meta_len     u64
    meta         meta_len bytes of UTF-8 JSON
    n_arrays     u32
    n_arrays times:
        name_len u16, name (UTF-8)
        ndim     u8,  shape (ndim x u64)
        data     prod(shape) float64 values, C order
    sha256       32 bytes over everything above

Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ChecksumError, ConfigError, ContractError, VersionMismatchError
from .space import CandidateSet, SearchSpace, toy_space
from .trainer import TrainConfig

MAGIC = b"PSCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict
    version: int = FORMAT_VERSION


def encode_checkpoint(arrays: dict[str, np.ndarray], meta: dict, version: int = FORMAT_VERSION) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", version))
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 32 + 8:
        raise ChecksumError("checkpoint is truncated")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (corrupt or truncated file)")
    if body[:4] != MAGIC:
        raise ChecksumError("not a checkpoint file")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    pos = 8
    (meta_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    meta = json.loads(body[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    return Checkpoint(arrays, meta, version)


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(arrays, meta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ------------------------------------------------------------------ config

_TOP_KEYS = {"seed", "space", "binning", "data", "train", "output", "analysis"}
_SPACE_KEYS = {"resource_name", "ops", "depth", "candidates", "unit_cost", "skippable"}
_OP_KEYS = {"name", "candidates", "unit_cost", "skippable"}
_DATA_KEYS = {"source", "train_fraction", "n_classes", "options"}


@dataclass
class RunConfig:
    space: SearchSpace
    train: TrainConfig
    data: dict
    seed: int = 0
    output: str | None = None
    analysis: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    def echo(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def _reject_unknown(section: str, raw: dict, allowed: set[str]) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section} must be a mapping")
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def space_from_dict(raw: dict) -> SearchSpace:
    _reject_unknown("space", raw, _SPACE_KEYS)
    name = raw.get("resource_name", "MACs")
    try:
        if "ops" in raw:
            if set(raw) & {"depth", "candidates", "unit_cost", "skippable"}:
                raise ConfigError("space: give either 'ops' or the depth/candidates shorthand, not both")
            ops = []
            for d, op in enumerate(raw["ops"]):
                _reject_unknown(f"space.ops[{d}]", op, _OP_KEYS)
                cands = op["candidates"]
                ops.append(CandidateSet(tuple(cands), np.asarray(op.get("unit_cost", 1.0), dtype=float),
                                        bool(op.get("skippable", False)), op.get("name", f"layer{d}")))
            return SearchSpace(tuple(ops), name)
        space = toy_space(int(raw.get("depth", 6)), tuple(raw.get("candidates", (8, 16, 24))),
                          float(raw.get("unit_cost", 1.0)), tuple(raw.get("skippable", ())))
        return SearchSpace(space.ops, name)
    except (ContractError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid search space: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    _reject_unknown("config", raw, _TOP_KEYS)
    seed = int(raw.get("seed", 0))
    space = space_from_dict(raw.get("space", {}))
    train_raw = dict(raw.get("train", {}))
    if "seed" in train_raw and "seed" in raw and int(train_raw["seed"]) != seed:
        raise ConfigError("seed given both at top level and in train with different values")
    train_raw["seed"] = int(train_raw.get("seed", seed))
    if "binning" in raw:
        _reject_unknown("binning", raw["binning"], {"lo", "hi", "step"})
        train_raw["binning"] = {k: float(v) for k, v in raw["binning"].items()}
    try:
        train = TrainConfig.from_dict(train_raw)
        binning = train.make_binning(space)
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from exc
    if binning.lo < space.min_resource - 1e-9 or binning.hi > space.max_resource + 1e-9:
        raise ConfigError(f"binning [{binning.lo}, {binning.hi}] exceeds the space's resource range "
                          f"[{space.min_resource}, {space.max_resource}]")
    data = dict(raw.get("data", {"source": "synthetic:multiblobs"}))
    _reject_unknown("data", data, _DATA_KEYS)
    data.setdefault("source", "synthetic:multiblobs")
    analysis = raw.get("analysis", {}) or {}
    if not isinstance(analysis, dict):
        raise ConfigError("analysis must be a mapping")
    return RunConfig(space, train, data, seed, raw.get("output"), analysis, raw)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def load_data(cfg: RunConfig):
    from .data import ingest

    data = cfg.data
    return ingest(data["source"], data.get("train_fraction", 0.8), cfg.seed, data.get("n_classes"),
                  **data.get("options", {}))

"""
Checkpoint container

Layout (little-endian):
    magic      4 bytes  b"RDRC"
    version    uint16
    length     uint32   size of the JSON manifest
    manifest   JSON     config, tensors (name/shape/offset/numel), step, val_loss
    payload    float32  tensors back to back in manifest order
    crc        uint32   CRC32 of every preceding byte
"""

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import orjson
import structlog
import torch

from ..config import ModelConfig
from ..exceptions import CheckpointError
from .model import RDRecModel

logger = structlog.get_logger()

MAGIC = b"RDRC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


@dataclass
class CheckpointMeta:
    config: Dict[str, Any]
    step: int = 0
    val_loss: Optional[float] = None
    epoch: Optional[int] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def _serialize(state: Dict[str, torch.Tensor], meta: CheckpointMeta) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, tensor in state.items():
        data = tensor.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
        tensors.append({"name": name, "shape": list(tensor.shape), "offset": offset, "numel": tensor.numel()})
        chunks.append(data)
        offset += len(data)
    manifest = orjson.dumps(
        {
            "config": meta.config,
            "tensors": tensors,
            "step": meta.step,
            "val_loss": meta.val_loss,
            "epoch": meta.epoch,
            "extra": meta.extra,
        },
        option=orjson.OPT_SORT_KEYS,
    )
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)) + manifest + b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body))


def save_checkpoint(model: RDRecModel, meta: CheckpointMeta, path: Union[str, Path]) -> Path:
    """Write atomically; the same parameters and meta always give the same bytes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = _serialize(model.state_dict(), meta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info("Checkpoint saved", path=str(path), step=meta.step, val_loss=meta.val_loss, bytes=len(blob))
    return path


def _parse(blob: bytes) -> Tuple[Dict[str, torch.Tensor], CheckpointMeta]:
    if len(blob) < _HEADER.size + _CRC.size:
        raise CheckpointError("file too short, truncated checkpoint", code="CHECKSUM")
    magic, version, manifest_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not an rdrec checkpoint", code="BAD_MAGIC")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format version {version}, expected {FORMAT_VERSION}", code="VERSION_MISMATCH")
    (stored_crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    body = blob[: -_CRC.size]
    if zlib.crc32(body) != stored_crc:
        raise CheckpointError("CRC mismatch, checkpoint is corrupt or truncated", code="CHECKSUM")

    start = _HEADER.size
    try:
        manifest = orjson.loads(body[start:start + manifest_len])
    except orjson.JSONDecodeError as e:
        raise CheckpointError(f"unreadable manifest: {e}", code="CHECKSUM")
    payload = memoryview(body)[start + manifest_len:]

    state: Dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        size = entry["numel"] * 4
        chunk = payload[entry["offset"]:entry["offset"] + size]
        if len(chunk) != size:
            raise CheckpointError(f"payload too short for {entry['name']}", code="CHECKSUM")
        array = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.copy())

    meta = CheckpointMeta(
        config=manifest["config"],
        step=manifest["step"],
        val_loss=manifest["val_loss"],
        epoch=manifest.get("epoch"),
        extra=manifest.get("extra") or {},
    )
    return state, meta


def load_checkpoint(path: Union[str, Path],
                    expected: Optional[ModelConfig] = None) -> Tuple[Dict[str, torch.Tensor], CheckpointMeta]:
    """
    Read a checkpoint back into a state dict and its meta

    Raises:
        CheckpointError: BAD_MAGIC, VERSION_MISMATCH, CHECKSUM, or
            CONFIG_MISMATCH when `expected` differs from the stored config
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}", code="MISSING_FILE")
    state, meta = _parse(path.read_bytes())
    if expected is not None:
        wanted = expected.model_dump(mode="json")
        if wanted != meta.config:
            differing = sorted(k for k in set(wanted) | set(meta.config) if wanted.get(k) != meta.config.get(k))
            raise CheckpointError(f"checkpoint config differs in {differing}", code="CONFIG_MISMATCH")
    return state, meta


def restore_model(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> Tuple[RDRecModel, CheckpointMeta]:
    state, meta = load_checkpoint(path, expected)
    cfg = expected or ModelConfig.model_validate(meta.config)
    model = RDRecModel(cfg)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"tensor layout does not match the model: {e}", code="CONFIG_MISMATCH")
    model.eval()
    return model, meta


def model_meta(model: RDRecModel, step: int, val_loss: Optional[float], epoch: Optional[int] = None,
               **extra: Any) -> CheckpointMeta:
    return CheckpointMeta(config=model.cfg.model_dump(mode="json"), step=step, val_loss=val_loss, epoch=epoch,
                          extra=extra)

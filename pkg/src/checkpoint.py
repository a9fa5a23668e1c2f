"""
MISFIT-V Fusion - Checkpoint container (.mfck)

Layout:
    magic 'MFCK' | uint16 version | uint16 reserved | uint64 manifest length |
    uint64 payload length | sha256(manifest + payload) | manifest (UTF-8 JSON) |
    payload (little-endian arrays, back to back)

All integers are little-endian. The manifest indexes every array by name,
dtype, shape and byte offset into the payload.
"""

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from src.config import TrainingConfig
from src.errors import CheckpointError, CheckpointIntegrityError, CheckpointVersionError
from src.utils import logger

MAGIC = b'MFCK'
FORMAT_VERSION = 1
EXTENSION = '.mfck'
_HEADER = struct.Struct('<4sHHQQ32s')


@dataclass
class Checkpoint:
    """Full training state: network and optimizer arrays plus the config snapshot."""

    config: TrainingConfig
    step: int
    arrays: Dict[str, np.ndarray]
    epoch: int = 0
    batch_index: int = 0
    optimizer_meta: Dict[str, Any] = field(default_factory=dict)
    extras: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def module_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        head = prefix + '.'
        return {k[len(head):]: v for k, v in self.arrays.items() if k.startswith(head)}


def _le_dtype(array: np.ndarray) -> np.dtype:
    return array.dtype.newbyteorder('<') if array.dtype.byteorder not in ('|',) else array.dtype


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    index: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for name in sorted(ckpt.arrays):
        array = np.asarray(ckpt.arrays[name])
        dtype = _le_dtype(array)
        data = np.ascontiguousarray(array, dtype=dtype).tobytes()
        index.append({'name': name, 'dtype': dtype.str, 'shape': list(array.shape),
                      'offset': offset, 'nbytes': len(data)})
        chunks.append(data)
        offset += len(data)

    manifest = {
        'config': ckpt.config.to_dict(),
        'step': ckpt.step,
        'epoch': ckpt.epoch,
        'batch_index': ckpt.batch_index,
        'optimizer': ckpt.optimizer_meta,
        'extras': ckpt.extras,
        'arrays': index,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode('utf-8')
    payload = b''.join(chunks)
    digest = hashlib.sha256(manifest_bytes + payload).digest()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, 0, len(manifest_bytes), len(payload), digest)
    return header + manifest_bytes + payload


def decode_checkpoint(blob: bytes, source: str = '<bytes>') -> Checkpoint:
    if len(blob) < _HEADER.size:
        raise CheckpointIntegrityError(f"Checkpoint {source} is truncated ({len(blob)} bytes)")
    magic, version, _, manifest_len, payload_len, digest = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointIntegrityError(f"{source} is not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint {source} has format version {version}; this build reads version {FORMAT_VERSION}"
        )
    body = blob[_HEADER.size:]
    if len(body) != manifest_len + payload_len:
        raise CheckpointIntegrityError(
            f"Checkpoint {source} is truncated: expected {manifest_len + payload_len} body bytes, got {len(body)}"
        )
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"Checkpoint {source} failed checksum verification")

    manifest = json.loads(body[:manifest_len].decode('utf-8'))
    payload = body[manifest_len:]
    arrays = {}
    for entry in manifest['arrays']:
        start = entry['offset']
        raw = payload[start:start + entry['nbytes']]
        arrays[entry['name']] = np.frombuffer(raw, dtype=np.dtype(entry['dtype'])).reshape(entry['shape']).copy()

    return Checkpoint(
        config=TrainingConfig.from_dict(manifest['config']),
        step=manifest['step'],
        arrays=arrays,
        epoch=manifest['epoch'],
        batch_index=manifest['batch_index'],
        optimizer_meta=manifest['optimizer'],
        extras=manifest['extras'],
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    """
    Write a checkpoint atomically (temp file + rename).

    Returns:
        The written path
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    blob = encode_checkpoint(ckpt)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(blob)
        os.replace(tmp_path, path)
    except OSError as e:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise CheckpointError(f"Could not write checkpoint {path}: {e}")
    logger.info(f"Saved checkpoint (step {ckpt.step}) to: {path}")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read and verify a checkpoint; nothing is returned unless every check passes.

    Raises:
        FileNotFoundError: missing file
        CheckpointVersionError: format version mismatch
        CheckpointIntegrityError: truncation, bad magic or checksum mismatch
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, 'rb') as f:
        blob = f.read()
    ckpt = decode_checkpoint(blob, source=path)
    logger.info(f"Loaded checkpoint: {path} (step {ckpt.step}, {len(ckpt.arrays)} arrays)")
    return ckpt


def _tensor_arrays(prefix: str, state: Dict[str, torch.Tensor]) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy() for k, v in state.items()}


def capture_state(models, optimizers: Optional[Dict[str, torch.optim.Optimizer]], config: TrainingConfig,
                  step: int, epoch: int = 0, batch_index: int = 0,
                  extras: Optional[Dict[str, Any]] = None) -> Checkpoint:
    """
    Snapshot networks and optimizers into a Checkpoint.

    Optimizer tensors become arrays named `opt.<name>.state.<index>.<key>`;
    param groups and non-tensor state go to the manifest.
    """
    arrays: Dict[str, np.ndarray] = {}
    for name, module in models.named_modules().items():
        arrays.update(_tensor_arrays(name, module.state_dict()))

    optimizer_meta: Dict[str, Any] = {}
    for name, optimizer in (optimizers or {}).items():
        state_dict = optimizer.state_dict()
        scalars: Dict[str, Dict[str, Any]] = {}
        for index, param_state in state_dict['state'].items():
            for key, value in param_state.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"opt.{name}.state.{index}.{key}"] = value.detach().cpu().numpy().copy()
                else:
                    scalars.setdefault(str(index), {})[key] = value
        groups = []
        for group in state_dict['param_groups']:
            groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in group.items()})
        optimizer_meta[name] = {'param_groups': groups, 'scalars': scalars}

    return Checkpoint(config=config, step=step, arrays=arrays, epoch=epoch, batch_index=batch_index,
                      optimizer_meta=optimizer_meta, extras=extras or {})


def restore_state(ckpt: Checkpoint, models, optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None):
    """Load a Checkpoint's arrays back into networks (and optimizers when given)."""
    for name, module in models.named_modules().items():
        arrays = ckpt.module_arrays(name)
        if not arrays and any(True for _ in module.parameters()):
            raise CheckpointError(f"Checkpoint has no state for '{name}'")
        try:
            module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        except RuntimeError as e:
            raise CheckpointError(f"Checkpoint does not match the '{name}' architecture: {e}")

    for name, optimizer in (optimizers or {}).items():
        meta = ckpt.optimizer_meta.get(name)
        if meta is None:
            raise CheckpointError(f"Checkpoint has no optimizer state for '{name}'")
        state: Dict[int, Dict[str, Any]] = {}
        prefix = f"opt.{name}.state."
        for key, array in ckpt.arrays.items():
            if key.startswith(prefix):
                index, field_name = key[len(prefix):].split('.', 1)
                state.setdefault(int(index), {})[field_name] = torch.from_numpy(array.copy())
        for index, values in meta.get('scalars', {}).items():
            state.setdefault(int(index), {}).update(values)
        groups = [{k: (tuple(v) if k == 'betas' else v) for k, v in g.items()} for g in meta['param_groups']]
        optimizer.load_state_dict({'state': state, 'param_groups': groups})

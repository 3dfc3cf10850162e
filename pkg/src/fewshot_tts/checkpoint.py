"""Checkpoint archive: JSON header + raw float64 payload.

A single file holds the model config echo, the partition manifest
(name -> partition -> shape), the flat parameter payload at double
precision, the speaker-id -> row map (table mode) and free-form extras
(approach tag, training config echo, optimizer state, rng state). The
format is byte-deterministic: identical contents produce identical files,
unlike zip-based containers that embed timestamps.
"""

from __future__ import annotations

import json
import os

import numpy as np
import torch

from .errors import CheckpointError
from .model import (
    DTYPE,
    MODE_TABLE,
    ModelConfig,
    ModelParameters,
    parameter_spec,
    partition_of,
)

MAGIC = b"FSTTS-CKPT\n"
CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(
    path: str,
    params: ModelParameters,
    cfg: ModelConfig,
    extras: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    extra_arrays = extra_arrays or {}
    manifest = [
        [name, partition_of(name), list(t.shape)] for name, t in params.tensors.items()
    ]
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": cfg.to_dict(),
        "mode": params.mode,
        "manifest": manifest,
        "speaker_rows": (
            {str(k): v for k, v in sorted(params.speaker_rows.items())}
            if params.speaker_rows is not None
            else None
        ),
        "extra_arrays": [[name, list(a.shape)] for name, a in extra_arrays.items()],
        "extras": extras or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for name, _, _ in manifest:
            arr = params.tensors[name].detach().numpy().astype("<f8", copy=False)
            f.write(arr.tobytes())
        for name, _ in header["extra_arrays"]:
            f.write(np.asarray(extra_arrays[name], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Returns (params, cfg, extras, extra_arrays); validates the manifest."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read: {e}") from e
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    header_len = int.from_bytes(blob[off : off + 8], "little")
    off += 8
    try:
        header = json.loads(blob[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    off += header_len
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {header.get('format_version')!r}"
        )

    cfg = ModelConfig.from_dict(header["model_config"])
    mode = header["mode"]
    speaker_rows = (
        {int(k): int(v) for k, v in header["speaker_rows"].items()}
        if header.get("speaker_rows") is not None
        else None
    )

    tensors: dict[str, torch.Tensor] = {}
    for name, partition, shape in header["manifest"]:
        if partition_of(name) != partition:
            raise CheckpointError(f"{path}: manifest partition mismatch for {name}")
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arr = np.frombuffer(blob[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
        tensors[name] = torch.as_tensor(arr, dtype=DTYPE)

    extra_arrays: dict[str, np.ndarray] = {}
    for name, shape in header.get("extra_arrays", []):
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated extra array {name}")
        extra_arrays[name] = np.frombuffer(blob[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")

    _validate_manifest(path, header["manifest"], cfg, mode, speaker_rows)
    params = ModelParameters(tensors=tensors, mode=mode, speaker_rows=speaker_rows)
    return params, cfg, header.get("extras", {}), extra_arrays


def _validate_manifest(path, manifest, cfg: ModelConfig, mode, speaker_rows):
    """Check the stored tensor set against what the config implies."""
    if mode == MODE_TABLE:
        if not speaker_rows:
            raise CheckpointError(f"{path}: table mode without a speaker row map")
        expected = {
            name: tuple(shape) for name, shape, _ in parameter_spec(cfg, len(speaker_rows))
        }
    elif mode == "shared":
        expected = {name: tuple(shape) for name, shape, _ in parameter_spec(cfg, None)}
    else:
        # reference-encoder speaker subsystems add their own spk.* tensors;
        # validate the shared trunk only.
        trunk = parameter_spec(
            ModelConfig.from_dict({**cfg.to_dict(), "emb_mode": "shared"}), None
        )
        expected = {name: tuple(shape) for name, shape, _ in trunk if not name.startswith("spk.")}

    got = {name: tuple(shape) for name, _, shape in manifest}
    for name, shape in expected.items():
        if name not in got:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if got[name] != shape:
            raise CheckpointError(
                f"{path}: shape of {name} is {got[name]}, config implies {shape}"
            )
    if mode != "encoder":
        stray = set(got) - set(expected)
        if stray:
            raise CheckpointError(f"{path}: unexpected parameters {sorted(stray)}")

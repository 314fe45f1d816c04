# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

"""
Checkpoint container: a directory holding manifest.json and one raw blob of
little-endian float32 tensors, laid out in state_dict order.
"""

import json
import logging
import os
from dataclasses import asdict, replace
from typing import Tuple, Optional

import numpy as np
import torch

from .attention import AttentionMode
from .backbone import VicinityVisionTransformer
from .config import VariantSpec
from .error import CheckpointError, ConfigError
from .protocol.checkpoint import ProtocolCheckpointManifestJson, ProtocolTensorEntryJson
from .util import dataclass_factory_filter_empty, deserialize_dataclass, strict_dataclass

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
BLOB_FILE = "params.bin"
BLOB_DTYPE = np.dtype('<f4')


def save_checkpoint(model: VicinityVisionTransformer, directory: str) -> str:
    """
    Write the model's parameters to directory (created if missing).
    Returns the manifest path.
    """
    os.makedirs(directory, exist_ok=True)
    manifest = ProtocolCheckpointManifestJson(
        variant=asdict(model.spec, dict_factory=dataclass_factory_filter_empty),
        class_count=model.class_count
    )
    offset = 0
    with open(os.path.join(directory, BLOB_FILE), "wb") as blob:
        for name, tensor in model.state_dict().items():
            data = tensor.detach().cpu().to(torch.float32).numpy().astype(BLOB_DTYPE, copy=False)
            raw = np.ascontiguousarray(data).tobytes()
            blob.write(raw)
            manifest.tensors.append(ProtocolTensorEntryJson(
                name=name, shape=list(data.shape), dtype="float32", offset=offset, nbytes=len(raw), file=BLOB_FILE
            ))
            offset += len(raw)

    manifest_path = os.path.join(directory, MANIFEST_FILE)
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(asdict(manifest, dict_factory=dataclass_factory_filter_empty), f, indent=1)
    logger.info("Saved %d tensors (%d bytes) to %s", len(manifest.tensors), offset, directory)
    return manifest_path


def read_manifest(directory: str) -> ProtocolCheckpointManifestJson:
    path = os.path.join(directory, MANIFEST_FILE)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as ex:
        raise CheckpointError("Unable to read %s: %s" % (path, ex))
    except json.JSONDecodeError as json_error:
        raise CheckpointError("Manifest JSON Parsing Error: %s" % str(json_error))
    manifest = deserialize_dataclass(ProtocolCheckpointManifestJson, data)
    if manifest.format != "vvt-checkpoint" or manifest.variant is None:
        raise CheckpointError("%s is not a VVT checkpoint manifest" % path)
    return manifest


def _read_tensor(directory: str, entry: ProtocolTensorEntryJson, blobs: dict) -> torch.Tensor:
    if entry.dtype != "float32":
        raise CheckpointError("Tensor %s: unsupported dtype %s" % (entry.name, entry.dtype))
    if entry.file not in blobs:
        try:
            with open(os.path.join(directory, entry.file), "rb") as f:
                blobs[entry.file] = f.read()
        except OSError as ex:
            raise CheckpointError("Unable to read blob %s: %s" % (entry.file, ex))
    blob = blobs[entry.file]
    count = int(np.prod(entry.shape, dtype=np.int64))
    if entry.nbytes != count * BLOB_DTYPE.itemsize:
        raise CheckpointError("Tensor %s: %d bytes recorded for shape %s" % (entry.name, entry.nbytes, entry.shape))
    if entry.offset < 0 or entry.offset + entry.nbytes > len(blob):
        raise CheckpointError("Tensor %s: bytes [%d, %d) are outside %s (%d bytes)" % (
            entry.name, entry.offset, entry.offset + entry.nbytes, entry.file, len(blob)))
    data = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=entry.offset).reshape(entry.shape)
    return torch.from_numpy(data.astype(np.float32))


def load_state(model: VicinityVisionTransformer, directory: str,
               manifest: Optional[ProtocolCheckpointManifestJson] = None) -> VicinityVisionTransformer:
    """ Load tensors into an existing model. Every name and shape must match exactly. """
    manifest = manifest or read_manifest(directory)
    expected = model.state_dict()
    names = [t.name for t in manifest.tensors]
    missing = sorted(set(expected.keys()) - set(names))
    unexpected = sorted(set(names) - set(expected.keys()))
    if missing or unexpected:
        raise CheckpointError("Checkpoint does not match the model. Missing: %s. Unexpected: %s" % (
            ", ".join(missing) or "none", ", ".join(unexpected) or "none"))

    blobs = {}
    state = {}
    for entry in manifest.tensors:
        if tuple(entry.shape) != tuple(expected[entry.name].shape):
            raise CheckpointError("Tensor %s: checkpoint shape %s, model shape %s" % (
                entry.name, tuple(entry.shape), tuple(expected[entry.name].shape)))
        state[entry.name] = _read_tensor(directory, entry, blobs).to(expected[entry.name].dtype)
    model.load_state_dict(state, strict=True)
    logger.info("Loaded %d tensors from %s", len(state), directory)
    return model


def load_checkpoint(directory: str, mode: Optional[AttentionMode] = None) -> Tuple[VariantSpec, VicinityVisionTransformer]:
    """
    Rebuild the model described by the manifest and load its parameters.
    A mode other than the trained one rewires attention only; every tensor still loads.
    """
    manifest = read_manifest(directory)
    try:
        spec = strict_dataclass(VariantSpec, manifest.variant, "manifest.variant")
        if mode is not None:
            spec = replace(spec, mode=mode)
        model = VicinityVisionTransformer(spec, manifest.class_count)
    except ConfigError as ex:
        raise CheckpointError("Invalid model description in manifest: %s" % ex.msg)
    return spec, load_state(model, directory, manifest)

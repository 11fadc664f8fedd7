"""Checkpoint container: a JSON manifest followed by flat little-endian
float32 parameter arrays, in manifest order.

The 64-bit model hash carried in bitstream headers is derived from the
manifest alone; the manifest embeds a content digest per tensor, so any
weight change also changes the stream hash.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from .errors import ConsistencyError, FormatError
from .model import B2PModel, ModelConfig

_MAGIC = b"B2PC"


def save_checkpoint(model: B2PModel, path, metadata: dict | None = None):
    """Write the model (and optional training metadata) to `path`."""
    manifest = model.manifest()
    if metadata:
        manifest["metadata"] = metadata
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        names = dict(model.named_parameters())
        for entry in manifest["tensors"]:
            arr = names[entry["name"]].detach().to(torch.float32).numpy()
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path, dtype=torch.float32) -> tuple[B2PModel, dict]:
    """Read a checkpoint; returns (model, metadata). Shapes and digests are
    validated against the manifest."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise FormatError("not a checkpoint file")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        try:
            manifest = json.loads(fh.read(blob_len))
        except ValueError as exc:
            raise FormatError(f"corrupt checkpoint manifest: {exc}") from None
        if manifest.get("format") != "b2p-checkpoint":
            raise FormatError("unrecognized checkpoint manifest")
        model = B2PModel(ModelConfig(**manifest["config"]), dtype=dtype)
        expected = set(model.named_parameters())
        listed = {e["name"] for e in manifest["tensors"]}
        if listed != expected:
            raise ConsistencyError("checkpoint tensor set does not match the architecture")
        for entry in manifest["tensors"]:
            count = int(np.prod(entry["shape"]))
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise FormatError(f"checkpoint truncated at tensor {entry['name']}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            if hashlib.sha256(raw).hexdigest() != entry["digest"]:
                raise ConsistencyError(f"digest mismatch for tensor {entry['name']}")
            model.load_tensor(entry["name"], arr.astype(np.float32))
    return model, manifest.get("metadata", {})

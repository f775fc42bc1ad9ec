"""Versioned checkpoint files.

Layout::

    MAGIC (8 bytes) | version (u32 LE) | header length (u32 LE) | header (JSON, UTF-8) | array payload

The header holds the run configuration, the alphabet, the iteration count
and an index of named arrays (dtype, shape, byte offset into the payload).
Arrays are stored little-endian in the precision the model was trained in.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import GatedLexiconNet
from .numerics import precision

MAGIC = b"GLNCKPT\x00"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    alphabet: str
    iteration: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def build_model(self) -> GatedLexiconNet:
        """Model with the stored weights, created in the stored precision."""
        with precision(self.config.precision):
            model = GatedLexiconNet(self.config.model_config(len(self.alphabet)), seed=self.config.train.seed)
            model.load_state_dict(self.arrays)
        model.eval()
        return model


def save(path, model: GatedLexiconNet, config: RunConfig, alphabet: str, iteration: int) -> None:
    index, blobs, offset = [], [], 0
    for name, array in model.state_dict().items():
        dt = array.dtype.newbyteorder("<")
        blob = np.ascontiguousarray(array, dtype=dt).tobytes()
        index.append({"name": name, "dtype": dt.str, "shape": list(array.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"config": config.to_dict(), "alphabet": alphabet, "iteration": iteration, "arrays": index},
        ensure_ascii=False,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<II", raw, pos)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    payload = memoryview(raw)[pos + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: array {entry['name']} runs past the end of the file")
        arrays[entry["name"]] = (
            np.frombuffer(payload[entry["offset"] : end], dtype=dt).reshape(entry["shape"]).astype(dt.newbyteorder("="))
        )
    return Checkpoint(RunConfig.from_dict(header["config"]), header["alphabet"], int(header["iteration"]), arrays)

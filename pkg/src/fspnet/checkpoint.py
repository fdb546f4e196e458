"""Byte-stable checkpoint files.

Layout: a magic line, a 16-digit header length, a compact JSON header
(sorted keys), then every tensor as little-endian float64 in header order.
Nothing time- or platform-dependent is written, so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ConfigError, ModelConfig

MAGIC = b"FSPNETCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    epoch: int = 0
    step: int = 0
    rng_state: Optional[dict] = None

    def to_bytes(self) -> bytes:
        tensors = []
        blobs = []
        offset = 0
        for group, table in (("state", self.state), ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for name in sorted(table):
                arr = np.ascontiguousarray(table[name], dtype="<f8")
                tensors.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
                blobs.append(arr.tobytes())
                offset += arr.nbytes
        header = {
            "format_version": FORMAT_VERSION,
            "config": self.config.flat(),
            "adam_step": self.adam_step,
            "epoch": self.epoch,
            "step": self.step,
            "rng_state": self.rng_state,
            "tensors": tensors,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + b"%016d\n" % len(head) + head + b"".join(blobs)

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if not raw.startswith(MAGIC):
            raise CheckpointError("not an FSPNet checkpoint")
        pos = len(MAGIC)
        try:
            n = int(raw[pos : pos + 16])
            header = json.loads(raw[pos + 17 : pos + 17 + n])
        except ValueError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')}")
        try:
            config = ModelConfig.from_flat(header["config"])
        except ConfigError as exc:
            raise CheckpointError(f"checkpoint config invalid: {exc}") from exc
        body = memoryview(raw)[pos + 17 + n :]
        groups: dict[str, dict[str, np.ndarray]] = {"state": {}, "adam_m": {}, "adam_v": {}}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            if t["offset"] + 8 * count > len(body):
                raise CheckpointError(f"checkpoint truncated at {t['name']}")
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=t["offset"])
            groups[t["group"]][t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
        return cls(
            config=config,
            state=groups["state"],
            adam_m=groups["adam_m"],
            adam_v=groups["adam_v"],
            adam_step=header["adam_step"],
            epoch=header["epoch"],
            step=header["step"],
            rng_state=header["rng_state"],
        )

    @classmethod
    def load(cls, path: str, expected_config: Optional[ModelConfig] = None) -> "Checkpoint":
        try:
            with open(path, "rb") as fh:
                ckpt = cls.from_bytes(fh.read())
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if expected_config is not None and expected_config.flat() != ckpt.config.flat():
            diff = {
                k: (v, ckpt.config.flat().get(k))
                for k, v in expected_config.flat().items()
                if ckpt.config.flat().get(k) != v
            }
            raise CheckpointError(f"checkpoint config differs: {diff}")
        return ckpt

"""
Checkpoint archive.

Layout: 8 magic bytes, a little-endian uint64 manifest length, the manifest
as canonical JSON, then one contiguous little-endian float32 blob. The
manifest lists every tensor's name, group, dtype, shape and byte offset,
plus the format version, config hash, code version, arm and step. Nothing
time-dependent is stored, so saving the same state twice gives the same bytes.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from src.utils.error_handler import CheckpointError

MAGIC = b"CSCDCKPT"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config_hash: str
    code_version: str
    step: int = 0
    arm: str = ""
    # group -> {tensor name -> float32 array}
    groups: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def from_parameter_groups(cls, parameter_groups, config_hash: str, code_version: str,
                              step: int = 0, arm: str = "") -> "Checkpoint":
        groups = {}
        for group, named in parameter_groups.items():
            groups[group] = {name: np.asarray(p.data, dtype=_DTYPE) for name, p in named}
        return cls(config_hash=config_hash, code_version=code_version, step=step, arm=arm, groups=groups)

    def group_names(self) -> List[str]:
        return sorted(self.groups)

    def tensor_count(self) -> int:
        return sum(len(tensors) for tensors in self.groups.values())

    def select(self, names: Iterable[str]) -> "Checkpoint":
        """A checkpoint holding only the named groups"""
        subset = {}
        for name in names:
            if name not in self.groups:
                raise CheckpointError(f"Checkpoint has no group {name}; available: {self.group_names()}")
            subset[name] = self.groups[name]
        return Checkpoint(self.config_hash, self.code_version, self.step, self.arm, subset)

    def _layout(self) -> Tuple[dict, List[np.ndarray]]:
        entries = []
        arrays = []
        offset = 0
        for group in sorted(self.groups):
            for name in sorted(self.groups[group]):
                array = np.ascontiguousarray(self.groups[group][name], dtype=_DTYPE)
                entries.append({
                    "name": name,
                    "group": group,
                    "dtype": "float32",
                    "shape": list(array.shape),
                    "offset": offset,
                    "nbytes": array.nbytes,
                })
                arrays.append(array)
                offset += array.nbytes
        manifest = {
            "format_version": FORMAT_VERSION,
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "step": int(self.step),
            "arm": self.arm,
            "byte_order": "little",
            "tensors": entries,
        }
        return manifest, arrays

    def to_bytes(self) -> bytes:
        manifest, arrays = self._layout()
        header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<Q", len(header)), header]
        parts.extend(array.tobytes() for array in arrays)
        return b"".join(parts)

    def group_bytes(self, group: str) -> bytes:
        """Serialized bytes of a single group, for immutability comparisons"""
        return self.select([group]).to_bytes()

    def save(self, path: str) -> str:
        """Atomically write the archive; returns its SHA-256"""
        payload = self.to_bytes()
        directory = os.path.dirname(path) or "."
        os.makedirs(directory, exist_ok=True)
        temp_file = path + ".tmp"
        try:
            with open(temp_file, "wb") as f:
                f.write(payload)
            os.replace(temp_file, path)
        finally:
            if os.path.exists(temp_file):
                os.remove(temp_file)
        return hashlib.sha256(payload).hexdigest()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "Checkpoint":
        if payload[:len(MAGIC)] != MAGIC:
            raise CheckpointError("Not a checkpoint archive (bad magic bytes)")
        if len(payload) < len(MAGIC) + 8:
            raise CheckpointError("Checkpoint header truncated")
        (length,) = struct.unpack("<Q", payload[len(MAGIC):len(MAGIC) + 8])
        start = len(MAGIC) + 8
        try:
            manifest = json.loads(payload[start:start + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Corrupt checkpoint manifest: {e}") from None
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint format version {version}, expected {FORMAT_VERSION}")

        blob = payload[start + length:]
        groups: Dict[str, Dict[str, np.ndarray]] = {}
        for entry in manifest["tensors"]:
            end = entry["offset"] + entry["nbytes"]
            if end > len(blob):
                raise CheckpointError(f"Checkpoint blob truncated at tensor {entry['name']}", entry["name"])
            array = np.frombuffer(blob[entry["offset"]:end], dtype=_DTYPE).reshape(entry["shape"])
            groups.setdefault(entry["group"], {})[entry["name"]] = array
        return cls(config_hash=manifest["config_hash"], code_version=manifest["code_version"],
                   step=manifest["step"], arm=manifest.get("arm", ""), groups=groups)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        if not os.path.exists(path):
            raise CheckpointError(f"Checkpoint not found: {path}")
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def restore(self, module, group: str, strict: bool = True) -> None:
        """
        Load one group into a module's parameters

        Raises:
            CheckpointError: Missing group, or a tensor absent or shaped differently
        """
        if group not in self.groups:
            raise CheckpointError(f"Checkpoint has no group {group}; available: {self.group_names()}")
        module.load_state_dict(self.groups[group], strict=strict)


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()

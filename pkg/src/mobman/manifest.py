"""Run manifests: enough metadata to reproduce any command bit-identically.

Every CLI command emits one manifest next to its outputs. A manifest records
the command name, the resolved configuration, every seed, content hashes of
all inputs, and the paths (plus hashes) of all outputs, so a rerun from the
same inputs can be checked byte for byte.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .jsonl import read_json, write_json

ARTIFACT_VERSION = "0.1.0"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def hash_tree(path) -> dict[str, str]:
    """Hash a file, or every file under a directory (relative keys)."""
    p = Path(path)
    if p.is_file():
        return {p.name: file_sha256(p)}
    out = {}
    for f in sorted(p.rglob("*")):
        if f.is_file():
            out[str(f.relative_to(p))] = file_sha256(f)
    return out


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, dict[str, str]] = field(default_factory=dict)  # label -> {file: hash}
    outputs: dict[str, str] = field(default_factory=dict)  # path -> hash
    version: str = ARTIFACT_VERSION

    def add_input(self, label: str, path) -> None:
        self.inputs[label] = hash_tree(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = file_sha256(path)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": self.version,
        }

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @staticmethod
    def load(path) -> "RunManifest":
        doc = read_json(path)
        return RunManifest(
            command=doc["command"],
            config=doc["config"],
            seed=int(doc["seed"]),
            inputs=doc.get("inputs", {}),
            outputs=doc.get("outputs", {}),
            version=doc.get("version", ARTIFACT_VERSION),
        )

    def verify_outputs(self) -> list[str]:
        """Paths whose current content no longer matches the recorded hash."""
        stale = []
        for path, digest in self.outputs.items():
            if not Path(path).is_file() or file_sha256(path) != digest:
                stale.append(path)
        return stale

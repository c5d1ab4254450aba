"""Run manifests: canonical ``key = value`` records of how an output directory
was produced."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.txt"


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def inputs_digest(paths):
    """Order-independent digest of a set of input files."""
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(Path(p).name.encode() + b"\0" + file_sha256(p).encode() + b"\n")
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def items(self):
        rows = {"command": self.command, "tool_version": self.tool_version,
                "started": f"{self.started:.3f}"}
        if self.finished is not None:
            rows["finished"] = f"{self.finished:.3f}"
        for prefix, mapping in (("config", self.config), ("seed", self.seeds),
                                ("input", self.inputs), ("output", self.outputs)):
            for k, v in mapping.items():
                rows[f"{prefix}.{k}"] = v if isinstance(v, str) else json.dumps(v, sort_keys=True)
        return sorted(rows.items())

    def dumps(self):
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def write(self, out_dir):
        self.finished = time.time()
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(self.dumps())
        return path


def read_manifest(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition(" = ")
        out[k] = v
    return out

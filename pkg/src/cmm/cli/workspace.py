"""Workspace directory with content-addressed artifacts and a manifest.

``manifest.json`` maps every artifact name to its file, SHA-256 digest,
producing stage, that stage's config hash and the root seed. It carries no
timestamps, so an unchanged rerun rewrites it byte for byte. Artifacts marked
``volatile`` (wall-clock measurements) keep a fixed file name and no digest,
so they are excluded from that guarantee without disturbing the manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

from ..errors import DependencyError

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class Workspace:
    def __init__(self, root):
        self.root = os.path.abspath(root)
        self.artifact_dir = os.path.join(self.root, "artifacts")
        self._manifest = self._read()

    def _read(self):
        path = os.path.join(self.root, MANIFEST)
        if not os.path.exists(path):
            return {"version": MANIFEST_VERSION, "artifacts": {}}
        with open(path) as fh:
            return json.load(fh)

    @property
    def artifacts(self):
        return self._manifest["artifacts"]

    def _write_manifest(self):
        os.makedirs(self.root, exist_ok=True)
        path = os.path.join(self.root, MANIFEST)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self._manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)

    def put_bytes(self, name, data, ext, stage, config_hash, seed, volatile=False):
        """Store ``data`` as ``artifacts/<name>-<digest16>.<ext>`` and record it."""
        os.makedirs(self.artifact_dir, exist_ok=True)
        digest = hashlib.sha256(data).hexdigest()
        safe = name.replace(":", "_").replace("/", "_")
        # volatile content changes every run, so its name and digest stay out of the manifest
        rel = os.path.join("artifacts", f"{safe}.{ext}" if volatile else f"{safe}-{digest[:16]}.{ext}")
        path = os.path.join(self.root, rel)
        if volatile or not os.path.exists(path):
            with open(path + ".tmp", "wb") as fh:
                fh.write(data)
            os.replace(path + ".tmp", path)
        old = self.artifacts.get(name)
        self.artifacts[name] = {"path": rel, "sha256": None if volatile else digest, "stage": stage,
                                "config_hash": config_hash, "seed": int(seed), "volatile": bool(volatile)}
        if old and old["path"] != rel and not self._referenced(old["path"]):
            try:
                os.remove(os.path.join(self.root, old["path"]))
            except FileNotFoundError:
                pass
        return path

    def put_file(self, name, writer, ext, stage, config_hash, seed, volatile=False):
        """Let ``writer(path)`` produce the file, then store it like :meth:`put_bytes`."""
        with tempfile.TemporaryDirectory() as d:
            tmp = os.path.join(d, f"artifact.{ext}")
            writer(tmp)
            with open(tmp, "rb") as fh:
                data = fh.read()
        return self.put_bytes(name, data, ext, stage, config_hash, seed, volatile)

    def _referenced(self, rel):
        return any(a["path"] == rel for a in self.artifacts.values())

    def drop_stage(self, stage, keep=()):
        """Forget artifacts of ``stage`` not in ``keep`` (call before re-recording)."""
        for name in [n for n, a in self.artifacts.items() if a["stage"] == stage and n not in keep]:
            rel = self.artifacts.pop(name)["path"]
            if not self._referenced(rel):
                try:
                    os.remove(os.path.join(self.root, rel))
                except FileNotFoundError:
                    pass

    def commit(self):
        self._write_manifest()

    def require(self, name, producer, expected_hash):
        """Path of artifact ``name`` after checking it is present, intact and fresh.

        Raises:
            DependencyError: missing, modified on disk, or produced under a
                different configuration; the message names ``producer``.
        """
        entry = self.artifacts.get(name)
        if entry is None:
            raise DependencyError(f"artifact '{name}' not found in {self.root}; run `cmm {producer}` first",
                                  producer=producer)
        path = os.path.join(self.root, entry["path"])
        if not os.path.exists(path):
            raise DependencyError(f"artifact '{name}' is missing on disk; rerun `cmm {producer}`", producer=producer)
        with open(path, "rb") as fh:
            if entry["sha256"] is not None and hashlib.sha256(fh.read()).hexdigest() != entry["sha256"]:
                raise DependencyError(f"artifact '{name}' was modified after it was written; rerun `cmm {producer}`",
                                      producer=producer)
        if entry["config_hash"] != expected_hash:
            raise DependencyError(f"artifact '{name}' is stale: it was produced under a different configuration; "
                                  f"rerun `cmm {producer}`", producer=producer)
        return path

    def names(self, prefix):
        return sorted(n for n in self.artifacts if n.startswith(prefix))

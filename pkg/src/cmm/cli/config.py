"""Run configuration: one TOML file, one section per pipeline stage.

Unknown sections and keys are errors. Only ``data.seed`` seeds anything;
each stage derives its own stream from it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os

import tomli

from ..backtest.protocols import ProtocolConfig
from ..errors import ConfigurationError, ParseError
from ..hajek import FusionConfig
from ..ofdd import DistillConfig
from ..pipeline import DataConfig
from ..probe import ProbeConfig
from ..teacher import TeacherConfig

SECTIONS = {
    "data": DataConfig,
    "teacher": TeacherConfig,
    "probe": ProbeConfig,
    "distill": DistillConfig,
    "fusion": FusionConfig,
    "backtest": ProtocolConfig,
}
# seeds below the data section are derived, never configured
DERIVED = {"probe": {"seed"}, "distill": {"seed"}, "fusion": {"seed"}, "backtest": {"seed"}}
PATH_KEYS = {"workspace"}

# sections whose values determine each stage's artifacts
STAGE_SECTIONS = {
    "gen-data": ("data",),
    "train-teacher": ("data", "teacher"),
    "probe": ("data", "teacher", "probe"),
    "distill": ("data", "teacher", "distill"),
    "train-kernel": ("data", "teacher", "distill", "fusion"),
    "backtest": ("data", "teacher", "distill", "fusion", "backtest"),
    "report": ("data", "teacher", "probe", "distill", "fusion", "backtest"),
}


def _allowed(name):
    return {f.name for f in dataclasses.fields(SECTIONS[name])} - DERIVED.get(name, set())


def _tuples(value):
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def _build(name, raw):
    cls = SECTIONS[name]
    kwargs = {k: _tuples(v) for k, v in raw.items()}
    try:
        if name == "data":
            return DataConfig.from_dict(raw)
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"[{name}] {exc}") from None
    return obj.validate() if hasattr(obj, "validate") else obj


@dataclasses.dataclass
class RunConfig:
    data: DataConfig
    teacher: TeacherConfig
    probe: ProbeConfig
    distill: DistillConfig
    fusion: FusionConfig
    backtest: ProtocolConfig
    workspace: str = "workspace"
    source_path: str | None = None

    @property
    def seed(self):
        return self.data.seed

    def section_dict(self, name):
        obj = getattr(self, name)
        d = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
        d = json.loads(json.dumps(d, default=list))
        for k in DERIVED.get(name, ()):
            d.pop(k, None)
        return d

    def stage_hash(self, stage, extra=None):
        """SHA-256 over the sections a stage depends on (plus input file digests)."""
        payload = {s: self.section_dict(s) for s in STAGE_SECTIONS[stage]}
        if self.data.source == "csv":
            payload["data"].pop("csv_path")
            payload["csv_sha256"] = file_digest(self.data.csv_path)
        if extra:
            payload["extra"] = extra
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def parse_config(raw, source_path=None):
    """Validate a parsed TOML mapping into a :class:`RunConfig`.

    Raises:
        ConfigurationError: unknown section or key, or a value that fails
            its section's validation.
    """
    unknown_sections = set(raw) - set(SECTIONS) - {"paths"}
    if unknown_sections:
        raise ConfigurationError(f"unknown config section(s): {sorted(unknown_sections)}")
    built = {}
    for name in SECTIONS:
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigurationError(f"[{name}] must be a table")
        unknown = set(section) - _allowed(name)
        if unknown:
            raise ConfigurationError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
        built[name] = _build(name, section)
    paths = raw.get("paths", {})
    unknown = set(paths) - PATH_KEYS
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [paths]: {sorted(unknown)}")
    workspace = str(paths.get("workspace", "workspace"))
    base = os.path.dirname(os.path.abspath(source_path)) if source_path else os.getcwd()
    if not os.path.isabs(workspace):
        workspace = os.path.normpath(os.path.join(base, workspace))
    data = built["data"]
    if data.source == "csv" and not os.path.isabs(data.csv_path):
        data.csv_path = os.path.join(base, data.csv_path)
    if data.source == "csv" and not os.path.exists(data.csv_path):
        raise ConfigurationError(f"data.csv_path {data.csv_path} does not exist")
    return RunConfig(workspace=workspace, source_path=source_path, **built)


def load_config(path):
    """Read and validate a TOML run configuration; no side effects on failure."""
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return parse_config(raw, path)

"""Command-line pipeline: config loading, workspace and commands."""

from .commands import COMMANDS, Context
from .config import RunConfig, load_config, parse_config
from .main import build_parser, main
from .workspace import Workspace

__all__ = ["COMMANDS", "Context", "RunConfig", "Workspace", "build_parser", "load_config", "main", "parse_config"]

"""Python bindings for the archdoor harness."""

from ._archdoor import (
    ArchdoorError,
    ConfigError,
    command_names,
    config_hash,
    detect,
    rasr,
    run,
    shannon_entropy,
    trigger_present,
)

__all__ = [
    "ArchdoorError",
    "ConfigError",
    "command_names",
    "config_hash",
    "detect",
    "rasr",
    "run",
    "shannon_entropy",
    "trigger_present",
]

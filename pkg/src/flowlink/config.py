"""Engine configuration: a flat dataclass with strict JSON (de)serialization.

Unknown keys and non-positive durations are rejected with the offending
field named, so a typo'd config fails at startup instead of silently using
defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


VALID_ROLES = ("authoritative", "proxy")

_DURATION_FIELDS = ("verification_interval", "retry_window", "grace_period",
                    "probe_interval", "exec_ambiguity_window",
                    "ssh_pairing_window", "download_retention",
                    "hash_query_timeout")


@dataclass
class EngineConfig:
    listen_addr: str = "127.0.0.1"
    listen_port: int = 0                      # 0 = no TCP flow listener
    roles: tuple[str, ...] = ("authoritative", "proxy")
    verification_interval: float = 30.0
    retry_window: float = 2.0
    grace_period: float = 60.0
    probe_interval: float = 30.0
    exec_ambiguity_window: float = 0.1
    ssh_pairing_window: float = 600.0
    download_retention: float = 86400.0
    hash_query_timeout: float = 5.0
    dns_servers: tuple[str, ...] = ()
    groups: dict = field(default_factory=dict)  # host -> extra group names
    log_dir: str = "logs"
    metrics_port: int = 0                     # 0 = metrics endpoint disabled
    max_parked: int = 10_000

    def __post_init__(self):
        self.roles = tuple(self.roles)
        self.dns_servers = tuple(self.dns_servers)
        self.groups = {h: tuple(g) for h, g in dict(self.groups).items()}
        self.validate()

    def validate(self) -> None:
        if not self.roles:
            raise ConfigError("roles: at least one role must be enabled")
        for r in self.roles:
            if r not in VALID_ROLES:
                raise ConfigError(f"roles: unknown role {r!r}")
        for name in _DURATION_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{name}: expected a number, got {value!r}")
            if value <= 0:
                raise ConfigError(f"{name}: duration must be positive, got {value!r}")
        if self.retry_window < 0:
            raise ConfigError(f"retry_window: must be >= 0, got {self.retry_window!r}")
        if self.max_parked < 1:
            raise ConfigError(f"max_parked: must be >= 1, got {self.max_parked!r}")
        for port_field in ("listen_port", "metrics_port"):
            port = getattr(self, port_field)
            if not isinstance(port, int) or port < 0 or port > 65535:
                raise ConfigError(f"{port_field}: invalid port {port!r}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["roles"] = list(self.roles)
        out["dns_servers"] = list(self.dns_servers)
        out["groups"] = {h: list(g) for h, g in self.groups.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field {unknown[0]!r}")
        return cls(**d)


def load_config(path: str) -> EngineConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return EngineConfig.from_dict(raw.get("engine", raw) if "engine" in raw
                                  or "workload" in raw else raw)


def load_config_sections(path: str) -> tuple[EngineConfig, dict]:
    """Split a config file into the engine section and the raw workload
    section (parsed by the simulator)."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    if "engine" in raw or "workload" in raw:
        return (EngineConfig.from_dict(raw.get("engine", {})),
                raw.get("workload", {}))
    return EngineConfig.from_dict(raw), {}


def save_config(config: EngineConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

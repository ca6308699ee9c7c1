"""Scenario configuration: dataclass, INI file loading, validation.

The config format is flat key = value text with sections (see
docs/config.md).  Every knob has a default matching the evaluation setup:
28 nodes (29 for the wormhole scenario) on a 210 m x 150 m field, 10 rounds
of 20 simulated minutes, one data packet per minute per sender, adversary
activation at two minutes.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

MODES = ("UM", "PSM", "PSMrp", "CSM")
ATTACKS = ("none", "NA", "CA", "WH")
KNOWLEDGE = ("internal", "external")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    # scenario
    mode: str = "CSM"
    attack: str = "none"
    knowledge: str = "internal"
    rounds: int = 10
    duration_s: int = 1200
    base_seed: int = 1
    # topology
    area_w_m: float = 210.0
    area_h_m: float = 150.0
    nodes: int = 28
    radio_range_m: float = 50.0
    # link
    latency_ms: float = 3.0
    loss_prob: float = 0.02
    header_overhead_bytes: int = 48
    # traffic
    data_payload_bytes: int = 32
    data_period_s: int = 60
    # energy proxy
    e_tx_uj_per_byte: float = 0.7
    e_rx_uj_per_byte: float = 0.6
    # trust policy
    trust_min: int = 0
    trust_max: int = 100
    trust_trig: int = 50
    trust_step: int = 10
    # recovery
    recovery_timeout_s: float = 4.0
    recovery_max_attempts: int = 3
    # chain housekeeping
    snapshot_period_s: int = 30
    # adversary
    activation_s: float = 120.0

    @property
    def scenario_name(self) -> str:
        if self.attack == "none":
            return f"{self.mode.lower()}-none"
        return f"{self.mode.lower()}-{self.attack.lower()}-{self.knowledge}"

    @property
    def duration_us(self) -> int:
        return self.duration_s * 1_000_000

    def expected_nodes(self) -> int:
        return 29 if self.attack == "WH" else 28

    def violations(self) -> list[str]:
        """Invariant violations; empty means the config can run."""
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.attack not in ATTACKS:
            problems.append(
                f"attack must be one of {ATTACKS}, got {self.attack!r}")
        if self.knowledge not in KNOWLEDGE:
            problems.append(
                f"knowledge must be one of {KNOWLEDGE}, got {self.knowledge!r}")
        if self.rounds < 1:
            problems.append("rounds must be >= 1")
        if self.duration_s < 1:
            problems.append("duration_s must be >= 1")
        if self.attack == "WH" and self.nodes != 29:
            problems.append("WH scenario requires nodes = 29 "
                            "(two relays; set nodes = 29 or leave default "
                            "28 to be auto-adjusted by `matrix`)")
        if self.attack != "WH" and self.nodes != 28:
            problems.append("non-WH scenarios use nodes = 28")
        if not 0 <= self.loss_prob < 1:
            problems.append("loss_prob must be in [0, 1)")
        if not self.trust_min <= self.trust_trig <= self.trust_max:
            problems.append("require trust_min <= trust_trig <= trust_max")
        if self.radio_range_m <= 0 or self.area_w_m <= 0 or self.area_h_m <= 0:
            problems.append("geometry values must be positive")
        if self.recovery_max_attempts < 1:
            problems.append("recovery_max_attempts must be >= 1")
        return problems

    def normalized(self) -> "ScenarioConfig":
        """Apply the structural fix-ups `matrix` relies on: the wormhole
        scenario carries two relays, everything else one adversary."""
        return replace(self, nodes=self.expected_nodes())


_SECTION_FIELDS = {
    "scenario": ("mode", "attack", "knowledge", "rounds", "duration_s",
                 "base_seed"),
    "topology": ("area_w_m", "area_h_m", "nodes", "radio_range_m"),
    "link": ("latency_ms", "loss_prob", "header_overhead_bytes"),
    "traffic": ("data_payload_bytes", "data_period_s"),
    "energy": ("e_tx_uj_per_byte", "e_rx_uj_per_byte"),
    "trust": ("trust_min", "trust_max", "trust_trig", "trust_step"),
    "recovery": ("recovery_timeout_s", "recovery_max_attempts"),
    "chain": ("snapshot_period_s",),
    "adversary": ("activation_s",),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ScenarioConfig)}


def _convert(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"key '{name}': cannot parse {raw!r}") from exc


def load_config(path: str, overrides: dict | None = None) -> ScenarioConfig:
    """Read an INI scenario file.  Unknown sections or keys are errors (a
    typo must not silently fall back to a default)."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    values = {}
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"unknown section [{section}]")
        allowed = _SECTION_FIELDS[section]
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
            values[key] = _convert(key, raw)
    if overrides:
        values.update(overrides)
    return ScenarioConfig(**values)


def scenario_from_name(name: str, base: ScenarioConfig) -> ScenarioConfig:
    """Parse names like 'csm-wh-internal', 'um-na', 'psm-none'."""
    parts = name.lower().split("-")
    mode_map = {m.lower(): m for m in MODES}
    attack_map = {a.lower(): a for a in ATTACKS}
    if not parts or parts[0] not in mode_map:
        raise ConfigError(f"bad scenario name {name!r}: unknown mode")
    mode = mode_map[parts[0]]
    attack = "none"
    knowledge = base.knowledge
    if len(parts) >= 2:
        if parts[1] not in attack_map:
            raise ConfigError(f"bad scenario name {name!r}: unknown attack")
        attack = attack_map[parts[1]]
    if len(parts) >= 3:
        if parts[2] not in KNOWLEDGE:
            raise ConfigError(f"bad scenario name {name!r}: unknown knowledge")
        knowledge = parts[2]
    if attack == "none":
        knowledge = "internal"
    if mode == "UM":
        knowledge = "internal"  # external and internal UM are the same
    return replace(base, mode=mode, attack=attack,
                   knowledge=knowledge).normalized()

"""Run configuration: INI file with sections, overridden by command-line flags.

Precedence, lowest to highest: built-in defaults, the ``--config`` file,
explicit command-line flags. Unknown sections or keys are errors.

    [run]      seed, variant
    [paths]    trace, embedding_table, checkpoint, out_dir, store_dir
    [train]    any TrainConfig field except the variant flags
    [sim]      any SimConfig field (tier_capacities as "5,7,8")
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .caching import SimConfig
from .model import TrainConfig, Variant

_VARIANT_KEYS = {"aggregator", "semantics", "structure_semantics", "memory"}
TRAIN_KEYS = {f.name: f for f in fields(TrainConfig) if f.name not in _VARIANT_KEYS | {"seed"}}
SIM_KEYS = {f.name: f for f in fields(SimConfig)}
PATH_KEYS = ("trace", "embedding_table", "checkpoint", "out_dir", "store_dir")
RUN_KEYS = ("seed", "variant")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    variant: str = "TGN-L"
    paths: dict[str, str] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed).with_variant(Variant.parse(self.variant))

    def path(self, key: str, default: str | None = None) -> str | None:
        return self.paths.get(key, default)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["run"] = {"command": self.command, "seed": str(self.seed), "variant": self.variant}
        cp["paths"] = {k: str(v) for k, v in sorted(self.paths.items())}
        cp["train"] = {k: _fmt(getattr(self.train, k)) for k in TRAIN_KEYS}
        cp["sim"] = {k: _fmt(getattr(self.sim, k)) for k in SIM_KEYS}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, out_dir: str | Path, name: str = "resolved_config.ini") -> Path:
        p = Path(out_dir) / name
        p.write_text(self.to_ini(), encoding="utf-8")
        return p


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(text: str, typ, key: str):
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if "bool" in t:
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if "tuple" in t:
            return tuple(int(x) for x in text.split(",") if x.strip())
        if "int" in t:
            return int(text)
        if "float" in t:
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def load_run_config(path: str | Path | None = None, overrides: dict | None = None,
                    command: str = "") -> RunConfig:
    """Defaults, then the INI file, then ``overrides`` (``section.key`` or run key)."""
    values: dict[str, dict[str, str]] = {"run": {}, "paths": {}, "train": {}, "sim": {}}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keys such as d_T are case-sensitive
        cp.read(p, encoding="utf-8")
        for section in cp.sections():
            if section not in values:
                raise ConfigError(f"unknown config section [{section}]")
            values[section].update(cp[section])
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        section, _, name = key.rpartition(".")
        if (section or "run") not in values:
            raise ConfigError(f"unknown config section [{section}]")
        values[section or "run"][name] = str(v)

    allowed = {"run": set(RUN_KEYS) | {"command"}, "paths": set(PATH_KEYS),
               "train": set(TRAIN_KEYS), "sim": set(SIM_KEYS)}
    for section, kv in values.items():
        bad = set(kv) - allowed[section]
        if bad:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(bad)}")

    train = TrainConfig(**{k: _coerce(v, TRAIN_KEYS[k].type, k) for k, v in values["train"].items()})
    sim = SimConfig(**{k: _coerce(v, SIM_KEYS[k].type, k) for k, v in values["sim"].items()})
    run = values["run"]
    variant = run.get("variant", "TGN-L")
    Variant.parse(variant)
    return RunConfig(command=command or run.get("command", ""),
                     seed=_coerce(run.get("seed", "0"), "int", "seed"),
                     variant=variant, paths=dict(values["paths"]), train=train, sim=sim)

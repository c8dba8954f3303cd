"""Run configuration: an INI file with a [system] section, per-command sections and
command-line overrides (flags win)."""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

from .hilbert import SystemParams

COMMANDS = ("steady", "gap", "spectrum", "qfunc", "meanfield", "cumulant", "pca", "trajectory",
            "scan", "fit")

SYSTEM_DEFAULTS = {"omega0": 1.0, "Omega": 1200.0, "lambda_ratio": 1.4, "kappa": 0.5, "gamma": 0.05}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    command: str
    params: SystemParams
    fock_cutoff: int | None = None           # None = automatic
    options: dict = field(default_factory=dict)
    output_dir: Path = Path("out")
    seed: int = 0
    cache_dir: Path | None = None
    threads: int = 1

    def as_dict(self) -> dict:
        return {
            "command": self.command,
            "system": {**{k: getattr(self.params, k) for k in ("omega0", "Omega", "kappa", "gamma")},
                       "lambda_ratio": self.params.lambda_ratio,
                       "lam": self.params.lam,
                       "fock_cutoff": "auto" if self.fock_cutoff is None else self.fock_cutoff},
            "options": dict(self.options),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "cache_dir": None if self.cache_dir is None else str(self.cache_dir),
            "threads": self.threads,
        }

    def to_ini(self) -> str:
        """Canonical serialized form; ``load`` of this text rebuilds the same config."""
        d = self.as_dict()
        cp = _parser()
        cp["system"] = {k: repr(v) if isinstance(v, float) else str(v)
                        for k, v in d["system"].items() if k != "lam"}
        cp["run"] = {"output_dir": d["output_dir"], "seed": str(self.seed), "threads": str(self.threads)}
        if self.cache_dir is not None:
            cp["run"]["cache_dir"] = d["cache_dir"]
        if self.options:
            cp[self.command] = {k: str(v) for k, v in self.options.items()}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str     # keep "Omega" distinct from "omega0"
    return cp


def _float(key, text) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a number, got {text!r}") from None
    if not math.isfinite(v):
        raise ConfigError(key, "must be finite")
    return v


def _int(key, text) -> int:
    try:
        return int(str(text))
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {text!r}") from None


def parse_cutoff(text) -> int | None:
    if text is None or str(text).strip().lower() == "auto":
        return None
    n = _int("fock_cutoff", text)
    if n < 2:
        raise ConfigError("fock_cutoff", "must be >= 2 or 'auto'")
    return n


def load(command: str, path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, the INI file (if any) and ``overrides``; validate everything."""
    if command not in COMMANDS:
        raise ConfigError("command", f"unknown command {command!r}")
    cp = _parser()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {p}")
        try:
            cp.read(p)
        except configparser.Error as exc:
            raise ConfigError("config", str(exc)) from None
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    system = dict(SYSTEM_DEFAULTS)
    system["fock_cutoff"] = "auto"
    if cp.has_section("system"):
        for k, v in cp["system"].items():
            if k not in system:
                raise ConfigError(f"system.{k}", "unknown key")
            system[k] = v
    for k in list(system):
        if k in overrides:
            system[k] = overrides.pop(k)
    values = {k: _float(k, system[k]) for k in SYSTEM_DEFAULTS}
    try:
        params = SystemParams.from_ratio(values["lambda_ratio"], omega0=values["omega0"], Omega=values["Omega"],
                                         kappa=values["kappa"], gamma=values["gamma"])
    except ValueError as exc:
        bad = str(exc).split()[0]
        bad = "lambda_ratio" if bad == "lam" else bad
        raise ConfigError(bad, str(exc)) from None
    fock_cutoff = parse_cutoff(system["fock_cutoff"])

    run = dict(cp["run"]) if cp.has_section("run") else {}
    for k in ("output_dir", "seed", "cache_dir", "threads"):
        if k in overrides:
            run[k] = overrides.pop(k)
    unknown = set(run) - {"output_dir", "seed", "cache_dir", "threads"}
    if unknown:
        raise ConfigError(f"run.{sorted(unknown)[0]}", "unknown key")
    seed = _int("seed", run.get("seed", 0))
    if seed < 0:
        raise ConfigError("seed", "must be >= 0")
    threads = _int("threads", run.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads", "must be >= 1")
    out = Path(run.get("output_dir", "out"))
    if out.exists() and not out.is_dir():
        raise ConfigError("output_dir", f"{out} exists and is not a directory")
    cache = run.get("cache_dir")

    options = dict(cp[command]) if cp.has_section(command) else {}
    options.update(overrides)
    return RunConfig(command, params, fock_cutoff, options, out, seed,
                     Path(cache) if cache else None, threads)

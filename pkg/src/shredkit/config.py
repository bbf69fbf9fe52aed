"""INI experiment configuration with typed keys and line-numbered errors."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from importlib import resources
from pathlib import Path

from .surrogate import SurrogateConfig


class ConfigError(ValueError):
    pass


def _as_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _as_list(kind):
    def parse(text: str):
        return tuple(kind(v.strip()) for v in text.split(",") if v.strip())
    parse.__name__ = f"list[{kind.__name__}]"
    return parse


_PHYSICS = ("reflector_thickness", "length_x", "length_y", "substeps", "u0", "d_flux", "d_temp",
            "d_prec", "reactivity", "reflector_absorption", "feedback", "t_ref", "heat_source",
            "heat_sink", "t_cold", "sink_flow_exponent", "precursor_yield", "precursor_decay",
            "steady_tol", "steady_max_steps")
_SURROGATE_DEFAULTS = SurrogateConfig()

SCHEMA = {
    "run": {"seed": (int, 0)},
    "surrogate": {
        "nx": (int, 64), "ny": (int, 128), "n_params": (int, 9),
        "tau_min": (float, 1.0), "tau_max": (float, 10.0), "tau_spacing": (str, "geometric"),
        "n_steps": (int, 200), "dt": (float, 0.05), "holdout_interior": (_as_bool, True),
        **{k: (type(getattr(_SURROGATE_DEFAULTS, k)), getattr(_SURROGATE_DEFAULTS, k))
           for k in _PHYSICS},
    },
    "compression": {
        "method": (str, "randomized"), "energy_tol": (float, 1e-4), "r_cap": (int, 10),
        "oversample": (int, 10), "power_iters": (int, 2),
    },
    "sensing": {
        "noise_sigma": (float, 0.01), "lag": (int, 50), "pool_fixed": (int, 10),
        "pool_mobile_sensor": (int, 30), "pool_probes": (int, 10),
        "noise_augmentation": (_as_bool, True), "probe_input": (str, "velocity"),
    },
    "train": {
        "lr": (float, 1e-3), "batch_size": (int, 64), "max_epochs": (int, 150),
        "patience": (int, 40), "clip": (float, 5.0), "dropout": (float, 0.1),
        "standardize_inputs": (_as_bool, True), "standardize_probe_inputs": (_as_bool, False),
        "use_tau": (_as_bool, False),
    },
    "ensemble": {
        "L": (int, 10),
        "strategies": (_as_list(str), ("FIXED_OUTCORE", "MOBILE_SENSOR", "MOBILE_PROBES")),
        "sweep_L": (_as_list(int), (2, 4, 6, 8, 10, 20, 30)),
    },
    "report": {"contour_steps": (_as_list(int), (0, 100, 199))},
}

# keys that do not change any trained member; they are left out of the
# experiment hash so runs with different L or strategy lists share members
_RUN_ONLY = {("ensemble", "L"), ("ensemble", "strategies"), ("ensemble", "sweep_L"),
             ("report", "contour_steps")}


def defaults() -> dict:
    return {sec: {k: v[1] for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].split(":", 1)[0].strip() == key:
            return no
    return None


def _convert(section, key, raw, where=""):
    kind = SCHEMA[section][key][0]
    try:
        return kind(raw.strip()) if kind is not str else raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}[{section}] {key}: {exc}") from None


def builtin_config(name: str) -> str:
    return resources.files("shredkit").joinpath("configs", f"{name}.ini").read_text()


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Parse an INI file (or a built-in name such as ``default``/``ci``) over the
    defaults, then apply ``section.key=value`` overrides."""
    cfg = defaults()
    if path is not None:
        p = Path(path)
        if p.exists():
            text, label = p.read_text(), str(p)
        else:
            try:
                text, label = builtin_config(str(path)), f"<builtin {path}>"
            except (FileNotFoundError, OSError):
                raise ConfigError(f"config file not found: {path}") from None
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=label)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{label}: line {_line_of_section(text, section)}: "
                                  f"unknown section [{section}]")
            for key, raw in parser.items(section):
                line = _line_of(text, section, key)
                where = f"{label}: line {line}: "
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{where}unknown key {key!r} in [{section}]")
                cfg[section][key] = _convert(section, key, raw, where)
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot or section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"bad override {item!r}; expected section.key=value")
        cfg[section][key] = _convert(section, key, raw, "--set ")
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
    validate(cfg)
    return cfg


def _line_of_section(text, section):
    for no, line in enumerate(text.splitlines(), 1):
        if line.strip() == f"[{section}]":
            return no
    return "?"


def validate(cfg: dict) -> None:
    s = cfg["surrogate"]
    if s["n_params"] < 3:
        raise ConfigError("[surrogate] n_params must be at least 3")
    if s["tau_spacing"] not in ("geometric", "linear"):
        raise ConfigError("[surrogate] tau_spacing must be geometric or linear")
    if cfg["sensing"]["probe_input"] not in ("velocity", "position"):
        raise ConfigError("[sensing] probe_input must be velocity or position")
    if cfg["compression"]["method"] not in ("randomized", "incremental", "hierarchical", "dense"):
        raise ConfigError("[compression] unknown method")
    e = cfg["ensemble"]
    if e["L"] < 2:
        raise ConfigError("[ensemble] L must be at least 2")
    from .sensing import Strategy
    for name in e["strategies"]:
        try:
            Strategy(name)
        except ValueError:
            raise ConfigError(f"[ensemble] unknown strategy {name!r}") from None


def surrogate_config(cfg: dict) -> SurrogateConfig:
    import numpy as np

    s = cfg["surrogate"]
    space = np.geomspace if s["tau_spacing"] == "geometric" else np.linspace
    taus = tuple(float(t) for t in space(s["tau_min"], s["tau_max"], s["n_params"]))
    fields = {f.name for f in dataclasses.fields(SurrogateConfig)}
    kw = {k: v for k, v in s.items() if k in fields}
    return SurrogateConfig(tau_list=taus, seed=cfg["run"]["seed"], **kw)


def _canonical(cfg: dict, skip=()) -> str:
    flat = {f"{sec}.{k}": (list(v) if isinstance(v, tuple) else v)
            for sec, keys in cfg.items() for k, v in keys.items() if (sec, k) not in skip}
    return json.dumps(flat, sort_keys=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(_canonical(cfg).encode()).hexdigest()[:12]


def experiment_hash(cfg: dict) -> str:
    """Hash of everything that shapes data, bases and trained members."""
    return hashlib.sha256(_canonical(cfg, _RUN_ONLY).encode()).hexdigest()[:12]


def dump_config(cfg: dict) -> str:
    lines = []
    for sec, keys in cfg.items():
        lines.append(f"[{sec}]")
        for k, v in keys.items():
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)

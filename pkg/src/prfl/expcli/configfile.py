"""INI-style experiment files: ``[section]`` headers and ``key = value`` lines.

Every key is optional; unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
from pathlib import Path
from typing import Callable

from ..config import DatasetConfig, ExperimentConfig, ModelConfig, PartitionConfig
from ..dpd import DpdConfig
from ..errors import ConfigurationError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())


def _opt_str(text: str):
    return text.strip() or None


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "auto", "none") else int(text)


def _opt_ints(text: str):
    return None if text.strip().lower() in ("", "auto", "none") else _ints(text)


# section -> key -> (field name, parser)
SCHEMA: dict[str, dict[str, tuple[str, Callable]]] = {
    "experiment": {
        "seed": ("seed", int),
        "rounds": ("rounds", int),
        "local_steps": ("local_steps", int),
        "lr": ("lr", float),
        "batch_size": ("batch_size", int),
        "clients": ("clients", int),
        "participation_ratio": ("participation_ratio", float),
        "strategy": ("strategy", str.strip),
        "dp_tau": ("dp_tau", float),
        "downlink_compress": ("downlink_compress", _bool),
        "aux_matrix": ("aux_matrix", _bool),
        "latent_loss": ("latent_loss", _bool),
        "output_dir": ("output_dir", _opt_str),
    },
    "model": {
        "kind": ("kind", str.strip),
        "hidden_width": ("hidden_width", _opt_int),
        "channels": ("channels", _ints),
    },
    "dpd": {
        "alpha": ("alpha", float),
        "mode": ("mode", str.strip),
        "aic_window": ("aic_window", int),
        "calib_size": ("calib_size", int),
        "min_compress_elems": ("min_compress_elems", int),
    },
    "partition": {
        "kind": ("kind", str.strip),
        "lambda": ("lam", float),
        "classes_per_client": ("classes_per_client", int),
    },
    "dataset": {
        "kind": ("kind", str.strip),
        "path": ("path", _opt_str),
        "num_classes": ("num_classes", int),
        "dims": ("dims", _opt_ints),
        "n_per_class": ("n_per_class", int),
        "spread": ("spread", float),
        "separation": ("separation", float),
    },
}


def _read(text: str, source: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                   comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
                                   strict=True, default_section="__defaults__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}: key outside any [section]", line=exc.lineno) from exc
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigurationError(f"{source}:{lineno}: cannot parse line", line=lineno) from exc
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}: {exc.message}", line=exc.lineno) from exc
    raw: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown section [{section}]", key=section)
        for key, value in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]", key=key)
            raw.setdefault(section, {})[key] = value
    return raw


def apply_overrides(raw: dict[str, dict[str, str]], overrides) -> dict[str, dict[str, str]]:
    """Apply ``key=value`` or ``section.key=value`` strings."""
    raw = {s: dict(v) for s, v in raw.items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = (t.strip() for t in item.split("=", 1))
        if "." in key:
            section, key = key.split(".", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigurationError(f"unknown key {section}.{key}", key=key)
        else:
            hits = [s for s in SCHEMA if key in SCHEMA[s]]
            if not hits:
                raise ConfigurationError(f"unknown key {key!r}", key=key)
            if len(hits) > 1:
                raise ConfigurationError(f"key {key!r} is ambiguous; use one of "
                                         + ", ".join(f"{s}.{key}" for s in hits), key=key)
            section = hits[0]
        raw.setdefault(section, {})[key] = value
    return raw


def build_config(raw: dict[str, dict[str, str]]) -> ExperimentConfig:
    parsed: dict[str, dict] = {}
    for section, items in raw.items():
        for key, value in items.items():
            field_name, conv = SCHEMA[section][key]
            try:
                parsed.setdefault(section, {})[field_name] = conv(value)
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key!r}: {value!r}", key=key) from exc
    try:
        return ExperimentConfig(
            **parsed.get("experiment", {}),
            dpd=DpdConfig(**parsed.get("dpd", {})),
            partition=PartitionConfig(**parsed.get("partition", {})),
            model=ModelConfig(**parsed.get("model", {})),
            dataset=DatasetConfig(**parsed.get("dataset", {})),
        )
    except ConfigurationError as exc:
        if exc.key == "lam":
            exc.key = "lambda"
        raise


def parse_config(path, overrides=None) -> ExperimentConfig:
    text = Path(path).read_text() if path is not None else ""
    return build_config(apply_overrides(_read(text, str(path)), overrides))


def parse_config_text(text: str, overrides=None) -> ExperimentConfig:
    return build_config(apply_overrides(_read(text, "<string>"), overrides))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config in the same format ``parse_config`` reads."""
    objs = {"experiment": cfg, "model": cfg.model, "dpd": cfg.dpd,
            "partition": cfg.partition, "dataset": cfg.dataset}
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (field_name, _) in keys.items():
            lines.append(f"{key} = {_fmt(getattr(objs[section], field_name))}")
        lines.append("")
    return "\n".join(lines)

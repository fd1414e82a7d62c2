"""Flat ``key = value`` run configuration.

Precedence, lowest first: built-in defaults, config file, ``METATNE_<KEY>``
environment variables, command-line flags.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError
from .tasks import TaskShape
from .training import ScheduleConfig, TrainConfig
from .transform import TransformConfig

ENV_PREFIX = "METATNE_"


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


# key -> (parser, default)
FIELDS: dict[str, tuple[Any, Any]] = {
    # transformation
    "d": (int, 128),
    "d_prime": (int, 128),
    "heads": (int, 2),
    "d_ff": (int, 256),
    "blocks": (int, 1),
    "p_drop": (float, 0.1),
    "ln_epsilon": (float, 1e-5),
    "activation": (str, "relu"),
    # schedule
    "total_steps": (int, 10000),
    "gamma": (float, 0.1),
    "decay_period": (int, 1000),
    # training
    "n1": (int, 1024),
    "n2": (int, 64),
    "n_neg": (int, 5),
    "lr_struct": (float, 1e-3),
    "lr_meta": (float, 1e-3),
    "lam": (float, 0.01),
    "k_support_pos": (int, 10),
    "k_support_neg": (int, 20),
    "k_query_pos": (int, 10),
    "k_query_neg": (int, 20),
    "noise_exponent": (float, 0.75),
    "struct_optimizer": (str, "adam"),
    "eval_every": (_optional_int, None),
    "n_val_tasks": (int, 200),
    "threshold": (float, 0.5),
    "threads": (int, 1),
    "log_every": (int, 100),
    "max_skips": (int, 10),
    "seed": (int, 0),
    # label split
    "ratio_train": (float, 0.6),
    "ratio_val": (float, 0.2),
    "ratio_test": (float, 0.2),
}

ALIASES = {"lambda": "lam"}


def _canonical(key: str) -> str:
    key = key.strip().lower().replace("-", "_")
    return ALIASES.get(key, key)


def parse_value(key: str, text: str) -> Any:
    key = _canonical(key)
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    parser = FIELDS[key][0]
    try:
        return parser(text.strip()) if isinstance(text, str) else parser(text)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[_canonical(key)] = parse_value(key, value)
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = _canonical(name[len(ENV_PREFIX):])
        if key in FIELDS:
            out[key] = parse_value(key, value)
    return out


def resolve(
    config_file: str | Path | None = None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    """Merge every configuration layer into one flat dict."""
    values = {k: default for k, (_, default) in FIELDS.items()}
    if config_file is not None:
        values.update(read_config_file(config_file))
    values.update(env_overrides(environ))
    for key, value in (flags or {}).items():
        if value is not None:
            values[_canonical(key)] = value
    return values


def write_config(values: Mapping[str, Any], stream) -> None:
    for key in FIELDS:
        value = values[key]
        stream.write(f"{key} = {'none' if value is None else value}\n")


def task_shape(values: Mapping[str, Any]) -> TaskShape:
    try:
        return TaskShape(values["k_support_pos"], values["k_support_neg"],
                         values["k_query_pos"], values["k_query_neg"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def transform_config(values: Mapping[str, Any]) -> TransformConfig:
    return TransformConfig(
        values["d"], values["d_prime"], values["heads"], values["d_ff"], values["blocks"],
        values["p_drop"], values["ln_epsilon"], values["activation"],
    )


def schedule_config(values: Mapping[str, Any]) -> ScheduleConfig:
    return ScheduleConfig(values["total_steps"], values["gamma"], values["decay_period"])


def train_config(values: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig(
        n1=values["n1"], n2=values["n2"], n_neg=values["n_neg"],
        lr_struct=values["lr_struct"], lr_meta=values["lr_meta"], lam=values["lam"],
        shape=task_shape(values), seed=values["seed"],
        noise_exponent=values["noise_exponent"], struct_optimizer=values["struct_optimizer"],
        eval_every=values["eval_every"], n_val_tasks=values["n_val_tasks"],
        threshold=values["threshold"], threads=values["threads"],
        log_every=values["log_every"], max_skips=values["max_skips"],
    )


def split_ratio(values: Mapping[str, Any]) -> tuple[float, float, float]:
    return values["ratio_train"], values["ratio_val"], values["ratio_test"]


def flag_names(keys: Iterable[str] = FIELDS) -> list[str]:
    return ["--" + k.replace("_", "-") for k in keys]

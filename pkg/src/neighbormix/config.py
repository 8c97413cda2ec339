# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""Functions to handle config files."""

from __future__ import annotations

import os.path
import typing as t
from collections.abc import Iterable, Mapping, Sequence

import perky  # type: ignore[import]
import pydantic as p

from .logging import log
from .pydantic import get_formatted_error_messages
from .schemas.context import AppContext, LibContext
from .schemas.experiment import ExperimentConfig

if t.TYPE_CHECKING:
    from _typeshed import StrPath

mlog = log.fields(mod=__name__)

#: System config file location.
SYSTEM_CONFIG_FILE = "/etc/neighbormix.cfg"

#: Per-user config file location.
USER_CONFIG_FILE = "~/.neighbormix.cfg"


class ConfigError(Exception):
    """Invalid configuration: a config file, a value, or a combination of values."""


def find_config_files(conf_files: Iterable[StrPath]) -> list[str]:
    """
    Find all config files that exist.

    :arg conf_files: An iterable of config filenames to search for.
    :returns: A List of filenames which actually existed on the system.
    """
    flog = mlog.fields(func="find_config_files")
    flog.fields(conf_files=conf_files).debug("Enter")

    paths = [os.path.abspath(p) for p in conf_files]
    config_files = [str(conf_path) for conf_path in paths if os.path.exists(conf_path)]
    flog.fields(paths=config_files).info("Paths found")

    flog.debug("Leave")
    return config_files


def split_config(config: Mapping) -> tuple[dict, dict, dict]:
    """
    Split flat configuration into lib context, app context and experiment settings.
    """
    lib_fields = set(LibContext.model_fields)
    app_fields = set(AppContext.model_fields)
    lib: dict = {}
    app: dict = {}
    experiment: dict = {}
    for key, value in config.items():
        if key in lib_fields:
            lib[key] = value
        elif key in app_fields:
            app[key] = value
        else:
            experiment[key] = value
    return lib, app, experiment


def experiment_from_flat(
    values: Mapping, source: str = "configuration"
) -> ExperimentConfig:
    """
    Validate flat experiment settings.

    :arg values: ``key -> value`` settings from config files and command line overrides.
    :kwarg source: Where the values came from, for error messages.
    :raises ConfigError: naming the offending key.
    """
    try:
        return ExperimentConfig.from_flat(values)
    except KeyError as exc:
        raise ConfigError(f"Unknown key {exc.args[0]!r} in {source}") from exc
    except p.ValidationError as exc:
        messages = "\n".join(get_formatted_error_messages(exc))
        raise ConfigError(f"Invalid values in {source}:\n{messages}") from exc


def dump_experiment(experiment: ExperimentConfig) -> str:
    """
    Serialize experiment settings as a config file that :func:`load_config` reads back.
    """
    return perky.dumps(experiment.to_flat())


def validate_config(
    config: Mapping, filenames: Sequence[StrPath], allow_experiment: bool = True
) -> None:
    """
    Validate configuration.

    Splits the configuration loaded from one or more files into its lib context, app context and
    experiment parts and validates each with its model.  Raises a :obj:`ConfigError` if
    validation fails.
    """
    joined_filenames = ", ".join(f"{fn}" for fn in filenames) or "defaults"
    lib, app, experiment = split_config(config)
    if experiment and not allow_experiment:
        raise ConfigError(
            f"Experiment settings ({', '.join(sorted(experiment))}) are not allowed in"
            f" {joined_filenames}"
        )
    # The models are discarded; the contexts apply the defaults later.
    try:
        LibContext.model_validate(lib)
        AppContext.model_validate(app)
    except p.ValidationError as exc:
        messages = "\n".join(get_formatted_error_messages(exc))
        raise ConfigError(
            f"Error while parsing configuration from {joined_filenames}:\n{messages}"
        ) from exc
    experiment_from_flat(experiment, joined_filenames)


def _load_config_file(filename: StrPath) -> Mapping:
    """
    Load configuration from one file and return the raw data.
    """
    try:
        return perky.load(filename)
    except OSError as exc:
        raise ConfigError(
            f"Error while loading configuration from {filename}: {exc}"
        ) from exc
    except perky.PerkyFormatError as exc:
        raise ConfigError(
            f"Error while parsing configuration from {filename}:\n{exc}"
        ) from exc


def load_config(conf_files: Iterable[str] | str | None = None) -> dict:
    """
    Load configuration.

    Configuration is loaded from a system-wide location, a per-user location, and then any files
    specified in the ``conf_files`` parameter.  Toplevel keys in later files overwrite the same
    keys in earlier files.  The implicit files may only carry lib and app context keys, so that
    a stray user file cannot silently change an experiment.

    :arg conf_files: An iterable of conf_files to load configuration information from.
    :returns: A dict containing the configuration.
    """
    flog = mlog.fields(func="load_config")
    flog.debug("Enter")

    if isinstance(conf_files, str):
        conf_files = (conf_files,)
    elif conf_files is None:
        conf_files = ()

    implicit_files = find_config_files(
        (SYSTEM_CONFIG_FILE, os.path.expanduser(USER_CONFIG_FILE))
    )
    explicit_files = find_config_files(conf_files)

    flog.fields(implicit_files=implicit_files, explicit_files=explicit_files).debug(
        "found config files"
    )

    cfg: dict = {}
    for filename in implicit_files:
        cfg.update(_load_config_file(filename))
    validate_config(cfg, implicit_files, allow_experiment=False)

    for filename in explicit_files:
        cfg.update(_load_config_file(filename))
    validate_config(cfg, implicit_files + explicit_files)

    flog.fields(config=cfg).debug("Leave")
    return cfg

"""
This module reads and writes the JSON configuration files (``procgen.json``,
``scan.json``, ``train.json``) and turns them into the frozen dataclasses the
rest of the pipeline uses.

>>> import scansim
>>> cfg = load_config("scan.json", scansim.ScanConfig)
>>> cfg.thresh_mean
0.7
"""

import dataclasses
import json
import os

from errors import ConfigError

# The directory holding the shipped default configuration files
CONFIG_DIR = os.path.dirname(os.path.abspath(__file__))


def _coerce(value, default):
    """
    Converts a JSON value to the shape of the dataclass default it replaces.
    Lists become tuples so that the frozen dataclasses stay hashable.
    """
    if isinstance(value, list):
        return tuple(_coerce(v, None) for v in value)
    if isinstance(value, dict):
        return {k: _coerce(v, None) for k, v in value.items()}
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_dict(data, cls):
    """
    Builds a configuration dataclass from a dictionary.

    :param data: the parsed JSON object
    :type data: dict

    :param cls: the configuration dataclass
    :type cls: type

    :return: an instance of ``cls``
    :rtype: cls

    :raises ConfigError: if ``data`` has unknown keys or violates an invariant
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} config must be a JSON object")

    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")

    kwargs = {}
    for name, value in data.items():
        field = fields[name]
        default = field.default if field.default is not dataclasses.MISSING else None
        kwargs[name] = _coerce(value, default)

    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def to_dict(cfg):
    """
    Converts a configuration dataclass to plain JSON types.

    :param cfg: a configuration dataclass instance
    :type cfg: dataclass

    :return: a JSON-compatible dictionary
    :rtype: dict
    """
    def plain(v):
        if isinstance(v, (tuple, list)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return {f.name: plain(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def load_config(path, cls):
    """
    Loads a JSON configuration file into ``cls``. Relative paths that do not
    exist are looked up in the repository root, where the defaults live.

    :param path: path to the JSON file
    :type path: str

    :param cls: the configuration dataclass
    :type cls: type

    :return: an instance of ``cls``
    :rtype: cls
    """
    if not os.path.exists(path) and not os.path.isabs(path):
        path = os.path.join(CONFIG_DIR, path)

    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e

    return from_dict(data, cls)


def dump_config(cfg, path):
    """
    Writes a configuration dataclass as sorted, indented JSON.

    :param cfg: a configuration dataclass instance
    :type cfg: dataclass

    :param path: the output path
    :type path: str
    """
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=4, sort_keys=True)
        f.write("\n")

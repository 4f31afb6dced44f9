"""Flat key=value config files.

One key per line, keys named exactly after the dataclass fields; blank
lines and '#' comments are ignored.  Unknown or unparseable keys raise
ConfigError carrying the line number.
"""

import dataclasses

from .errors import ConfigError


def read_kv_file(path):
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, "
                                  f"got {line!r}")
            key, _, value = line.partition("=")
            entries.append((lineno, key.strip(), value.strip()))
    return entries


def _convert(key, text, target_type, lineno, path):
    try:
        if target_type is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is str:
            return text
        if target_type is tuple:
            if not text or text.lower() in ("auto", "none"):
                return None
            return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(
            f"{path}:{lineno}: cannot parse {key}={text!r}") from exc
    raise ConfigError(f"{path}:{lineno}: unsupported type for key {key}")


def build_config(cls, path, required=(), overrides=None, field_types=None):
    """Instantiate dataclass ``cls`` from a key=value file.

    ``field_types`` overrides the parse type per key (needed for
    optional fields whose annotation is not a plain type).  ``overrides``
    are applied after the file (CLI flags beat file values).
    """
    names = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for lineno, key, text in read_kv_file(path):
        if key not in names:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        ftype = (field_types or {}).get(key, names[key].type)
        if isinstance(ftype, str):
            ftype = {"int": int, "float": float, "bool": bool,
                     "str": str, "tuple": tuple}.get(ftype, str)
        values[key] = _convert(key, text, ftype, lineno, path)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    for key in required:
        if key not in values:
            raise ConfigError(f"{path}: missing required key {key!r}")
    return cls(**values)

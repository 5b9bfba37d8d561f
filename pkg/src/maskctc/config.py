"""Flat ``key = value`` config files typed by a dataclass.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Values are parsed with the type of the matching dataclass field, so
``epochs = 20`` becomes an int and ``recompute_c = true`` a bool.
"""
import dataclasses
import typing


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _base_type(tp):
    if isinstance(tp, str):
        tp = {"int": int, "float": float, "str": str, "bool": bool}.get(tp, tp)
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def parse_value(raw, tp, key="value"):
    tp, optional = _base_type(tp)
    raw = raw.strip()
    if optional and raw.lower() in ("none", "null", ""):
        return None
    try:
        if tp is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {tp!r}")


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints.get(f.name, f.type) for f in dataclasses.fields(cls)}


def parse_text(text, cls):
    """Raw ``{key: value}`` pairs from config text, typed by ``cls``."""
    types = _field_types(cls)
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = parse_value(raw, types[key], key)
    return out


def build(cls, file_values=None, overrides=None):
    """Dataclass instance from defaults, then file values, then non-None overrides."""
    types = _field_types(cls)
    values = dict(file_values or {})
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in types:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = parse_value(v, types[k], k) if isinstance(v, str) else v
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load(path, cls, overrides=None):
    file_values = {}
    if path is not None:
        with open(path) as fh:
            file_values = parse_text(fh.read(), cls)
    return build(cls, file_values, overrides)


def dump(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"

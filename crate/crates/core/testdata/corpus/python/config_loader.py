import os
import json

DEFAULTS = {"host": "localhost", "port": 8080, "debug": False, "workers": 4}


class ConfigError(Exception):
    pass


def parse_bool(value):
    if isinstance(value, bool):
        return value
    if value.lower() in ("1", "true", "yes", "on"):
        return True
    if value.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError("invalid boolean: %s" % value)


def from_env(prefix="APP_"):
    result = {}
    for key, value in os.environ.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):].lower()
        result[name] = value
    return result


def coerce(config):
    out = dict(config)
    out["port"] = int(out["port"])
    out["workers"] = max(1, int(out["workers"]))
    out["debug"] = parse_bool(out["debug"])
    return out


def load(path=None, env=True):
    config = dict(DEFAULTS)
    if path is not None:
        with open(path) as handle:
            config.update(json.load(handle))
    if env:
        config.update(from_env())
    unknown = sorted(set(config) - set(DEFAULTS))
    if unknown:
        raise ConfigError("unknown keys: %s" % ", ".join(unknown))
    return coerce(config)


def describe(config):
    lines = []
    for key in sorted(config):
        lines.append("%s = %r" % (key, config[key]))
    return "\n".join(lines)

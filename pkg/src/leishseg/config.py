"""Flat ``key = value`` run configuration with typed defaults and presets.

Precedence: command-line overrides > config file > preset > defaults.
"""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


# key -> (type, default). Defaults follow the reference training setup where it
# states one; the model defaults to the desk-scale size.
SCHEMA = {
    "seed": (int, 0),
    "dtype": (str, "float64"),
    # synthetic data
    "n_images": (int, 45),
    "n_train": (int, 37),
    "n_val": (int, 4),
    "image_height": (int, 448),
    "image_width": (int, 448),
    "profile": (str, "reference"),
    "rosettes": (_bool, False),
    "noise": (float, 0.03),
    # model
    "depth": (int, 2),
    "base_filters": (int, 8),
    # patches and sampling
    "patch_size": (int, 224),
    "stride": (int, 112),
    "stage1_epochs": (int, 40),
    "stage2_epochs": (int, 200),
    "parasite_threshold": (float, 0.40),
    "threshold_mode": (str, "sum"),
    "augment": (_bool, True),
    # optimiser
    "lr": (float, 1e-4),
    "batch_size": (int, 5),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "strict": (_bool, True),
    # post-processing and evaluation
    "size_k": (float, 3.0),
    "connectivity": (int, 8),
    "j_thresholds": (_floats, (0.25, 0.5, 0.75)),
    "eval_split": (str, "test"),
    "save_probs": (_bool, False),
}

MODEL_KEYS = ("depth", "base_filters", "dtype")

PRESETS = {
    # reference-size network; sampling and optimiser keep the defaults
    "full": {"depth": 4, "base_filters": 64},
    # small images, dense parasites, overlapping 32-pixel patches; one CPU core
    "desk": {
        "image_height": 96,
        "image_width": 96,
        "profile": "dense",
        "rosettes": True,
        "patch_size": 32,
        "stride": 16,
        "stage1_epochs": 30,
        "stage2_epochs": 30,
        "parasite_threshold": 0.25,
        "lr": 1e-3,
    },
}


def parse_value(key: str, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    typ = SCHEMA[key][0]
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    path = Path(path)
    for n, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            out[key] = value
            continue
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{n}: {exc}") from None
    return out


def write_config_file(path, config: dict) -> None:
    lines = [f"{k} = {format_value(config[k])}" for k in SCHEMA if k in config]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve(preset: str | None = None, file: str | Path | None = None,
            overrides: dict | None = None) -> tuple[dict, set]:
    """Merge the layers. Returns the resolved config and the set of keys that
    were set explicitly (by preset, file or override)."""
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    explicit = set()
    file_cfg = read_config_file(file) if file else {}
    preset = file_cfg.pop("preset", None) if preset is None else preset
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
        cfg.update(PRESETS[preset])
        explicit |= set(PRESETS[preset])
    file_cfg.pop("preset", None)
    cfg.update(file_cfg)
    explicit |= set(file_cfg)
    for k, v in (overrides or {}).items():
        cfg[k] = parse_value(k, v)
        explicit.add(k)
    return cfg, explicit

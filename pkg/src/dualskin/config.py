"""Flat INI run configuration with typed defaults and ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
import copy
import io
from pathlib import Path

from .exceptions import ConfigError, InputError

# every key a run understands, with its default; the type of the default is the key's type
DEFAULTS = {
    "model": {
        "input_size": 64,
        "base_channels": 16,
        "depth": 4,
        "initial_guidance_skin": 0.0,
        "initial_guidance_body": 0.0,
    },
    "loss": {
        "lambda1": 1e-4,
        "lambda2": 1e-3,
        "crf_sigma_color": 0.1,
        "crf_sigma_pos": 3.0,
        "crf_radius": 2,
        "wce_pairing": "matched_stage",
        "epsilon": 1e-6,
    },
    "training": {
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "batch_size": 8,
        "stage1_epochs": 30,
        "finetune_epochs": 20,
        "grad_stop": True,
        "mutual_guidance": True,
        "from_scratch": False,
        "seed": 0,
    },
    "augmentation": {
        "enabled": True,
        "flip_probability": 0.5,
        "scale_min": 1.0,
        "scale_max": 1.25,
    },
    "evaluation": {
        "threshold": 0.5,
    },
}


def _coerce(section, key, raw):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def resolve(path=None, overrides=()):
    """Defaults, then the INI file at ``path``, then ``section.key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg[section][key] = _coerce(section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key {lhs}")
        cfg[section][key] = _coerce(section, key, raw)
    return cfg


def dumps(cfg):
    parser = configparser.ConfigParser()
    for section in DEFAULTS:
        parser[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in cfg[section].items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write(cfg, path):
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def estimator_params(cfg):
    """Map a resolved run config onto ``MutualGuidanceSegmenter`` keyword arguments."""
    m, lo, t, a = cfg["model"], cfg["loss"], cfg["training"], cfg["augmentation"]
    return {
        "input_size": m["input_size"],
        "base_channels": m["base_channels"],
        "depth": m["depth"],
        "initial_guidance": (m["initial_guidance_skin"], m["initial_guidance_body"]),
        "lr": t["lr"],
        "betas": (t["beta1"], t["beta2"]),
        "batch_size": t["batch_size"],
        "stage1_epochs": t["stage1_epochs"],
        "finetune_epochs": t["finetune_epochs"],
        "grad_stop": t["grad_stop"],
        "mutual_guidance": t["mutual_guidance"],
        "from_scratch": t["from_scratch"],
        "lambda1": lo["lambda1"],
        "lambda2": lo["lambda2"],
        "crf_sigma_color": lo["crf_sigma_color"],
        "crf_sigma_pos": lo["crf_sigma_pos"],
        "crf_radius": lo["crf_radius"],
        "wce_pairing": lo["wce_pairing"],
        "epsilon": lo["epsilon"],
        "augment": a["enabled"],
        "flip_probability": a["flip_probability"],
        "scale_range": (a["scale_min"], a["scale_max"]),
        "random_state": t["seed"],
    }

"""Run configuration: defaults, file loading, and overrides.

One JSON file covers every subsystem (dataset, model, diffusion, training,
guidance, sampling, analysis, ablation, io).  Unknown keys anywhere are
rejected with the offending path, every key has a documented default, and
any value can be overridden from the command line with section.key=value
pairs.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import InvalidConfig, IoError

DEFAULTS: dict = {
    "dataset": {
        "kind": "gaussian_mixture",   # gaussian_mixture | bump_images
        "path": "data",               # dataset directory to write / read
        "n_modes": 8,
        "n_per_mode": 250,
        "spread": 0.1,
        "n_classes": 8,               # bump_images only
        "n_per_class": 128,           # bump_images only
        "image_size": 16,             # bump_images only
        "seed": 1234,
    },
    "model": {
        "patch_size": 4,
        "embed_dim": 64,
        "depth": 6,
        "heads": 4,
        "time_embed_dim": 32,
        "vector_tokens": 16,
        "mlp_ratio": 4,
        "init_seed": 42,
    },
    "diffusion": {
        "timesteps": 1000,
        "beta_start": 0.0001,
        "beta_end": 0.02,
        "schedule": "linear",
    },
    "training": {
        "epochs": 40,
        "batch_size": 64,
        "lr": 0.001,
        "cond_dropout": 0.1,
        "seed": 7,
    },
    "guidance": {
        "method": "none",             # none | cfg | tpg | pag | seg
        "gamma": None,                # null -> per-method default
        "layers": None,               # null -> middle third of the blocks
        "perturb": "shuffle",         # shuffle | sign_flip | walsh_hadamard | haar
        "seg_sigma": 1.0,
        "seed": 99,
    },
    "sampling": {
        "solver": "ddim",             # ddim | ddpm
        "steps": 50,
        "batch": 64,
        "cond": None,                 # null -> unconditional
        "seed": 1000,
        "trajectory": 0,              # > 0 -> save that many snapshots
    },
    "analysis": {
        "timesteps": 20,              # count of evenly spaced steps, or "t1,t2,..."
        "n_samples": 100,
        "methods": "none,tpg,pag,seg",
        "n_bins": 29,
        "max_radius": 0.7,
        "upscale": 8,
        "conditional": True,
        "seed": 5,
    },
    "ablate": {
        "n_sample": 256,
        "n_heldout": 512,
        "steps": 50,
        "solver": "ddim",
        "mmd_bandwidth": None,        # null -> median heuristic
        "seed": 0,
    },
    "io": {
        "threads": 0,                 # 0 -> GLAB_THREADS env var, else 1
    },
}


def _check_keys(given: dict, reference: dict, path: str = "") -> None:
    for key, val in given.items():
        where = f"{path}.{key}" if path else key
        if key not in reference:
            raise InvalidConfig(f"unknown config key {where!r}")
        if isinstance(reference[key], dict):
            if not isinstance(val, dict):
                raise InvalidConfig(f"config section {where!r} must be an object")
            _check_keys(val, reference[key], where)


def load_config(path=None) -> dict:
    """Defaults deep-merged with the optional JSON file at ``path``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        given = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IoError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(given, dict):
        raise InvalidConfig(f"{path}: top level must be an object")
    _check_keys(given, DEFAULTS)
    for section, values in given.items():
        cfg[section].update(values)
    return cfg


def _coerce(text: str, default):
    """Parse an override string against the type of the default value."""
    if text.lower() in ("null", "none"):
        return None
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise InvalidConfig(f"cannot parse {text!r} as a boolean")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(text)
        except ValueError as exc:
            raise InvalidConfig(f"cannot parse {text!r} as an integer") from exc
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError as exc:
            raise InvalidConfig(f"cannot parse {text!r} as a number") from exc
    if default is None:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return text


def apply_overrides(cfg: dict, pairs: list[str]) -> None:
    """Apply section.key=value strings in place, validating both halves."""
    for pair in pairs:
        if "=" not in pair:
            raise InvalidConfig(f"override {pair!r} is not of the form section.key=value")
        key, _, value = pair.partition("=")
        parts = key.split(".")
        if len(parts) != 2 or parts[0] not in DEFAULTS or parts[1] not in DEFAULTS[parts[0]]:
            raise InvalidConfig(f"unknown config key {key!r}")
        section, name = parts
        cfg[section][name] = _coerce(value, DEFAULTS[section][name])


def render_defaults() -> str:
    """Flat listing of every config key and its default, for help output."""
    lines = []
    for section, values in DEFAULTS.items():
        for name, val in values.items():
            shown = json.dumps(val)
            lines.append(f"  {section}.{name} = {shown}")
    return "\n".join(lines)

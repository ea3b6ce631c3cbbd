"""Run configuration: one flat namespace of every tunable, validated up front.

Values come from built-in defaults, then an optional ``key = value`` config
file, then command-line overrides, in that order. Unknown keys are rejected
outright so typos fail before any work starts. The defaults carry the
published training recipe (k=8, 100 px edge threshold, lr 2e-5, weight decay
1e-3, batch size 10).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .nucfeat import DEFAULT_NEIGHBOR_RADIUS_UM


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model dimensions
    d: int = 64
    gcn_hidden: int = 32
    heads: int = 4
    token_hidden: int = 8
    ff_mult: int = 2
    mil_hidden: int = 32
    classes: int = 3
    # graph and feature extraction
    k: int = 8
    threshold_px: float = 100.0
    glcm_levels: int = 8
    glcm_offsets: tuple = ((0, 1), (1, 0), (1, 1), (1, -1))
    neighbor_radius_um: float = DEFAULT_NEIGHBOR_RADIUS_UM
    # optimizer and schedule
    lr: float = 2e-5
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 10
    epochs: int = 30
    folds: int = 5
    test_frac: float = 0.2
    val_frac: float = 0.1
    # synthesis
    slides_per_class: int = 20
    patch_lo: int = 5
    patch_hi: int = 9
    nuclei_lo: int = 25
    nuclei_hi: int = 55
    embed_shift: float = 0.6
    embed_noise: float = 1.0
    comp_coupling: float = 0.6
    necrosis_rate: float = 0.05
    cluster_mean: float = 3.0
    cluster_std: float = 60.0
    cluster_class_mod: float = 0.5
    null_signal: bool = False
    # misc
    heatmap_sigma: float = 1.0
    seed: int = 7
    ablation: str = "F"

    def validate(self):
        if self.d < 2 or self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} must be >= 2 and divisible by heads={self.heads}")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if self.k < 1 or self.threshold_px <= 0:
            raise ConfigError("k must be >= 1 and threshold_px positive")
        if self.glcm_levels < 2:
            raise ConfigError("glcm_levels must be >= 2")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.folds < 1:
            raise ConfigError("lr, batch_size, epochs and folds must be positive")
        if not (0.0 < self.test_frac < 1.0) or not (0.0 <= self.val_frac < 1.0):
            raise ConfigError("test_frac must be in (0,1) and val_frac in [0,1)")
        if self.slides_per_class < 1:
            raise ConfigError("slides_per_class must be >= 1")
        if self.patch_lo > self.patch_hi or self.patch_lo < 1:
            raise ConfigError("patch count range is empty or invalid")
        if self.nuclei_lo > self.nuclei_hi or self.nuclei_lo < 0:
            raise ConfigError("nuclei count range is empty or invalid")
        if self.heatmap_sigma <= 0:
            raise ConfigError("heatmap_sigma must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.ablation not in ABLATION_MODELS:
            raise ConfigError(f"unknown ablation model {self.ablation!r}; choose one of {sorted(ABLATION_MODELS)}")
        return self


# Table-style ablation grid: (use_hfa, use_geometry, use_gpgf).
ABLATION_MODELS = {
    "A": (False, False, False),
    "B": (True, False, False),
    "C": (False, True, False),
    "D": (True, True, False),
    "E": (False, True, True),
    "F": (True, True, True),
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key, raw):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if key == "glcm_offsets":
            pairs = []
            for part in raw.split(";"):
                a, b = part.split(",")
                pairs.append((int(a), int(b)))
            return tuple(pairs)
        return raw
    except (ValueError, TypeError):
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r}") from None


def parse_config_text(text):
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys reject."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the config file, then overrides; validated as a whole."""
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    for key, val in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, str(val)) if isinstance(val, str) else val
    return RunConfig(**values).validate()


MODEL_HASH_FIELDS = ("d", "gcn_hidden", "heads", "token_hidden", "ff_mult", "mil_hidden",
                     "classes", "k", "threshold_px", "glcm_levels", "glcm_offsets",
                     "neighbor_radius_um", "ablation")


def config_hash(config):
    """sha256 over the architecture-relevant fields; pins checkpoint compatibility."""
    payload = {name: getattr(config, name) for name in MODEL_HASH_FIELDS}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode()).digest()


def cohort_spec_from_config(config):
    from .cohort import default_spec, null_spec

    spec = default_spec(
        classes=config.classes,
        slides_per_class=config.slides_per_class,
        d=config.d,
        patches_per_slide=(config.patch_lo, config.patch_hi),
        nuclei_per_patch=(config.nuclei_lo, config.nuclei_hi),
        necrosis_rate=config.necrosis_rate,
        embed_shift=tuple(config.embed_shift for _ in range(config.classes)),
        embed_noise=config.embed_noise,
        comp_coupling=config.comp_coupling,
        cluster_mean=config.cluster_mean,
        cluster_std=config.cluster_std,
        cluster_class_mod=config.cluster_class_mod,
        seed=config.seed,
    )
    return null_spec(spec) if config.null_signal else spec

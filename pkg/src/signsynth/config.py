"""Flat dotted-key configuration with typed defaults."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    # loss weights
    "loss.adversarial": 1.0,
    "loss.l1": 1.0,
    "loss.perceptual": 1.0,
    "loss.style": 1.0,
    "loss.bg_l1": 1.0,
    "loss.cut_l1": 1.0,
    "loss.aux_class": 1.0,
    "loss.bg_perceptual": 0.1,
    "loss.gp_weight": 10.0,
    "loss.kl": 0.03,
    "loss.recon": 1.0,
    "loss.affine": 1.0,
    # frozen feature extractor
    "features.seed": 0,
    "features.taps": "1,2,3",
    "features.tap_weights": "1,1,1",
    "features.weights_path": "",
    # optimizer
    "optim.lr": 2e-4,
    "optim.beta1": 0.5,
    "optim.beta2": 0.9,
    # inpainting
    "inpaint.min_side": 16,
    "inpaint.max_side": 64,
    "inpaint.channels": 16,
    "inpaint.res_blocks": 4,
    "inpaint.norm": "instance",
    "inpaint.prefill": "zero",
    "inpaint.batch": 4,
    # pasted / cycled
    "embed.delta_max": 16,
    # styled
    "styled.icon_code": 548,
    "styled.bg_code": 64,
    "styled.channels": 32,
    "styled.fade_steps": 2000,
    "styled.steps_per_stage": 2000,
    "styled.batch": 8,
    "styled.icon_share": 0.0,
    "styled.lr": 1e-3,
    # crops around real signs
    "context.ratio": 2.0,
    "context.mask_margin": 2,
    # placement
    "placement.map_size": 32,
    "placement.z_dim": 8,
    "placement.max_scale": 0.5,
    "placement.budget": 100,
    "placement.max_count": 10,
    "placement.bandwidth": "scott",
    "placement.diversity_eps": 0.05,
    "placement.lr": 1e-3,
    # dataset generation
    "datagen.rare_share": 94472 / 196455,
    # evaluation
    "eval.iou_threshold": 0.5,
    "eval.k": 1,
    "eval.mask_absent": False,
    # paths
    "paths.manifest": "",
    "paths.images": "",
    "paths.icons": "",
    "paths.maps": "",
    "paths.out": "",
}


class ConfigError(KeyError):
    pass


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: cannot read {value!r} as bool")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


class Config(Mapping[str, Any]):
    """Immutable-by-convention mapping of dotted keys; unknown keys are rejected."""

    def __init__(self, overrides: Mapping[str, Any] | None = None):
        self._values = dict(DEFAULTS)
        if overrides:
            self.update(overrides)

    def update(self, overrides: Mapping[str, Any]) -> None:
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = _coerce(key, value)

    @classmethod
    def load(cls, path: str | Path | None = None, sets: Iterable[str] = ()) -> Config:
        cfg = cls()
        if path:
            text = Path(path).read_text(encoding="utf-8")
            data = yaml.safe_load(text) or {}
            cfg.update(_flatten(data))
        cfg.update(parse_sets(sets))
        return cfg

    def __getitem__(self, key: str) -> Any:
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix.rstrip(".") + "."
        return {k[len(p):]: v for k, v in self._values.items() if k.startswith(p)}

    def floats(self, key: str) -> list[float]:
        return [float(v) for v in str(self[key]).split(",") if v.strip()]

    def ints(self, key: str) -> list[int]:
        return [int(v) for v in str(self[key]).split(",") if v.strip()]

    def to_json(self) -> str:
        return json.dumps(self._values, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def _flatten(data: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_sets(sets: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def derive_seed(global_seed: int, *parts: object) -> int:
    """Stable 63-bit seed from a global seed and identifiers (e.g. a frame id)."""
    h = hashlib.sha256(repr((int(global_seed),) + tuple(str(p) for p in parts)).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") >> 1

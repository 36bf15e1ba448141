"""Flat ``key = value`` run configuration.

Keys are dotted (``fusion.samples = 32``) and map onto :class:`RunConfig`
fields with the dot replaced by an underscore. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    data_grid: int = 16
    data_views: int = 12
    data_train_objects: int = 200
    data_eval_objects: int = 20

    camera_fov_deg: float = 50.0
    camera_radius: float = 2.0
    camera_elev_deg: float = 30.0

    triplane_P: int = 16
    triplane_C: int = 8
    triplane_extent: float = 1.0

    lift_dim: int = 32
    lift_tokens: int = 4

    fusion_samples: int = 32
    fusion_decode_before_aggregate: bool = False

    backbone_T: int = 100
    backbone_beta_start: float = 1e-3
    backbone_beta_end: float = 0.2
    backbone_ch1: int = 32
    backbone_ch2: int = 64
    backbone_temb_dim: int = 128
    backbone_tokens: int = 4

    inject_use_xt: bool = True

    stage0_epochs: int = 10
    stage0_batch: int = 16
    stage0_repeats: int = 12
    stage0_lr: float = 1e-3
    stage1_epochs: int = 10
    stage1_batch: int = 8
    stage1_repeats: int = 6
    stage1_lr: float = 1e-3
    stage2_epochs: int = 10
    stage2_batch: int = 8
    stage2_repeats: int = 4
    stage2_lr: float = 5e-4
    stage2_w_diff: float = 1.0
    stage2_w_mse: float = 1.0

    eval_targets: int = 8

    @classmethod
    def keys(cls) -> list[str]:
        return [_to_key(f.name) for f in fields(cls)]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        kw = {}
        for key, raw in pairs.items():
            name = key.strip().replace(".", "_")
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[name] = _coerce(key, raw, types[name])
        return self.replace(**kw)

    def to_text(self) -> str:
        lines = [f"{_to_key(f.name)} = {_fmt(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def _to_key(name: str) -> str:
    head, _, tail = name.partition("_")
    return f"{head}.{tail}" if tail else head


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.with_overrides(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg

"""Flat ``key = value`` configuration with typed defaults and CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .animator import AnimatorConfig
from .basecodec import QpConfig
from .lipsync import LipSyncConfig
from .training import LossWeights


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


@dataclass(frozen=True)
class Config:
    gop_size: int = 30
    keyframe_qp: int = 30
    aux_qp: int = 40
    downsample_factor: int = 4
    num_keypoints: int = 21
    seed: int = 0
    # toy network dimensions
    volume_channels: int = 4
    volume_depth: int = 4
    volume_height: int = 16
    volume_width: int = 16
    sigma: float = 0.3
    mouth_alpha: float = 1.0
    latent_channels: int = 8
    feature_dim: int = 16
    # loss weights
    lambda_p: float = 0.01
    mu_sync: float = 0.03
    sync_max_shift: int = 15
    # external base codec hooks; empty means the built-in codec
    intra_command: str = ""
    intra_decode_command: str = ""
    lowdelay_command: str = ""
    lowdelay_decode_command: str = ""

    def __post_init__(self):
        def check(key, ok, msg):
            if not ok:
                raise ConfigError(key, msg)

        check("gop_size", self.gop_size >= 2, "must be >= 2")
        for key in ("keyframe_qp", "aux_qp"):
            check(key, 0 <= getattr(self, key) <= 51, "must be in 0..51")
        check("downsample_factor", 1 <= self.downsample_factor <= 255, "must be in 1..255")
        check("num_keypoints", self.num_keypoints >= 6, "must be >= 6 (5 mouth keypoints plus one)")
        for key in ("volume_channels", "volume_depth", "volume_height", "volume_width", "latent_channels",
                    "feature_dim", "sync_max_shift"):
            check(key, getattr(self, key) >= 1, "must be >= 1")
        check("sigma", self.sigma > 0, "must be positive")
        check("mouth_alpha", 0.0 <= self.mouth_alpha <= 1.0, "must be in [0, 1]")
        for key in ("lambda_p", "mu_sync"):
            check(key, getattr(self, key) >= 0, "must be non-negative")
        check("seed", self.seed >= 0, "must be non-negative")
        if bool(self.intra_command) != bool(self.intra_decode_command):
            raise ConfigError("intra_command", "intra_command and intra_decode_command must be set together")
        if bool(self.lowdelay_command) != bool(self.lowdelay_decode_command):
            raise ConfigError("lowdelay_command", "lowdelay_command and lowdelay_decode_command must be set together")

    # derived sub-configs -------------------------------------------------------------

    @property
    def qp(self) -> QpConfig:
        return QpConfig(self.keyframe_qp, self.aux_qp, self.downsample_factor)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_p, self.mu_sync)

    def animator(self, width: int, height: int) -> AnimatorConfig:
        k = self.num_keypoints
        return AnimatorConfig(frame_width=width, frame_height=height, channels=self.volume_channels,
                              depth=self.volume_depth, vol_height=self.volume_height, vol_width=self.volume_width,
                              num_keypoints=k, mouth_indices=tuple(range(k - 5, k)),
                              mouth_alpha=self.mouth_alpha, sigma=self.sigma, seed=self.seed)

    def lipsync(self, width: int, height: int) -> LipSyncConfig:
        return LipSyncConfig(frame_width=width, frame_height=height, latent_channels=self.latent_channels,
                             feature_dim=self.feature_dim, seed=self.seed + 100)

    @property
    def scorer_seed(self) -> int:
        return self.seed + 200

    def replace(self, **overrides) -> "Config":
        return with_overrides(self, overrides)


_FIELDS = {f.name: f for f in fields(Config)}


def _coerce(key: str, raw):
    if key not in _FIELDS:
        raise ConfigError(key, "unknown key")
    typ = _FIELDS[key].type
    if not isinstance(raw, str):
        return raw
    try:
        if typ == "int":
            return int(raw, 10)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"expected {typ}, got {raw!r}") from None
    return raw


def with_overrides(cfg: Config, overrides: dict) -> Config:
    values = {k: _coerce(k, v) for k, v in overrides.items() if v is not None}
    return dataclasses.replace(cfg, **values)


def parse_config(text: str, base: Config | None = None) -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        # only whole-line comments: command templates may legitimately contain '#'
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(key or f"line {lineno}", f"line {lineno}: expected key = value")
        if key in values:
            raise ConfigError(key, f"line {lineno}: duplicate key")
        values[key] = value.strip()
    return with_overrides(base or Config(), values)


def load_config(path, overrides: dict | None = None) -> Config:
    cfg = Config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config(fh.read(), cfg)
    return with_overrides(cfg, overrides or {})


def format_config(cfg: Config) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(Config))

"""Experiment configuration: one TOML file, one section per stage, hashed as a whole."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_ENV = "DESKTTS_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the dotted path of the offending key."""


@dataclass
class CodecStage:
    rates: list[int] = field(default_factory=lambda: [25, 50])
    codebook_size: int = 256
    latent_dim: int = 64
    hidden: int = 128
    lr: float = 1e-3
    steps: int = 400
    n_utterances: int = 100
    data_seed: int = 1


@dataclass
class T2SStage:
    strategies: list[str] = field(default_factory=lambda: ["boundary_aware", "token_concat", "instruction"])
    fusion: str = "add"
    n_layers: int = 3
    n_heads: int = 4
    width: int = 128
    lr: float = 3e-3
    batch_size: int = 16
    steps: int = 900
    n_utterances: int = 2000
    min_len: int = 8
    max_len: int = 40
    long_fraction: float = 0.15
    data_seed: int = 2


@dataclass
class S2MStage:
    backbone: str = "zipformer_like"
    width: int = 128
    depth: int = 8
    schedule: list[int] = field(default_factory=lambda: [1, 2, 4, 2, 1])
    lr: float = 1e-3
    steps: int = 300
    n_utterances: int = 200
    sample_steps: int = 16
    data_seed: int = 3


@dataclass
class GRPOStage:
    group_size: int = 4
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.02
    lr: float = 1e-4
    steps: int = 300
    groups_per_step: int = 4
    temperature: float = 1.0
    n_prompts: int = 200
    prompt_density: float = 0.75


@dataclass
class DatapipeStage:
    separation_threshold: float = 0.2
    max_dur: float = 25.0
    max_gap_s: float = 1.5
    tau_audio: float = 0.5
    tau_text: float = 0.5
    workers: int = 1


@dataclass
class EvalStage:
    n_per_density: int = 40
    densities: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    long_min_len: int = 64
    long_max_len: int = 80
    bench_seed: int = 7
    rtf_seconds: float = 60.0
    rtf_warmup: int = 3


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    codec: CodecStage = field(default_factory=CodecStage)
    t2s: T2SStage = field(default_factory=T2SStage)
    s2m: S2MStage = field(default_factory=S2MStage)
    grpo: GRPOStage = field(default_factory=GRPOStage)
    datapipe: DatapipeStage = field(default_factory=DatapipeStage)
    eval: EvalStage = field(default_factory=EvalStage)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @property
    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _coerce(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default:
            return [_coerce(f"{path}[{i}]", v, default[0]) for i, v in enumerate(value)]
        return value
    return value


def _build(cls, data: dict, prefix: str):
    obj = cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in data.items():
        path = f"{prefix}{k}"
        if k not in names:
            raise ConfigError(f"{path}: unknown key")
        cur = getattr(obj, k)
        if dataclasses.is_dataclass(cur):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}: expected a table")
            setattr(obj, k, _build(type(cur), v, path + "."))
        else:
            setattr(obj, k, _coerce(path, v, cur))
    return obj


def validate(cfg: ExperimentConfig) -> None:
    from .textproc import Strategy

    def check(ok: bool, path: str, msg: str):
        if not ok:
            raise ConfigError(f"{path}: {msg}")

    for i, r in enumerate(cfg.codec.rates):
        check(r in (25, 50), f"codec.rates[{i}]", f"token rate must be 25 or 50, got {r}")
    for i, s in enumerate(cfg.t2s.strategies):
        try:
            Strategy.parse(s)
        except ValueError as exc:
            raise ConfigError(f"t2s.strategies[{i}]: {exc}") from None
    check(cfg.t2s.fusion in ("add", "concat_proj", "none"), "t2s.fusion", f"unknown fusion {cfg.t2s.fusion!r}")
    check(cfg.t2s.width % cfg.t2s.n_heads == 0, "t2s.width", "must be divisible by t2s.n_heads")
    check(0 < cfg.t2s.min_len <= cfg.t2s.max_len, "t2s.max_len", "need 0 < min_len <= max_len")
    check(0.0 <= cfg.t2s.long_fraction <= 1.0, "t2s.long_fraction", "must lie in [0, 1]")
    check(cfg.s2m.backbone in ("udit_like", "zipformer_like"), "s2m.backbone", f"unknown backbone {cfg.s2m.backbone!r}")
    check(cfg.s2m.sample_steps >= 1, "s2m.sample_steps", "must be >= 1")
    check(cfg.grpo.group_size >= 2, "grpo.group_size", "must be >= 2")
    check(cfg.grpo.clip_epsilon > 0, "grpo.clip_epsilon", "must be > 0")
    check(cfg.grpo.kl_coefficient >= 0, "grpo.kl_coefficient", "must be >= 0")
    check(0 < cfg.datapipe.max_dur <= 25.0, "datapipe.max_dur", "must lie in (0, 25]")
    for i, d in enumerate(cfg.eval.densities):
        check(d in (0.0, 0.25, 0.5, 0.75), f"eval.densities[{i}]", f"density {d} not in {{0, 0.25, 0.5, 0.75}}")
    try:
        s2m_config(cfg, cfg.codec.rates[0]).backbone.validate()
    except ValueError as exc:
        raise ConfigError(f"s2m.schedule: {exc}") from None


def _parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"{text}: override must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for ov in overrides or []:
        keys, value = _parse_override(ov)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def dump_toml(cfg: ExperimentConfig) -> str:
    """Render a config back to TOML (flat sections only, which is all we use)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, str):
            return json.dumps(v)
        return "[" + ", ".join(fmt(x) for x in v) + "]"

    d = cfg.to_dict()
    lines = [f"{k} = {fmt(v)}" for k, v in d.items() if not isinstance(v, dict)]
    for sec, body in d.items():
        if isinstance(body, dict):
            lines += ["", f"[{sec}]"] + [f"{k} = {fmt(v)}" for k, v in body.items()]
    return "\n".join(lines) + "\n"


# stage config builders -------------------------------------------------------


def codec_config(cfg: ExperimentConfig, rate: int):
    from .codec import CodecConfig

    c = cfg.codec
    return CodecConfig(token_rate_hz=rate, codebook_size=c.codebook_size, latent_dim=c.latent_dim, hidden=c.hidden, lr=c.lr)


def t2s_config(cfg: ExperimentConfig, strategy: str, rate: int, fusion: str | None = None):
    from .t2s import T2SConfig

    t = cfg.t2s
    return T2SConfig(
        strategy=strategy,
        codebook_size=cfg.codec.codebook_size,
        token_rate_hz=rate,
        n_layers=t.n_layers,
        n_heads=t.n_heads,
        width=t.width,
        fusion=fusion or t.fusion,
        lr=t.lr,
        batch_size=t.batch_size,
    )


def s2m_config(cfg: ExperimentConfig, rate: int, backbone: str | None = None):
    from .s2m import BackboneConfig, S2MConfig

    s = cfg.s2m
    bb = BackboneConfig(kind=backbone or s.backbone, width=s.width, depth=s.depth, schedule=tuple(s.schedule))
    return S2MConfig(backbone=bb, codebook_size=cfg.codec.codebook_size, token_rate_hz=rate, lr=s.lr)


def comparison_hash(cfg: ExperimentConfig, rate: int) -> str:
    """Hash of everything that must match across models in a strategy comparison."""
    d = cfg.to_dict()
    t = dict(d["t2s"])
    t.pop("strategies")
    t.pop("fusion")
    return config_hash({"seed": cfg.seed, "codec": d["codec"], "t2s": t, "rate": rate})

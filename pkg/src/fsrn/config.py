"""Run configuration: a nested dataclass tree with strict JSON round-tripping,
content hashing, and the ablation presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .datamodel import ConfigurationError
from .losses import FocalParams
from .network import SubnetConfig

ENV_SEED = "FSRN_SEED"


@dataclass(frozen=True)
class DataConfig:
    n_train_images: int = 80
    n_test_images: int = 60
    image_size: int = 128
    min_instance: int = 22
    max_instance: int = 52

    def __post_init__(self):
        if self.n_train_images < 1 or self.n_test_images < 1:
            raise ConfigurationError("image counts must be positive")
        if self.image_size % 32 != 0:
            raise ConfigurationError("image_size must be a multiple of 32")
        if not 1 <= self.min_instance <= self.max_instance:
            raise ConfigurationError("need 1 <= min_instance <= max_instance")


@dataclass(frozen=True)
class SamplerGroup:
    """Episode shape; `multiway` switches between the multi-way sampler and
    the one-positive baseline."""

    n_ways: int = 3
    k_shots: int = 5
    dropout_prob: float = 0.5
    multiway: bool = True

    def __post_init__(self):
        if self.n_ways < 1 or self.k_shots < 1:
            raise ConfigurationError("n_ways and k_shots must be positive")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigurationError("dropout_prob must lie in [0, 1)")


@dataclass(frozen=True)
class LossGroup:
    lambda_mm: float = 0.1
    max_margin: bool = True

    def __post_init__(self):
        if self.lambda_mm < 0:
            raise ConfigurationError("lambda_mm must be non-negative")


@dataclass(frozen=True)
class MsdaGroup:
    enabled: bool = False
    log_range: float = 1.0

    def __post_init__(self):
        if self.log_range <= 0:
            raise ConfigurationError("log_range must be positive")


@dataclass(frozen=True)
class GpGroup:
    enabled: bool = False


@dataclass(frozen=True)
class OptimGroup:
    lr: float = 1e-3
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_at: tuple[int, ...] = ()

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        object.__setattr__(self, "decay_at", tuple(int(e) for e in self.decay_at))


@dataclass(frozen=True)
class ScheduleGroup:
    train_episodes: int = 2400
    finetune_episodes: int = 500
    finetune_lr_scale: float = 0.1
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.train_episodes < 0 or self.finetune_episodes < 0:
            raise ConfigurationError("episode counts must be non-negative")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerGroup = field(default_factory=SamplerGroup)
    network: SubnetConfig = field(default_factory=SubnetConfig)
    focal: FocalParams = field(default_factory=FocalParams)
    loss: LossGroup = field(default_factory=LossGroup)
    msda: MsdaGroup = field(default_factory=MsdaGroup)
    gp: GpGroup = field(default_factory=GpGroup)
    optim: OptimGroup = field(default_factory=OptimGroup)
    run: ScheduleGroup = field(default_factory=ScheduleGroup)


_GROUPS = {
    "data": DataConfig,
    "sampler": SamplerGroup,
    "network": SubnetConfig,
    "focal": FocalParams,
    "loss": LossGroup,
    "msda": MsdaGroup,
    "gp": GpGroup,
    "optim": OptimGroup,
    "run": ScheduleGroup,
}


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict = {"seed": cfg.seed}
    for name in _GROUPS:
        group = dataclasses.asdict(getattr(cfg, name))
        out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in group.items()}
    return out


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a JSON object")
    unknown = set(data) - set(_GROUPS) - {"seed"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict = {"seed": int(data.get("seed", 0))}
    for name, cls in _GROUPS.items():
        group = data.get(name, {})
        if not isinstance(group, dict):
            raise ConfigurationError(f"config group '{name}' must be an object")
        valid = {f.name for f in dataclasses.fields(cls)}
        bad = set(group) - valid
        if bad:
            raise ConfigurationError(f"unknown keys in '{name}': {sorted(bad)}")
        try:
            kwargs[name] = cls(**group)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad '{name}' group: {exc}") from exc
    return RunConfig(**kwargs)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(
        json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    ).hexdigest()


def train_signature(cfg: RunConfig) -> str:
    """Hash of only the fields that influence meta-training, so runs differing
    in meta-test-only toggles can share a trained checkpoint."""
    d = config_to_dict(cfg)
    del d["msda"], d["gp"]
    d["run"] = {"train_episodes": d["run"]["train_episodes"],
                "checkpoint_every": d["run"]["checkpoint_every"]}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def load_config(path, env: dict | None = None) -> RunConfig:
    """Parse a JSON config; the FSRN_SEED environment variable, when set,
    overrides the file's seed."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
    env = os.environ if env is None else env
    if ENV_SEED in env:
        try:
            data["seed"] = int(env[ENV_SEED])
        except ValueError as exc:
            raise ConfigurationError(f"{ENV_SEED} must be an integer") from exc
    return config_from_dict(data)


ABLATION_PRESETS = ("A", "B", "C", "D", "E")


def ablation_preset(name: str, base: RunConfig | None = None) -> RunConfig:
    """Incremental feature stack: A is the plain one-positive detector with
    late fusion; each later preset adds one mechanism on top."""
    cfg = base if base is not None else RunConfig()
    if name not in ABLATION_PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; expected one of {ABLATION_PRESETS}")
    late = replace(cfg.network, fusion_index=cfg.network.n_conv_layers - 1)
    early = replace(cfg.network, fusion_index=0)
    rank = ABLATION_PRESETS.index(name)
    return replace(
        cfg,
        sampler=replace(cfg.sampler, multiway=rank >= 1),
        network=early if rank >= 2 else late,
        msda=replace(cfg.msda, enabled=rank >= 3),
        gp=replace(cfg.gp, enabled=rank >= 4),
    )


def rf_sweep_configs(base: RunConfig | None = None) -> dict[int, RunConfig]:
    """Classification-subnet depth sweep at full-depth fusion; keys are the
    resulting post-fusion receptive fields in feature cells."""
    cfg = base if base is not None else RunConfig()
    out: dict[int, RunConfig] = {}
    for n_layers in (1, 3, 5, 6):
        net = replace(cfg.network, n_conv_layers=n_layers, fusion_index=0)
        rf = 1 + n_layers * (cfg.network.kernel_size - 1)
        out[rf] = replace(cfg, network=net)
    return out

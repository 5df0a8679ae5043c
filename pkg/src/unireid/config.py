"""Dataclass configs, TOML loading, and seed fan-out.

A run is described by one TOML file with sections [model], [data], [stage1],
[stage2], [loss], [ablation], [eval], [output] plus a top-level ``seed``.
Unknown keys are a hard error so typos never silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError

TEMPLATE_WORDS = ("a", "photo", "of", "and", "person")


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 32
    patch_size: int = 8
    vis_width: int = 64
    vis_layers: int = 2
    vis_heads: int = 4
    txt_width: int = 64
    txt_layers: int = 2
    txt_heads: int = 4
    joint_dim: int = 64
    vocab_size: int = 0  # 0 = sized from the training vocabulary
    max_text_len: int = 77
    num_identities: int = 0  # 0 = sized from the unified training labels
    id_tokens_per_identity: int = 4
    inst_tokens: int = 4
    inversion_layers: int = 4
    dual_cls_tokens: bool = True

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    def validate(self) -> None:
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image size {self.image_height}x{self.image_width} not divisible "
                f"by patch size {self.patch_size}"
            )
        if self.vis_width % self.vis_heads:
            raise ConfigError("vis_width must be divisible by vis_heads")
        if self.txt_width % self.txt_heads:
            raise ConfigError("txt_width must be divisible by txt_heads")
        prompt_len = len(TEMPLATE_WORDS) + self.id_tokens_per_identity + self.inst_tokens + 2
        if self.max_text_len < prompt_len:
            raise ConfigError(
                f"max_text_len={self.max_text_len} too short for the prompt template "
                f"({prompt_len} positions incl. BOS/EOS)"
            )
        for name in ("patch_size", "vis_layers", "vis_heads", "txt_layers", "txt_heads",
                     "joint_dim", "id_tokens_per_identity", "inst_tokens", "inversion_layers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class LossWeights:
    lambda1: float = 0.4
    lambda2: float = 0.06
    temperature: float = 0.07
    temperature_learnable: bool = True
    triplet_margin: float = 0.3

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")


@dataclass
class StageConfig:
    stage: int = 1
    epochs: int = 10
    steps_per_epoch: int = 0  # 0 = one pass over the T2I train images per epoch
    # stage 1: exponential decay schedule
    lr_inversion: float = 5e-5
    lr_prompts: float = 0.02
    lr_decay_per_epoch: float = 0.8
    # stage 2: linear warmup then cosine annealing
    warmup_epochs: int = 5
    warmup_lr_start: float = 1e-6
    lr_peak: float = 1e-5
    lr_floor: float = 1e-7
    weight_decay: float = 1e-4
    grad_clip_norm: float = 5.0
    prompt_audit_every: int = 0  # stage 2: recheck precomputed prompt embeddings every N steps

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        for name in ("lr_inversion", "lr_prompts", "lr_decay_per_epoch",
                     "warmup_lr_start", "lr_peak", "lr_floor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.stage == 2 and self.warmup_epochs >= self.epochs:
            raise ConfigError("stage 2 warmup_epochs must be < epochs")


@dataclass
class SyntheticSpec:
    n_identities: int = 32
    images_per_identity: int = 8
    n_cameras: int = 4
    gender_vocab: int = 4
    hair_vocab: int = 6
    top_color_vocab: int = 8
    bottom_color_vocab: int = 8
    action_vocab: int = 6
    object_vocab: int = 6
    image_height: int = 64
    image_width: int = 32
    seed: int = 0
    shared_identity_fraction: float = 0.5
    query_per_identity: int = 1
    gallery_per_identity: int = 2
    noise_sigma: float = 0.06
    tint_strength: float = 0.25

    def validate(self) -> None:
        if self.n_identities < 2:
            raise ConfigError("n_identities must be >= 2")
        if self.images_per_identity < 4:
            raise ConfigError("images_per_identity must be >= 4 (PK batches need depth)")
        if self.n_cameras < 2:
            raise ConfigError("n_cameras must be >= 2 (camera-aware eval needs cross-camera pairs)")
        if not 0.0 <= self.shared_identity_fraction <= 1.0:
            raise ConfigError("shared_identity_fraction must be in [0, 1]")
        held_out = self.query_per_identity + self.gallery_per_identity
        if held_out >= self.images_per_identity:
            raise ConfigError("query + gallery images per identity must leave >= 1 train image")


@dataclass
class DataConfig:
    root: str = "data/synthetic"
    t2i_manifest: str = ""  # default: <root>/t2i/manifest.json
    i2i_manifest: str = ""  # default: <root>/i2i/manifest.json
    t2i_batch: int = 8
    i2i_batch: int = 8
    instances_per_identity: int = 4
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def validate(self) -> None:
        if self.t2i_batch < 2:
            raise ConfigError("t2i_batch must be >= 2")
        if self.instances_per_identity < 2:
            raise ConfigError("instances_per_identity must be >= 2")
        if self.i2i_batch % self.instances_per_identity:
            raise ConfigError("i2i_batch must be a multiple of instances_per_identity")
        if self.i2i_batch // self.instances_per_identity < 2:
            raise ConfigError("i2i sub-batch must cover >= 2 identities")
        self.synthetic.validate()

    def t2i_manifest_path(self) -> Path:
        return Path(self.t2i_manifest) if self.t2i_manifest else Path(self.root) / "t2i" / "manifest.json"

    def i2i_manifest_path(self) -> Path:
        return Path(self.i2i_manifest) if self.i2i_manifest else Path(self.root) / "i2i" / "manifest.json"


@dataclass
class AblationConfig:
    enable_trt: bool = True
    enable_hpl: bool = True
    enable_cmpr: bool = True

    def validate(self) -> None:
        if self.enable_cmpr and not self.enable_hpl:
            raise ConfigError("enable_cmpr requires enable_hpl (pseudo-tokens come from the "
                              "inversion networks)")


@dataclass
class EvalConfig:
    task: str = "both"  # i2i | t2i | both
    batch_size: int = 64

    def validate(self) -> None:
        if self.task not in ("i2i", "t2i", "both"):
            raise ConfigError(f"eval task must be i2i, t2i or both, got {self.task!r}")


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    plots: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1, epochs=10))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2, epochs=60))
    loss: LossWeights = field(default_factory=LossWeights)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        self.model.validate()
        self.data.validate()
        self.stage1.validate()
        self.stage2.validate()
        self.loss.validate()
        self.ablation.validate()
        self.eval.validate()
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ConfigError("[stage1] must have stage=1 and [stage2] stage=2")


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section [{path or cls.__name__}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} in [{path}]")
    return cls(**data)


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "stage1": StageConfig,
    "stage2": StageConfig,
    "loss": LossWeights,
    "ablation": AblationConfig,
    "eval": EvalConfig,
    "output": OutputConfig,
}


def run_config_from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    cfg = RunConfig(seed=int(raw.get("seed", 0)))
    for name, cls in _SECTIONS.items():
        if name in raw:
            section = dict(raw[name])
            if name == "data" and "synthetic" in section:
                sub = _build_dataclass(SyntheticSpec, section.pop("synthetic"), "data.synthetic")
                built = _build_dataclass(DataConfig, section, name)
                built.synthetic = sub
            else:
                built = _build_dataclass(cls, section, name)
            if name in ("stage1", "stage2") and "stage" not in raw[name]:
                built.stage = 1 if name == "stage1" else 2
            setattr(cfg, name, built)
    cfg.validate()
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return run_config_from_dict(raw)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg) -> str:
    """Stable hash of a config, used to refuse checkpoint/config mismatches."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def compat_hash(cfg: RunConfig) -> str:
    """Hash of the structural parts of a run config.

    Checkpoint loading gates on this: architecture, data, loss and ablation
    changes are incompatible, while run-length and output knobs (epochs,
    schedules, output dir) may differ, so a run can be resumed with more
    epochs.
    """
    subset = {
        "seed": cfg.seed,
        "model": dataclasses.asdict(cfg.model),
        "data": dataclasses.asdict(cfg.data),
        "loss": dataclasses.asdict(cfg.loss),
        "ablation": dataclasses.asdict(cfg.ablation),
    }
    blob = json.dumps(subset, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def derive_seed(root_seed: int, name: str) -> int:
    """Fan one root seed out into named, platform-stable substreams."""
    digest = hashlib.blake2s(f"{root_seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**31 - 1)

"""
RunConfig: line-oriented ``key = value`` files with [model], [diffusion], [train],
[sample] and [data] sections, validated by pydantic models.
"""

import logging
import os
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .arch import PRESETS, ContextSpec, StoicConfig
from .data import Dataset, gen_toy_dataset, load_cifar10
from .diffusion import NoiseSchedule, make_schedule
from .errors import ConfigError
from .training import TrainHyper

logger = logging.getLogger(__name__)

SECTIONS = ("model", "diffusion", "train", "sample", "data")


def _none_words(value: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in ("none", "null", ""):
        return None
    return value


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.replace("x", ",").split(",") if item.strip()]
    return value


_ARCH_FIELDS = (
    "stride_variant",
    "image_dims",
    "embed_dim",
    "num_blocks",
    "heads",
    "mlp_ratio",
    "time_concat",
    "decoder_reduce",
    "decoder_conv",
    "initial_nonlinearity",
    "initial_norm",
    "time_dim",
)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Section):
    preset: str | None = Field(None, description=f"start from a preset: {', '.join(PRESETS)}")
    stride_variant: Literal["S1", "S2"] = Field("S2", description="S1: K=3,S=1,P=1; S2: K=2,S=2,P=0")
    image_dims: tuple[int, int, int] = Field((3, 32, 32), description="C,H,W")
    embed_dim: int = Field(512, description="embedding width L")
    num_blocks: int = Field(12, description="number of core blocks N")
    heads: int | None = Field(None, description="attention heads (default L/64)")
    mlp_ratio: float = 4.0
    time_concat: Literal["before_conv", "after_conv"] = "after_conv"
    conditional: bool = Field(False, description="add the context-token pathway")
    context_tokens: int = 77
    token_dim: int = 768
    decoder_reduce: Literal["linear", "slice"] = "slice"
    decoder_conv: Literal["conv", "conv_transpose"] | None = Field(
        None, description="default: conv for S1, conv_transpose for S2"
    )
    initial_nonlinearity: Literal["gelu", "none"] = "gelu"
    initial_norm: Literal["none", "batch_norm"] = "none"
    time_dim: int = 128

    @field_validator("preset", "heads", "decoder_conv", mode="before")
    @classmethod
    def none_words(cls, value: Any) -> Any:
        return _none_words(value)

    @field_validator("image_dims", mode="before")
    @classmethod
    def split_dims(cls, value: Any) -> Any:
        return _split_list(value)

    def to_stoic_config(self) -> StoicConfig:
        context = ContextSpec(self.context_tokens, self.token_dim) if self.conditional else None
        fields = {name: getattr(self, name) for name in _ARCH_FIELDS}
        if self.preset is None:
            return StoicConfig(context=context, **fields)
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {', '.join(PRESETS)}")
        overrides = {name: fields[name] for name in self.model_fields_set & set(_ARCH_FIELDS)}
        if self.model_fields_set & {"conditional", "context_tokens", "token_dim"}:
            overrides["context"] = context
        return PRESETS[self.preset].with_(**overrides)


class DiffusionSection(_Section):
    num_steps: int = Field(1000, description="T")
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sde_beta_min: float | None = Field(None, description="default beta_start * T")
    sde_beta_max: float | None = Field(None, description="default beta_end * T")
    variance: Literal["posterior", "beta"] = "posterior"

    @field_validator("sde_beta_min", "sde_beta_max", mode="before")
    @classmethod
    def none_words(cls, value: Any) -> Any:
        return _none_words(value)


class TrainSection(_Section):
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 64
    steps: int = 1000
    cond_dropout: float = 0.1
    seed: int = 0
    guidance_training: bool = False
    checkpoint_every: int = Field(0, description="0 writes only final.stoi")
    log_every: int = 100


class SampleSection(_Section):
    sampler: Literal["ancestral", "em", "euler_maruyama"] = "ancestral"
    steps: int | None = Field(None, description="default T")
    guidance: float = 1.0
    count: int = 16
    seed: int = 0
    batch_size: int = 64
    format: Literal["ppm", "png"] = "ppm"
    mode: int | None = Field(None, description="toy mode used as the prompt of conditional models")

    @field_validator("steps", "mode", mode="before")
    @classmethod
    def none_words(cls, value: Any) -> Any:
        return _none_words(value)


class DataSection(_Section):
    source: Literal["two_blobs", "checker", "cifar10"] = "two_blobs"
    paths: list[str] = Field(default_factory=list, description="CIFAR-10 batch files, comma separated")
    n: int = 1024
    seed: int = 0
    noise_std: float = 0.1
    conditional: bool = False
    token_dim: int | None = Field(None, description="default: the model's token_dim")

    @field_validator("token_dim", mode="before")
    @classmethod
    def none_words(cls, value: Any) -> Any:
        return _none_words(value)

    @field_validator("paths", mode="before")
    @classmethod
    def split_paths(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value


_SECTION_MODELS: dict[str, type[_Section]] = {
    "model": ModelSection,
    "diffusion": DiffusionSection,
    "train": TrainSection,
    "sample": SampleSection,
    "data": DataSection,
}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelSection = ModelSection()
    diffusion: DiffusionSection = DiffusionSection()
    train: TrainSection = TrainSection()
    sample: SampleSection = SampleSection()
    data: DataSection = DataSection()

    def stoic_config(self) -> StoicConfig:
        return self.model.to_stoic_config()

    def schedule(self) -> NoiseSchedule:
        d = self.diffusion
        try:
            return make_schedule(d.num_steps, d.beta_start, d.beta_end, d.sde_beta_min, d.sde_beta_max, d.variance)
        except ValueError as e:
            raise ConfigError(f"[diffusion] {e}") from None

    def train_hyper(self) -> TrainHyper:
        t = self.train
        return TrainHyper(
            lr=t.lr,
            betas=(t.beta1, t.beta2),
            eps=t.eps,
            weight_decay=t.weight_decay,
            batch_size=t.batch_size,
            steps=t.steps,
            cond_dropout=t.cond_dropout,
            seed=t.seed,
            guidance_training=t.guidance_training,
            checkpoint_every=t.checkpoint_every,
            log_every=t.log_every,
            diffusion_steps=self.diffusion.num_steps,
            beta_start=self.diffusion.beta_start,
            beta_end=self.diffusion.beta_end,
        )

    def dataset(self, base_dir: str | os.PathLike | None = None) -> Dataset:
        d = self.data
        config = self.stoic_config()
        if d.source == "cifar10":
            if not d.paths:
                raise ConfigError("[data] source = cifar10 needs paths")
            root = Path(base_dir) if base_dir is not None else Path.cwd()
            return load_cifar10([root / path for path in d.paths])
        num_tokens, token_dim = 77, 8
        if config.context is not None:
            num_tokens, token_dim = config.context.num_tokens, config.context.token_dim
        if d.token_dim is not None:
            token_dim = d.token_dim
        return gen_toy_dataset(
            d.source, d.n, config.image_dims, d.seed,
            noise_std=d.noise_std, conditional=d.conditional, num_tokens=num_tokens, token_dim=token_dim,
        )


def _tokenize(text: str) -> tuple[dict[str, dict[str, str]], dict[tuple[str, str], int]]:
    sections: dict[str, dict[str, str]] = {}
    lines: dict[tuple[str, str], int] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            current = line[1:-1].strip()
            if current not in SECTIONS:
                raise ConfigError(f"unknown section [{current}]; expected one of {', '.join(SECTIONS)}", lineno)
            sections.setdefault(current, {})
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if current is None:
            raise ConfigError(f"key {key!r} appears before any section header", lineno)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", lineno)
        sections[current][key] = value
        lines[(current, key)] = lineno
    return sections, lines


def parse_run_config(text: str) -> RunConfig:
    sections, lines = _tokenize(text)
    built: dict[str, _Section] = {}
    for name, values in sections.items():
        try:
            built[name] = _SECTION_MODELS[name].model_validate(values)
        except ValidationError as e:
            error = e.errors()[0]
            key = str(error["loc"][0]) if error["loc"] else ""
            message = "unknown key" if error["type"] == "extra_forbidden" else error["msg"]
            raise ConfigError(f"[{name}] {key}: {message}", lines.get((name, key))) from None
    run = RunConfig(**built)
    run.stoic_config()  # cross-field checks
    return run


def load_run_config(path: str | os.PathLike) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as e:
        logger.error(f"Error reading config {path}: {e}")
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    try:
        return parse_run_config(text)
    except ConfigError as e:
        error = ConfigError(f"{path}: {e}")
        error.line = e.line
        raise error from None


def describe_keys() -> str:
    """Every section and key with its default, for ``--help``"""
    lines = []
    for name, model in _SECTION_MODELS.items():
        lines.append(f"[{name}]")
        for key, info in model.model_fields.items():
            default = info.get_default(call_default_factory=True)
            note = f"  ({info.description})" if info.description else ""
            lines.append(f"  {key} = {default}{note}")
    return "\n".join(lines)

"""
STOIC network: strided initial convolution, time/context conditioning, a stack of
identical pre-LN transformer blocks and a decoder back to image space.

There is no tokenizer and no positional embedding. Spatial structure enters
only through the initial convolution; the block stack is permutation
equivariant over sequence positions.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from typing import Any

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str(self.value)

        __format__ = str.__format__

import torch
from einops import rearrange

from .errors import ConfigError, ShapeError
from .numerics import (
    batch_norm,
    conv2d,
    conv_out_dims,
    conv_transpose2d,
    gelu,
    layer_norm,
    linear,
    mlp,
    multi_head_attention,
)
from .params import ParamStore

logger = logging.getLogger(__name__)

INIT_STD = 0.02
LN_EPS = 1e-5

__all__ = [
    "StoicConfig",
    "ContextSpec",
    "StrideVariant",
    "TimeConcat",
    "DecoderReduce",
    "DecoderConv",
    "InitialNonlinearity",
    "InitialNorm",
    "PRESETS",
    "StoicNet",
    "apply_context",
    "apply_time_after_conv",
    "build_params",
    "conv_out_dims",
    "core_block",
    "decoder",
    "initial_conv",
    "reduce_channels",
    "run_block_stack",
    "sinusoidal_features",
    "stoic_forward",
    "time_embed",
]


class StrideVariant(StrEnum):
    S1 = "S1"
    S2 = "S2"


class TimeConcat(StrEnum):
    BEFORE_CONV = "before_conv"
    AFTER_CONV = "after_conv"


class DecoderReduce(StrEnum):
    LINEAR = "linear"
    SLICE = "slice"


class DecoderConv(StrEnum):
    CONV = "conv"
    CONV_TRANSPOSE = "conv_transpose"


class InitialNonlinearity(StrEnum):
    GELU = "gelu"
    NONE = "none"


class InitialNorm(StrEnum):
    NONE = "none"
    BATCH_NORM = "batch_norm"


# (kernel, stride, padding) of the initial convolution
_INITIAL_GEOMETRY = {
    StrideVariant.S1: (3, 1, 1),
    StrideVariant.S2: (2, 2, 0),
}


@dataclass(frozen=True)
class ContextSpec:
    num_tokens: int = 77
    token_dim: int = 768


@dataclass(frozen=True)
class StoicConfig:
    """Full architecture description.

    ``heads`` defaults to L/64 (at least 1) and ``decoder_conv`` defaults to a
    plain convolution for S1 and a transposed convolution for S2.
    """

    stride_variant: StrideVariant = StrideVariant.S2
    image_dims: tuple[int, int, int] = (3, 32, 32)
    embed_dim: int = 512
    num_blocks: int = 12
    heads: int | None = None
    mlp_ratio: float = 4.0
    time_concat: TimeConcat = TimeConcat.AFTER_CONV
    context: ContextSpec | None = None
    decoder_reduce: DecoderReduce = DecoderReduce.SLICE
    decoder_conv: DecoderConv | None = None
    initial_nonlinearity: InitialNonlinearity = InitialNonlinearity.GELU
    initial_norm: InitialNorm = InitialNorm.NONE
    time_dim: int = 128

    def __post_init__(self):
        try:
            object.__setattr__(self, "stride_variant", StrideVariant(self.stride_variant))
            object.__setattr__(self, "time_concat", TimeConcat(self.time_concat))
            object.__setattr__(self, "decoder_reduce", DecoderReduce(self.decoder_reduce))
            object.__setattr__(
                self, "initial_nonlinearity", InitialNonlinearity(self.initial_nonlinearity)
            )
            object.__setattr__(self, "initial_norm", InitialNorm(self.initial_norm))
            if self.decoder_conv is None:
                default = (
                    DecoderConv.CONV
                    if self.stride_variant == StrideVariant.S1
                    else DecoderConv.CONV_TRANSPOSE
                )
                object.__setattr__(self, "decoder_conv", default)
            else:
                object.__setattr__(self, "decoder_conv", DecoderConv(self.decoder_conv))
        except ValueError as e:
            raise ConfigError(str(e)) from None
        object.__setattr__(self, "image_dims", tuple(int(d) for d in self.image_dims))
        if isinstance(self.context, dict):
            object.__setattr__(self, "context", ContextSpec(**self.context))
        if self.heads is None:
            object.__setattr__(self, "heads", max(1, self.embed_dim // 64))
        self.validate()

    def validate(self) -> None:
        channels, height, width = self.image_dims
        if min(self.image_dims) < 1:
            raise ConfigError(f"image_dims must be positive, got {self.image_dims}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be a positive integer, got {self.num_blocks}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0 or self.mlp_hidden < 1:
            raise ConfigError(f"mlp_ratio must give a positive hidden width, got {self.mlp_ratio}")
        if self.time_dim < 4 or self.time_dim % 2:
            raise ConfigError(f"time_dim must be an even number >= 4, got {self.time_dim}")
        if self.stride_variant == StrideVariant.S2 and (height % 2 or width % 2):
            raise ConfigError(f"S2 needs even image height and width, got {height}x{width}")
        if self.decoder_reduce == DecoderReduce.SLICE and channels > self.embed_dim:
            raise ConfigError(f"slice reduce needs C <= L, got C={channels}, L={self.embed_dim}")
        if self.stride_variant == StrideVariant.S2 and self.decoder_conv == DecoderConv.CONV:
            raise ConfigError("a dimension-preserving conv cannot upsample; S2 needs conv_transpose")
        if self.context is not None and (self.context.num_tokens < 1 or self.context.token_dim < 1):
            raise ConfigError(f"context spec must be positive, got {self.context}")

    @property
    def channels(self) -> int:
        return self.image_dims[0]

    @property
    def kernel(self) -> int:
        return _INITIAL_GEOMETRY[self.stride_variant][0]

    @property
    def stride(self) -> int:
        return _INITIAL_GEOMETRY[self.stride_variant][1]

    @property
    def padding(self) -> int:
        return _INITIAL_GEOMETRY[self.stride_variant][2]

    @property
    def in_channels(self) -> int:
        """Input channels of the initial convolution (image plus optional time plane)"""
        return self.channels + (1 if self.time_concat == TimeConcat.BEFORE_CONV else 0)

    @property
    def out_hw(self) -> tuple[int, int]:
        _, height, width = self.image_dims
        return conv_out_dims(height, width, self.kernel, self.stride, self.padding)

    @property
    def seq_len(self) -> int:
        h_out, w_out = self.out_hw
        return h_out * w_out

    @property
    def time_plane_hw(self) -> tuple[int, int]:
        if self.time_concat == TimeConcat.BEFORE_CONV:
            return self.image_dims[1], self.image_dims[2]
        return self.out_hw

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def decoder_geometry(self) -> tuple[int, int, int]:
        """(kernel, stride, padding) of the final spatial layer"""
        if self.stride_variant == StrideVariant.S2:
            return 2, 2, 0
        return 3, 1, 1

    def with_(self, **changes: Any) -> "StoicConfig":
        if "stride_variant" in changes and "decoder_conv" not in changes:
            changes["decoder_conv"] = None
        if "embed_dim" in changes and "heads" not in changes:
            changes["heads"] = None
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, StrEnum):
                data[key] = value.value
        data["image_dims"] = list(self.image_dims)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StoicConfig":
        data = dict(data)
        if "image_dims" in data:
            data["image_dims"] = tuple(data["image_dims"])
        if data.get("context") is not None:
            data["context"] = ContextSpec(**data["context"])
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"Bad model config: {e}") from None


PRESETS: dict[str, StoicConfig] = {
    "cifar10_s1": StoicConfig(StrideVariant.S1, (3, 32, 32), embed_dim=512, num_blocks=12),
    "cifar10_s2": StoicConfig(StrideVariant.S2, (3, 32, 32), embed_dim=512, num_blocks=12),
    "celeba_s1": StoicConfig(StrideVariant.S1, (3, 64, 64), embed_dim=512, num_blocks=12),
    "celeba_s2": StoicConfig(StrideVariant.S2, (3, 64, 64), embed_dim=512, num_blocks=12),
    "mscoco_latent_s2": StoicConfig(
        StrideVariant.S2, (4, 32, 32), embed_dim=512, num_blocks=12, context=ContextSpec(77, 768)
    ),
}


@dataclass(frozen=True)
class _ParamSpec:
    path: str
    shape: tuple[int, ...]
    init: str  # "trunc_normal", "zeros" or "ones"


def param_layout(config: StoicConfig) -> list[_ParamSpec]:
    """Every parameter tensor the configuration needs, in construction order"""
    width = config.embed_dim
    channels = config.channels
    kernel = config.kernel
    specs: list[_ParamSpec] = []

    def dense(path: str, fan_out: int, fan_in: int, weight_init: str = "trunc_normal") -> None:
        specs.append(_ParamSpec(f"{path}/weight", (fan_out, fan_in), weight_init))
        specs.append(_ParamSpec(f"{path}/bias", (fan_out,), "zeros"))

    def norm(path: str, size: int) -> None:
        specs.append(_ParamSpec(f"{path}/gamma", (size,), "ones"))
        specs.append(_ParamSpec(f"{path}/beta", (size,), "zeros"))

    specs.append(_ParamSpec("init_conv/weight", (width, config.in_channels, kernel, kernel), "trunc_normal"))
    specs.append(_ParamSpec("init_conv/bias", (width,), "zeros"))
    if config.initial_norm == InitialNorm.BATCH_NORM:
        norm("init_norm", width)

    plane_h, plane_w = config.time_plane_hw
    dense("time_embed", plane_h * plane_w, config.time_dim)
    if config.time_concat == TimeConcat.AFTER_CONV:
        dense("time_merge", width, width + 1)

    if config.context is not None:
        dense("context_embed", config.seq_len, config.context.token_dim)
        dense("context_merge", width, width + config.context.num_tokens)

    hidden = config.mlp_hidden
    for index in range(config.num_blocks):
        block = f"block{index}"
        norm(f"{block}/ln1", width)
        specs.append(_ParamSpec(f"{block}/attn/qkv_w", (3 * width, width), "trunc_normal"))
        specs.append(_ParamSpec(f"{block}/attn/qkv_b", (3 * width,), "zeros"))
        specs.append(_ParamSpec(f"{block}/attn/out_w", (width, width), "trunc_normal"))
        specs.append(_ParamSpec(f"{block}/attn/out_b", (width,), "zeros"))
        norm(f"{block}/ln2", width)
        specs.append(_ParamSpec(f"{block}/mlp/fc1_w", (hidden, width), "trunc_normal"))
        specs.append(_ParamSpec(f"{block}/mlp/fc1_b", (hidden,), "zeros"))
        specs.append(_ParamSpec(f"{block}/mlp/fc2_w", (width, hidden), "trunc_normal"))
        specs.append(_ParamSpec(f"{block}/mlp/fc2_b", (width,), "zeros"))

    norm("decoder/ln", width)
    if config.decoder_reduce == DecoderReduce.LINEAR:
        dense("decoder/reduce", channels, width)
    dec_kernel = config.decoder_geometry[0]
    # conv weights are [C_out, C_in, K, K], transposed conv weights [C_in, C_out, K, K]; C_in == C_out here
    specs.append(_ParamSpec("decoder/conv/weight", (channels, channels, dec_kernel, dec_kernel), "zeros"))
    specs.append(_ParamSpec("decoder/conv/bias", (channels,), "zeros"))
    return specs


def build_params(config: StoicConfig, seed: int, dtype: torch.dtype = torch.float32) -> ParamStore:
    """Initialize every tensor of the network.

    Weights are truncated normal (std 0.02, cut at two standard deviations),
    biases and the final decoder convolution are zero, norm gains are one.
    """
    generator = torch.Generator().manual_seed(seed)
    store = ParamStore()
    for spec in param_layout(config):
        if spec.init == "trunc_normal":
            tensor = torch.empty(spec.shape, dtype=dtype)
            torch.nn.init.trunc_normal_(
                tensor, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator
            )
        elif spec.init == "ones":
            tensor = torch.ones(spec.shape, dtype=dtype)
        else:
            tensor = torch.zeros(spec.shape, dtype=dtype)
        store.add(spec.path, tensor)
    logger.debug(f"built {len(store)} tensors / {store.num_scalars()} scalars for seed {seed}")
    return store


def sinusoidal_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """[B] timesteps -> [B, dim] sin/cos features at geometric frequencies"""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1)
    )
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=-1)


def _as_timesteps(t: torch.Tensor | Sequence[int] | int, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t)
    if t.dim() == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise ShapeError(f"expected {batch} timesteps, got shape {tuple(t.shape)}")
    if bool((t < 0).any()):
        raise ValueError("timesteps must be non-negative")
    return t


def initial_conv(x: torch.Tensor, params: ParamStore, config: StoicConfig) -> torch.Tensor:
    """[B, C', H, W] image (plus optional time plane) -> [B, H_o*W_o, L] sequence"""
    if x.dim() != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(
            f"initial conv expects {config.in_channels} input channels "
            f"(time_concat={config.time_concat}), got shape {tuple(x.shape)}"
        )
    features = conv2d(
        x, params["init_conv/weight"], params["init_conv/bias"], config.stride, config.padding
    )
    if config.initial_norm == InitialNorm.BATCH_NORM:
        features = batch_norm(features, params["init_norm/gamma"], params["init_norm/beta"])
    if config.initial_nonlinearity == InitialNonlinearity.GELU:
        features = gelu(features)
    return rearrange(features, "b l h w -> b (h w) l")


def time_embed(t: torch.Tensor | Sequence[int] | int, params: ParamStore, config: StoicConfig,
               batch: int | None = None) -> torch.Tensor:
    """Timesteps -> one [B, 1, H*, W*] channel plane sized for the concat point"""
    if batch is None:
        batch = torch.as_tensor(t).numel()
    t = _as_timesteps(t, batch)
    weight = params["time_embed/weight"]
    features = sinusoidal_features(t, config.time_dim).to(weight.dtype)
    plane = linear(features, weight, params["time_embed/bias"])
    plane_h, plane_w = config.time_plane_hw
    return rearrange(plane, "b (h w) -> b 1 h w", h=plane_h, w=plane_w)


def apply_time_after_conv(seq: torch.Tensor, plane: torch.Tensor, params: ParamStore) -> torch.Tensor:
    """Concatenate the time plane as channel L+1, then project back to L"""
    column = rearrange(plane, "b 1 h w -> b (h w) 1")
    merged = torch.cat([seq, column], dim=-1)
    return linear(merged, params["time_merge/weight"], params["time_merge/bias"])


def apply_context(
    features: torch.Tensor, context: torch.Tensor, params: ParamStore, config: StoicConfig
) -> torch.Tensor:
    """Project each context token to a H_o x W_o plane, concatenate, project L+tokens -> L"""
    spec = config.context
    if spec is None:
        raise ShapeError("configuration has no context conditioning")
    if context.dim() != 3 or tuple(context.shape[1:]) != (spec.num_tokens, spec.token_dim):
        raise ShapeError(
            f"context must be [B, {spec.num_tokens}, {spec.token_dim}], got {tuple(context.shape)}"
        )
    if context.shape[0] != features.shape[0]:
        raise ShapeError(f"context batch {context.shape[0]} != feature batch {features.shape[0]}")
    planes = linear(context, params["context_embed/weight"], params["context_embed/bias"])
    merged = torch.cat([features, rearrange(planes, "b n t -> b t n")], dim=-1)
    return linear(merged, params["context_merge/weight"], params["context_merge/bias"])


def core_block(seq: torch.Tensor, params: ParamStore, heads: int) -> torch.Tensor:
    """Pre-LN residual transformer block; output shape equals input shape"""
    width = seq.shape[-1]
    if params["ln1/gamma"].shape != (width,):
        raise ShapeError(f"block width {params['ln1/gamma'].shape[0]} != sequence width {width}")
    hidden = seq + multi_head_attention(
        layer_norm(seq, params["ln1/gamma"], params["ln1/beta"], LN_EPS), params.scope("attn"), heads
    )
    return hidden + mlp(
        layer_norm(hidden, params["ln2/gamma"], params["ln2/beta"], LN_EPS), params.scope("mlp")
    )


def run_block_stack(
    seq: torch.Tensor, params: ParamStore, config: StoicConfig, schedule: str = "naive"
) -> torch.Tensor:
    """Apply the N core blocks.

    ``naive`` keeps all N intermediate sequences alive. ``ping_pong`` reuses two
    activation buffers and is inference only (in-place writes would clobber
    tensors autograd saved).
    """
    blocks = [params.scope(f"block{index}") for index in range(config.num_blocks)]
    if schedule == "naive":
        activations = [seq]
        for block in blocks:
            activations.append(core_block(activations[-1], block, config.heads))
        return activations[-1]
    if schedule == "ping_pong":
        if torch.is_grad_enabled():
            raise ValueError("ping_pong schedule runs without autograd; use torch.no_grad()")
        buffers = (torch.empty_like(seq), torch.empty_like(seq))
        buffers[0].copy_(seq)
        for index, block in enumerate(blocks):
            buffers[(index + 1) % 2].copy_(core_block(buffers[index % 2], block, config.heads))
        return buffers[len(blocks) % 2]
    raise ValueError(f"Unknown block schedule: {schedule}")


def reduce_channels(seq: torch.Tensor, params: ParamStore, config: StoicConfig) -> torch.Tensor:
    """[B, T, L] -> [B, T, C] by prefix slice or linear map"""
    if config.decoder_reduce == DecoderReduce.SLICE:
        if config.channels > seq.shape[-1]:
            raise ShapeError(f"cannot slice {config.channels} channels out of {seq.shape[-1]}")
        return seq[..., : config.channels]
    return linear(seq, params["decoder/reduce/weight"], params["decoder/reduce/bias"])


def decoder(seq: torch.Tensor, params: ParamStore, config: StoicConfig) -> torch.Tensor:
    """[B, H_o*W_o, L] -> [B, C, H, W]"""
    h_out, w_out = config.out_hw
    if seq.dim() != 3 or seq.shape[1] != h_out * w_out:
        raise ShapeError(f"decoder expects [B, {h_out * w_out}, L], got {tuple(seq.shape)}")
    normed = layer_norm(seq, params["decoder/ln/gamma"], params["decoder/ln/beta"], LN_EPS)
    reduced = reduce_channels(normed, params, config)
    grid = rearrange(reduced, "b (h w) c -> b c h w", h=h_out, w=w_out)
    kernel, stride, padding = config.decoder_geometry
    weight, bias = params["decoder/conv/weight"], params["decoder/conv/bias"]
    if config.decoder_conv == DecoderConv.CONV:
        return conv2d(grid, weight, bias, stride, padding)
    return conv_transpose2d(grid, weight, bias, stride, padding)


def stoic_forward(
    x_t: torch.Tensor,
    t: torch.Tensor | Sequence[int] | int,
    context: torch.Tensor | None,
    params: ParamStore,
    config: StoicConfig,
    schedule: str | None = None,
) -> torch.Tensor:
    """Noise prediction eps_hat(x_t, t[, c]) with the input's shape"""
    if x_t.dim() != 4 or tuple(x_t.shape[1:]) != config.image_dims:
        raise ShapeError(f"expected [B, {', '.join(map(str, config.image_dims))}], got {tuple(x_t.shape)}")
    if (context is None) != (config.context is None):
        raise ShapeError("context must be given exactly when the configuration is conditional")
    batch = x_t.shape[0]
    t = _as_timesteps(t, batch)

    plane = time_embed(t, params, config, batch)
    if config.time_concat == TimeConcat.BEFORE_CONV:
        seq = initial_conv(torch.cat([x_t, plane], dim=1), params, config)
    else:
        seq = apply_time_after_conv(initial_conv(x_t, params, config), plane, params)
    if context is not None:
        seq = apply_context(seq, context, params, config)

    if schedule is None:
        schedule = "naive" if torch.is_grad_enabled() else "ping_pong"
    seq = run_block_stack(seq, params, config, schedule)
    return decoder(seq, params, config)


@dataclass
class StoicNet:
    """Callable pairing a configuration with its parameters: ``net(x_t, t, context)``"""

    config: StoicConfig
    params: ParamStore = field(repr=False)

    @classmethod
    def create(cls, config: StoicConfig, seed: int, dtype: torch.dtype = torch.float32) -> "StoicNet":
        return cls(config, build_params(config, seed, dtype))

    def __call__(
        self, x_t: torch.Tensor, t: torch.Tensor | Sequence[int] | int, context: torch.Tensor | None = None
    ) -> torch.Tensor:
        return stoic_forward(x_t, t, context, self.params, self.config)

    @property
    def conditional(self) -> bool:
        return self.config.context is not None

    def null_context(self, batch: int, dtype: torch.dtype | None = None) -> torch.Tensor:
        spec = self.config.context
        if spec is None:
            raise ShapeError("unconditional network has no null context")
        dtype = dtype or self.params["init_conv/weight"].dtype
        return torch.zeros(batch, spec.num_tokens, spec.token_dim, dtype=dtype)

"""
Static parameter and multiply-accumulate accounting for a StoicConfig.

Convention: one MAC is one multiply-accumulate, one GMAC is 1e9 MACs. Only
convolutions, linear maps and the two attention contractions (scores and
values) are counted; normalization, softmax, activations, residual adds and
bias additions count as zero.
"""

import itertools
import logging
import os
from dataclasses import dataclass, field

import pandas as pd

from .arch import DecoderConv, DecoderReduce, InitialNorm, StoicConfig, StrideVariant, TimeConcat
from .errors import ConfigError

logger = logging.getLogger(__name__)

MAC_CONVENTION = (
    "1 MAC = one multiply-accumulate; GMAC = 1e9 MACs; "
    "norm/softmax/activation/bias/residual ops counted as 0"
)
CSV_COLUMNS = ["stride", "L", "N", "params", "gmacs"]


@dataclass(frozen=True)
class LayerCost:
    path: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    rows: list[LayerCost] = field(default_factory=list)
    batch: int = 1

    @property
    def total_params(self) -> int:
        return sum(row.params for row in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(row.macs for row in self.rows)

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(row.path, row.params, row.macs) for row in self.rows], columns=["path", "params", "macs"]
        )

    def render(self) -> str:
        lines = [f"# {MAC_CONVENTION}; batch={self.batch}", f"{'layer':<28s} {'params':>14s} {'MACs':>16s}"]
        for row in self.rows:
            lines.append(f"{row.path:<28s} {row.params:>14,d} {row.macs:>16,d}")
        lines.append(f"{'total':<28s} {self.total_params:>14,d} {self.total_macs:>16,d}")
        lines.append(f"GMAC: {self.gmacs:.3f}")
        return "\n".join(lines)


def _linear(path: str, fan_in: int, fan_out: int, positions: int) -> LayerCost:
    return LayerCost(path, fan_in * fan_out + fan_out, positions * fan_in * fan_out)


def _conv(path: str, kernel: int, c_in: int, c_out: int, positions: int) -> LayerCost:
    """``positions`` is the output extent for a conv, the input extent for a transposed conv"""
    taps = kernel * kernel * c_in * c_out
    return LayerCost(path, taps + c_out, taps * positions)


def _norm(path: str, width: int) -> LayerCost:
    return LayerCost(path, 2 * width, 0)


def layer_costs(config: StoicConfig) -> list[LayerCost]:
    """Per-layer costs for one batch element, walking the same graph as build_params"""
    width = config.embed_dim
    channels, height, width_px = config.image_dims
    h_out, w_out = config.out_hw
    seq = config.seq_len
    hidden = config.mlp_hidden
    rows = [_conv("init_conv", config.kernel, config.in_channels, width, seq)]
    if config.initial_norm == InitialNorm.BATCH_NORM:
        rows.append(_norm("init_norm", width))

    plane_h, plane_w = config.time_plane_hw
    rows.append(_linear("time_embed", config.time_dim, plane_h * plane_w, 1))
    if config.time_concat == TimeConcat.AFTER_CONV:
        rows.append(_linear("time_merge", width + 1, width, seq))
    if config.context is not None:
        tokens = config.context.num_tokens
        rows.append(_linear("context_embed", config.context.token_dim, seq, tokens))
        rows.append(_linear("context_merge", width + tokens, width, seq))

    for index in range(config.num_blocks):
        block = f"block{index}"
        rows.extend([
            _norm(f"{block}/ln1", width),
            _linear(f"{block}/attn/qkv", width, 3 * width, seq),
            LayerCost(f"{block}/attn/scores", 0, seq * seq * width),
            LayerCost(f"{block}/attn/values", 0, seq * seq * width),
            _linear(f"{block}/attn/out", width, width, seq),
            _norm(f"{block}/ln2", width),
            _linear(f"{block}/mlp/fc1", width, hidden, seq),
            _linear(f"{block}/mlp/fc2", hidden, width, seq),
        ])

    rows.append(_norm("decoder/ln", width))
    if config.decoder_reduce == DecoderReduce.LINEAR:
        rows.append(_linear("decoder/reduce", width, channels, seq))
    kernel = config.decoder_geometry[0]
    if config.decoder_conv == DecoderConv.CONV:
        rows.append(_conv("decoder/conv", kernel, channels, channels, height * width_px))
    else:
        rows.append(_conv("decoder/conv", kernel, channels, channels, h_out * w_out))
    return rows


def param_count(config: StoicConfig) -> ComplexityReport:
    """Parameter counts only; every row's MAC entry is 0"""
    return ComplexityReport([LayerCost(row.path, row.params, 0) for row in layer_costs(config)])


def mac_count(config: StoicConfig, batch: int = 1) -> ComplexityReport:
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    rows = [LayerCost(row.path, row.params, row.macs * batch) for row in layer_costs(config)]
    return ComplexityReport(rows, batch)


def scaling_row(config: StoicConfig) -> dict[str, object]:
    report = mac_count(config)
    return {
        "stride": config.stride_variant.value,
        "L": config.embed_dim,
        "N": config.num_blocks,
        "params": report.total_params,
        "gmacs": report.gmacs,
    }


def scaling_table(configs: list[StoicConfig], output_path: str | os.PathLike) -> pd.DataFrame:
    """Write one ``stride,L,N,params,gmacs`` row per configuration"""
    if not configs:
        raise ValueError("scaling_table needs at least one configuration")
    frame = pd.DataFrame([scaling_row(config) for config in configs], columns=CSV_COLUMNS)
    try:
        frame.to_csv(output_path, index=False, encoding="utf-8", lineterminator="\n")
    except OSError as e:
        logger.error(f"Error writing scaling table to {output_path}: {e}")
        raise
    logger.info(f"wrote {len(frame)} configurations to {output_path}")
    return frame


_SWEEP_KEYS = {"L": "embed_dim", "N": "num_blocks", "S": "stride_variant"}


def parse_sweep(text: str) -> dict[str, list]:
    """Parse ``"L=256,512;N=12,24,32"`` (optionally ``S=S1,S2``) into value lists"""
    sweep: dict[str, list] = {}
    for part in filter(None, (chunk.strip() for chunk in text.split(";"))):
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep or key not in _SWEEP_KEYS:
            raise ConfigError(f"Malformed sweep term {part!r}; expected L=..., N=... or S=...")
        if key in sweep:
            raise ConfigError(f"Sweep key {key} given twice")
        items = [value.strip() for value in values.split(",")]
        if not items or not all(items):
            raise ConfigError(f"Empty value in sweep term {part!r}")
        if key == "S":
            try:
                sweep[key] = [StrideVariant(item) for item in items]
            except ValueError:
                raise ConfigError(f"Unknown stride variant in {part!r}") from None
        else:
            try:
                sweep[key] = [int(item) for item in items]
            except ValueError:
                raise ConfigError(f"Non-integer value in sweep term {part!r}") from None
    if not sweep:
        raise ConfigError("Empty sweep")
    return sweep


def expand_sweep(base: StoicConfig, sweep: dict[str, list]) -> list[StoicConfig]:
    """Cross product in (S, L, N) order so rows at fixed L are contiguous with N increasing"""
    strides = sweep.get("S", [base.stride_variant])
    widths = sweep.get("L", [base.embed_dim])
    depths = sweep.get("N", [base.num_blocks])
    configs = []
    for stride, width, depth in itertools.product(strides, widths, depths):
        changes: dict[str, object] = {"embed_dim": width, "num_blocks": depth}
        if stride != base.stride_variant:
            changes["stride_variant"] = stride
        configs.append(base.with_(**changes))
    return configs

"""
Command-line subcommands: train, sample, analyze, gradcheck, inspect.

Exit codes: 0 ok, 2 configuration or usage error, 3 runtime error,
4 checkpoint/config incompatibility, 5 gradient check failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .arch import PRESETS, StoicConfig, StoicNet, build_params, stoic_forward
from .checkpoint import check_compatible, load_checkpoint
from .complexity import MAC_CONVENTION, expand_sweep, mac_count, parse_sweep, scaling_table
from .config import RunConfig, SampleSection, describe_keys, load_run_config
from .data import IMAGE_FORMATS, toy_contexts, write_image
from .diffusion import SAMPLER_ALIASES, sample
from .errors import (
    CheckpointError,
    ConfigError,
    GradCheckFailure,
    IncompatibleCheckpointError,
    StoicError,
)
from .numerics import finite_diff_grad_check
from .params import ParamStore
from .runtime import configure_determinism, dtype_for
from .training import train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECKPOINT = 4
EXIT_GRADCHECK = 5

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_MAX_WIDTH = 16
GRADCHECK_MAX_BLOCKS = 2
GRADCHECK_MAX_SIDE = 8
GRADCHECK_PERTURB = 0.1


def _progress_default() -> bool:
    return sys.stderr.isatty()


def cmd_train(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    config = run.stoic_config()
    hyper = run.train_hyper()
    dataset = run.dataset(base_dir=Path(args.config).parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    final = train(
        config, dataset, hyper, out, out / "metrics.csv",
        resume=resume, sched=run.schedule(), progress=args.progress,
    )
    print(f"trained {final.step} steps; checkpoint {out / 'final.stoi'}")
    return EXIT_OK


def _sampling_context(net: StoicNet, mode: int | None, count: int) -> torch.Tensor | None:
    spec = net.config.context
    if mode is None:
        return None
    if spec is None:
        raise ConfigError("--mode needs a conditional checkpoint")
    if not 0 <= mode < spec.token_dim:
        raise ConfigError(f"--mode must lie in [0, {spec.token_dim}), got {mode}")
    return toy_contexts(torch.full((count,), mode, dtype=torch.long), spec.num_tokens, spec.token_dim)


SAMPLE_KEYS = ("sampler", "steps", "guidance", "count", "seed", "batch_size", "format", "mode")


def sample_settings(args: argparse.Namespace, run: RunConfig | None) -> SampleSection:
    """[sample] values from the run config, overridden by any flag given on the command line"""
    base = run.sample if run is not None else SampleSection()
    flags = {key: getattr(args, key) for key in SAMPLE_KEYS if getattr(args, key) is not None}
    return base.model_copy(update=flags)


def cmd_sample(args: argparse.Namespace) -> int:
    run = load_run_config(args.config) if args.config else None
    settings = sample_settings(args, run)
    if settings.count < 0:
        raise ConfigError(f"--count must be >= 0, got {settings.count}")
    checkpoint = load_checkpoint(args.checkpoint)
    check_compatible(checkpoint.params, checkpoint.model)
    if run is not None:
        check_compatible(checkpoint.params, run.stoic_config())
    net = StoicNet(checkpoint.model, checkpoint.params)
    dtype = checkpoint.params["init_conv/weight"].dtype
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if settings.count == 0:
        print("nothing to sample (count 0)")
        return EXIT_OK

    images = sample(
        net,
        checkpoint.schedule,
        sampler=settings.sampler,
        steps=settings.steps,
        guidance=settings.guidance,
        context=_sampling_context(net, settings.mode, settings.count),
        seed=settings.seed,
        count=settings.count,
        batch_size=settings.batch_size,
        dtype=dtype,
        progress=args.progress,
    )
    for index, image in enumerate(images):
        write_image(image.clamp(-1.0, 1.0), out / f"sample_{index:05}.{settings.format}", settings.format)
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK



def _analysis_base(args: argparse.Namespace) -> StoicConfig:
    if args.config:
        return load_run_config(args.config).stoic_config()
    if args.preset:
        return PRESETS[args.preset]
    return StoicConfig()


def cmd_analyze(args: argparse.Namespace) -> int:
    base = _analysis_base(args)
    configs = expand_sweep(base, parse_sweep(args.sweep)) if args.sweep else [base]
    frame = scaling_table(configs, args.out)
    print(f"# {MAC_CONVENTION}")
    print(frame.to_string(index=False))
    return EXIT_OK


def reduced_config(config: StoicConfig) -> StoicConfig:
    """Shrink a configuration to gradient-check size (L <= 16, N <= 2, small image)"""
    channels, height, width = config.image_dims
    if max(height, width) > GRADCHECK_MAX_SIDE:
        height, width = 4, 4
    embed_dim = min(config.embed_dim, GRADCHECK_MAX_WIDTH)
    changes = {
        "embed_dim": embed_dim,
        "num_blocks": min(config.num_blocks, GRADCHECK_MAX_BLOCKS),
        "image_dims": (min(channels, embed_dim), height, width),
        "time_dim": min(config.time_dim, 16),
    }
    if config.context is not None:
        changes["context"] = type(config.context)(min(config.context.num_tokens, 4), min(config.context.token_dim, 4))
    return config.with_(**changes)


class _ScaleGrad(torch.autograd.Function):
    """Identity forward; doubles the gradient on the way back"""

    @staticmethod
    def forward(ctx, tensor):
        return tensor.view_as(tensor)

    @staticmethod
    def backward(ctx, grad):
        return 2.0 * grad


def gradcheck_objective(config: StoicConfig, dtype: torch.dtype, seed: int = 0, corrupt: bool = False):
    """A fixed random scalar functional of the network output"""
    generator = torch.Generator().manual_seed(seed + 1)
    batch = 2
    x = torch.randn((batch, *config.image_dims), generator=generator, dtype=dtype)
    t = torch.randint(1, 1001, (batch,), generator=generator)
    weights = torch.randn((batch, *config.image_dims), generator=generator, dtype=dtype)
    context = None
    if config.context is not None:
        spec = config.context
        context = torch.randn((batch, spec.num_tokens, spec.token_dim), generator=generator, dtype=dtype)

    def objective(params: ParamStore) -> torch.Tensor:
        if corrupt:
            params = ParamStore({
                path: _ScaleGrad.apply(tensor) if path == "decoder/conv/weight" else tensor
                for path, tensor in params.items()
            })
        out = stoic_forward(x, t, context, params, config, schedule="naive")
        return (out * weights).sum()

    return objective


def cmd_gradcheck(args: argparse.Namespace) -> int:
    base = load_run_config(args.config).stoic_config() if args.config else StoicConfig(
        image_dims=(1, 4, 4), embed_dim=16, num_blocks=2
    )
    config = reduced_config(base)
    dtype = dtype_for(args.precision)
    params = build_params(config, args.seed, dtype)
    # move away from the zero-initialized decoder so every path carries gradient
    generator = torch.Generator().manual_seed(args.seed)
    for path in params:
        noise = torch.randn(params[path].shape, generator=generator, dtype=dtype)
        params.replace(path, params[path] + GRADCHECK_PERTURB * noise)

    logger.info(f"gradient check: L={config.embed_dim}, N={config.num_blocks}, image {config.image_dims}, {dtype}")
    report = finite_diff_grad_check(
        gradcheck_objective(config, dtype, args.seed, corrupt=args.corrupt_backward),
        params,
        max_coords_per_tensor=args.max_coords,
        seed=args.seed,
    )
    print(report.render())
    if not report.max_rel_error < args.tolerance:
        raise GradCheckFailure(f"max relative error {report.max_rel_error:.3e} >= {args.tolerance:.1e}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        check_compatible(checkpoint.params, checkpoint.model)
        config = checkpoint.model
        print(json.dumps(checkpoint.config_json(), indent=2, sort_keys=True))
        print(f"step: {checkpoint.step}")
        print(f"tensors: {len(checkpoint.params)}, scalars: {checkpoint.params.num_scalars()}")
    else:
        run: RunConfig = load_run_config(args.config)
        config = run.stoic_config()
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    print(mac_count(config).render())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stoic",
        description="Token-free initial-convolution diffusion models: train, sample and analyze.",
        epilog=(
            "exit codes: 0 ok, 2 config/usage error, 3 runtime error, "
            "4 checkpoint/config incompatibility, 5 gradient check failure\n"
            "environment: STOIC_THREADS caps torch threads, STOIC_LOG_LEVEL sets the default log level\n\n"
            "config file keys (key = value under [section]; # starts a comment):\n" + describe_keys()
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging level (default: $STOIC_LOG_LEVEL or INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="RunConfig file")
    p.add_argument("--out", required=True, help="directory for checkpoints and metrics.csv")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--progress", action=argparse.BooleanOptionalAction, default=_progress_default())
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sample", help="draw images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--config", default=None,
        help="optional RunConfig: its model must match the checkpoint and its [sample] section sets the defaults",
    )
    p.add_argument("--sampler", choices=sorted(SAMPLER_ALIASES), default=None, help="default: ancestral")
    p.add_argument("--steps", type=int, default=None, help="sampling steps (default: T)")
    p.add_argument("--guidance", type=float, default=None, help="classifier-free guidance scale (default: 1.0)")
    p.add_argument("--count", type=int, default=None, help="default: 16")
    p.add_argument("--seed", type=int, default=None, help="default: 0")
    p.add_argument("--batch-size", type=int, default=None, help="chains per forward pass (default: 64)")
    p.add_argument("--mode", type=int, default=None, help="toy mode used as context for conditional models")
    p.add_argument("--format", choices=IMAGE_FORMATS, default=None, help="default: ppm")
    p.add_argument("--out", required=True)
    p.add_argument("--progress", action=argparse.BooleanOptionalAction, default=_progress_default())
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("analyze", help="write the params/GMAC scaling table")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--config", default=None)
    source.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--sweep", default=None, help='e.g. "L=256,512;N=12,24,32;S=S1,S2"')
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network on a reduced model")
    p.add_argument("--config", default=None)
    p.add_argument("--precision", type=int, choices=[32, 64], default=64)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--max-coords", type=int, default=8, help="coordinates checked per tensor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-backward", action="store_true", help="negative control: double one gradient")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print a configuration and its per-layer cost table")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--checkpoint", default=None)
    target.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_inspect)
    return parser


def run(args: argparse.Namespace) -> int:
    """Dispatch a parsed command and map failures onto exit codes"""
    configure_determinism()
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (IncompatibleCheckpointError, CheckpointError) as e:
        logger.error(f"Checkpoint error: {e}")
        return EXIT_CHECKPOINT
    except GradCheckFailure as e:
        logger.error(f"Gradient check failed: {e}")
        return EXIT_GRADCHECK
    except (StoicError, OSError, ValueError, RuntimeError) as e:
        logger.error(f"Error running {args.command}: {e}")
        return EXIT_RUNTIME

"""
AdamW training of the noise-prediction objective with condition dropout
"""

import logging
import os
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import pandas as pd
import torch
from tqdm import tqdm

from .arch import StoicConfig, StoicNet, build_params
from .checkpoint import Checkpoint, check_compatible, save_checkpoint
from .data import Dataset
from .diffusion import NoiseSchedule, ddpm_loss, make_schedule
from .errors import ConfigError, IncompatibleCheckpointError, NonFiniteError, ShapeError
from .numerics import backward
from .params import ParamStore

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "loss"]
_MOMENTS = ("exp_avg", "exp_avg_sq", "step")


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 64
    steps: int = 1000
    cond_dropout: float = 0.1
    seed: int = 0
    guidance_training: bool = False
    checkpoint_every: int = 0
    log_every: int = 100
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigError(f"cond_dropout must lie in [0, 1], got {self.cond_dropout}")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError(f"need batch_size >= 1 and steps >= 0, got {self.batch_size}, {self.steps}")
        if self.checkpoint_every < 0 or self.log_every < 1:
            raise ConfigError("checkpoint_every must be >= 0 and log_every >= 1")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.diffusion_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainHyper":
        return cls(**data)


def build_optimizer(params: ParamStore, hyper: TrainHyper) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [params[path] for path in params],
        lr=hyper.lr,
        betas=hyper.betas,
        eps=hyper.eps,
        weight_decay=hyper.weight_decay,
        foreach=False,
    )


def export_optimizer_state(optimizer: torch.optim.Optimizer, params: ParamStore) -> dict[str, torch.Tensor]:
    """Moments per parameter path: ``<path>/exp_avg``, ``<path>/exp_avg_sq``, ``<path>/step``"""
    state: dict[str, torch.Tensor] = {}
    for path in params:
        entry = optimizer.state.get(params[path])
        if not entry:
            continue
        for key in _MOMENTS:
            state[f"{path}/{key}"] = entry[key].detach().clone()
    return state


def import_optimizer_state(
    optimizer: torch.optim.Optimizer, params: ParamStore, state: Mapping[str, torch.Tensor]
) -> None:
    for path in params:
        if f"{path}/step" not in state:
            continue
        leaf = params[path]
        entry = {key: state[f"{path}/{key}"].clone() for key in _MOMENTS}
        if entry["exp_avg"].shape != leaf.shape or entry["exp_avg_sq"].shape != leaf.shape:
            raise ShapeError(f"{path}: optimizer moments do not match parameter shape {tuple(leaf.shape)}")
        optimizer.state[leaf] = entry


def completed_steps(optimizer: torch.optim.Optimizer, params: ParamStore) -> int:
    """Updates already applied by ``optimizer`` (0 before the first)"""
    for path in params:
        entry = optimizer.state.get(params[path])
        if entry:
            return int(entry["step"])
    return 0


def adamw_step(
    optimizer: torch.optim.AdamW,
    params: ParamStore,
    grads: Mapping[str, torch.Tensor],
    step_index: int | None = None,
) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    ``optimizer`` is built once by build_optimizer over the same store and
    keeps the moments between calls. ``step_index`` defaults to the next step.
    """
    for path in params:
        if path not in grads:
            raise ShapeError(f"no gradient for {path}")
        if grads[path].shape != params[path].shape:
            raise ShapeError(
                f"{path}: gradient shape {tuple(grads[path].shape)} != parameter shape {tuple(params[path].shape)}"
            )
    done = completed_steps(optimizer, params)
    if step_index is not None and step_index != done + 1:
        if step_index < 1:
            raise ValueError(f"step_index must be >= 1, got {step_index}")
        raise ValueError(f"optimizer state is at step {done}, cannot apply step {step_index}")

    for path in params:
        params[path].grad = grads[path].detach().to(params[path].dtype)
    optimizer.step()
    params.zero_grad()


def train_step(
    net: StoicNet,
    optimizer: torch.optim.Optimizer,
    sched: NoiseSchedule,
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    context: torch.Tensor | None,
) -> float:
    """Loss, backward and one adamw_step; returns the loss before the update"""
    params = net.params
    params.zero_grad()
    loss = ddpm_loss(net, x0, t, eps, sched, context)
    backward(loss)
    grads = {
        path: params[path].grad if params[path].grad is not None else torch.zeros_like(params[path])
        for path in params
    }
    adamw_step(optimizer, params, grads)
    return loss.item()



class MetricsLog:
    """``step,loss`` CSV (UTF-8, LF) appended in chunks through pandas"""

    def __init__(self, path: str | os.PathLike, append: bool = False):
        self.path = Path(path)
        self.rows: list[tuple[int, float]] = []
        if not (append and self.path.exists()):
            self._write(pd.DataFrame(columns=LOG_COLUMNS), mode="w", header=True)

    def add(self, step: int, loss: float) -> None:
        self.rows.append((step, loss))

    def flush(self) -> None:
        if self.rows:
            self._write(pd.DataFrame(self.rows, columns=LOG_COLUMNS), mode="a", header=False)
            self.rows = []

    def _write(self, frame: pd.DataFrame, mode: str, header: bool) -> None:
        try:
            frame.to_csv(self.path, mode=mode, header=header, index=False, encoding="utf-8", lineterminator="\n")
        except OSError as e:
            logger.error(f"Error writing metrics log {self.path}: {e}")
            raise


def _draw_batch(
    dataset: Dataset,
    config: StoicConfig,
    hyper: TrainHyper,
    sched: NoiseSchedule,
    generator: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor | None]:
    indices = torch.randint(0, len(dataset), (hyper.batch_size,), generator=generator)
    x0, contexts = dataset.batch(indices)
    t = torch.randint(1, sched.T + 1, (hyper.batch_size,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    if config.context is None:
        return x0, t, eps, None

    # drawn for every conditional model so runs with and without contexts stay in step
    keep = torch.rand(hyper.batch_size, generator=generator) >= hyper.cond_dropout
    spec = config.context
    if contexts is None:
        return x0, t, eps, torch.zeros(hyper.batch_size, spec.num_tokens, spec.token_dim, dtype=x0.dtype)
    if hyper.guidance_training:
        contexts = contexts * keep.to(contexts.dtype).view(-1, 1, 1)
    return x0, t, eps, contexts


def _check_inputs(config: StoicConfig, dataset: Dataset, hyper: TrainHyper) -> None:
    if tuple(dataset.image_dims) != config.image_dims:
        raise ShapeError(f"dataset images {dataset.image_dims} do not match model {config.image_dims}")
    if hyper.guidance_training:
        if config.context is None:
            raise ConfigError("guidance_training needs a model with context conditioning")
        if not dataset.conditional:
            raise ConfigError(f"guidance_training needs contexts, dataset {dataset.name} has none")
    if dataset.conditional and config.context is not None:
        expected = (config.context.num_tokens, config.context.token_dim)
        if tuple(dataset.contexts.shape[1:]) != expected:
            raise ShapeError(f"dataset contexts {tuple(dataset.contexts.shape[1:])} != model context {expected}")
    elif dataset.conditional:
        logger.warning(f"model is unconditional; ignoring the contexts of {dataset.name}")


def train(
    config: StoicConfig,
    dataset: Dataset,
    hyper: TrainHyper,
    checkpoint_dir: str | os.PathLike,
    log_path: str | os.PathLike,
    resume: Checkpoint | None = None,
    sched: NoiseSchedule | None = None,
    progress: bool = False,
) -> Checkpoint:
    """Minimize the noise-prediction MSE for ``hyper.steps`` total steps.

    Writes ``step_{step:07d}.stoi`` every ``checkpoint_every`` steps and
    ``final.stoi`` at the end. With ``resume`` the run continues from the
    checkpoint's step and appends to the existing log. ``sched`` defaults to
    the linear schedule described by ``hyper``.
    """
    _check_inputs(config, dataset, hyper)
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    if sched is None:
        sched = hyper.schedule()
    elif sched.T != hyper.diffusion_steps:
        raise ConfigError(f"schedule has T={sched.T}, hyper says {hyper.diffusion_steps}")
    generator = torch.Generator().manual_seed(hyper.seed)

    if resume is None:
        params = build_params(config, hyper.seed)
        start = 0
    else:
        if resume.model != config:
            raise IncompatibleCheckpointError("checkpoint was trained with a different model configuration")
        check_compatible(resume.params, config)
        params = resume.params.clone()
        start = resume.step
        generator.set_state(resume.rng["train/generator"])
        logger.info(f"resuming from step {start}")

    params.requires_grad_(True)
    net = StoicNet(config, params)
    optimizer = build_optimizer(params, hyper)
    if resume is not None:
        import_optimizer_state(optimizer, params, resume.optimizer)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            model=config,
            schedule=sched,
            hyper=hyper.to_dict(),
            step=step,
            params=params.clone(),
            optimizer=export_optimizer_state(optimizer, params),
            rng={"train/generator": generator.get_state()},
        )

    metrics = MetricsLog(log_path, append=resume is not None)
    recent: list[float] = []
    for step in tqdm(range(start + 1, hyper.steps + 1), disable=not progress, desc="train"):
        x0, t, eps, context = _draw_batch(dataset, config, hyper, sched, generator)
        try:
            loss = train_step(net, optimizer, sched, x0, t, eps, context)
        except NonFiniteError:
            metrics.flush()
            raise NonFiniteError(f"step {step}: loss became NaN or Inf") from None
        metrics.add(step, loss)
        recent.append(loss)
        if step % hyper.log_every == 0:
            metrics.flush()
            logger.info(f"step {step}: mean loss {sum(recent) / len(recent):.5f}")
            recent = []
        if hyper.checkpoint_every and step % hyper.checkpoint_every == 0:
            save_checkpoint(checkpoint_dir / f"step_{step:07d}.stoi", snapshot(step))
    metrics.flush()

    final = snapshot(max(start, hyper.steps))
    save_checkpoint(checkpoint_dir / "final.stoi", final)
    params.requires_grad_(False)
    return final

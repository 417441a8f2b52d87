"""
Variance-preserving diffusion: schedules, forward process, losses, guidance and samplers.

Discrete timesteps run 1..T with alpha_bar_0 = 1. The continuous-time VP SDE
used by the Euler-Maruyama sampler runs on t in (0, 1] with a linear beta(t).
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .errors import ShapeError

logger = logging.getLogger(__name__)

SAMPLERS = ("ancestral", "euler_maruyama")
SAMPLER_ALIASES = {"em": "euler_maruyama", "ancestral": "ancestral", "euler_maruyama": "euler_maruyama"}
TERMINAL_TIME = 1e-3


class EpsNet(Protocol):
    def __call__(
        self, x_t: torch.Tensor, t: torch.Tensor, context: torch.Tensor | None = None
    ) -> torch.Tensor: ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete beta/alpha/alpha_bar tables (float64) plus continuous beta(t) parameters"""

    num_steps: int
    beta_start: float
    beta_end: float
    sde_beta_min: float
    sde_beta_max: float
    variance: str = "posterior"
    beta: torch.Tensor = field(init=False, repr=False)
    alpha: torch.Tensor = field(init=False, repr=False)
    alpha_bar: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        beta = torch.linspace(self.beta_start, self.beta_end, self.num_steps, dtype=torch.float64)
        alpha = 1.0 - beta
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", torch.cumprod(alpha, dim=0))

    @property
    def T(self) -> int:
        return self.num_steps

    @property
    def sigma2(self) -> torch.Tensor:
        return 1.0 - self.alpha_bar

    @property
    def snr(self) -> torch.Tensor:
        return self.alpha_bar / (1.0 - self.alpha_bar)

    @property
    def posterior_variance(self) -> torch.Tensor:
        """beta_tilde_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)"""
        previous = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bar[:-1]])
        return self.beta * (1.0 - previous) / (1.0 - self.alpha_bar)

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        self.check_t(t)
        return float(self.alpha_bar[t - 1])

    def check_t(self, t: int | torch.Tensor) -> None:
        low, high = (int(t.min()), int(t.max())) if torch.is_tensor(t) else (int(t), int(t))
        if low < 1 or high > self.num_steps:
            raise ValueError(f"timestep out of range [1, {self.num_steps}]: {low}..{high}")

    def beta_continuous(self, t: float) -> float:
        return self.sde_beta_min + t * (self.sde_beta_max - self.sde_beta_min)

    def sde_marginal(self, t: float) -> tuple[float, float]:
        """(mean coefficient, std) of the continuous VP marginal q(x_t | x_0)"""
        integral = self.sde_beta_min * t + 0.5 * (self.sde_beta_max - self.sde_beta_min) * t * t
        return math.exp(-0.5 * integral), math.sqrt(-math.expm1(-integral))

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_steps": self.num_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "sde_beta_min": self.sde_beta_min,
            "sde_beta_max": self.sde_beta_max,
            "variance": self.variance,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NoiseSchedule":
        return make_schedule(
            data["num_steps"],
            data["beta_start"],
            data["beta_end"],
            sde_beta_min=data.get("sde_beta_min"),
            sde_beta_max=data.get("sde_beta_max"),
            variance=data.get("variance", "posterior"),
        )


def make_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    sde_beta_min: float | None = None,
    sde_beta_max: float | None = None,
    variance: str = "posterior",
) -> NoiseSchedule:
    """Linear beta schedule, endpoints inclusive.

    The continuous beta(t) defaults to the discrete schedule scaled by T, which
    for the default schedule is beta_min=0.1, beta_max=20.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if variance not in ("posterior", "beta"):
        raise ValueError(f"variance must be 'posterior' or 'beta', got {variance!r}")
    sde_beta_min = beta_start * T if sde_beta_min is None else sde_beta_min
    sde_beta_max = beta_end * T if sde_beta_max is None else sde_beta_max
    if sde_beta_min < 0 or sde_beta_max < sde_beta_min:
        raise ValueError(f"need 0 <= sde_beta_min <= sde_beta_max, got {sde_beta_min}, {sde_beta_max}")
    return NoiseSchedule(T, beta_start, beta_end, sde_beta_min, sde_beta_max, variance)


def _coef(table: torch.Tensor, t: int | torch.Tensor, like: torch.Tensor) -> float | torch.Tensor:
    """Gather table[t - 1], shaped to broadcast against ``like`` along the batch axis"""
    if torch.is_tensor(t) and t.dim() > 0:
        values = table[t.long() - 1].to(like.dtype)
        return values.view(-1, *([1] * (like.dim() - 1)))
    return float(table[int(t) - 1])


def forward_sample(
    x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps"""
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    sched.check_t(t)
    signal = _coef(sched.alpha_bar.sqrt(), t, x0)
    noise = _coef(sched.sigma2.sqrt(), t, x0)
    return signal * x0 + noise * eps


def ddpm_loss(
    net: EpsNet,
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
    context: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared error between the injected and the predicted noise"""
    x_t = forward_sample(x0, t, eps, sched)
    return F.mse_loss(net(x_t, t, context), eps)


def score_from_eps(eps_hat: torch.Tensor, t: int | torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """s = -eps_hat / sigma_t with sigma_t = sqrt(1 - alpha_bar_t)"""
    sched.check_t(t)
    sigma = _coef(sched.sigma2.sqrt(), t, eps_hat)
    if (torch.is_tensor(sigma) and bool((sigma == 0).any())) or (not torch.is_tensor(sigma) and sigma == 0):
        raise ValueError("sigma_t is zero; the score is undefined")
    return -eps_hat / sigma


def score_loss(
    net: EpsNet,
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
    context: torch.Tensor | None = None,
) -> torch.Tensor:
    """sigma_t^2-weighted denoising score matching against grad log q(x_t | x0).

    With the network read as a score model through ``score_from_eps`` this
    equals ``ddpm_loss`` up to rounding.
    """
    x_t = forward_sample(x0, t, eps, sched)
    score = score_from_eps(net(x_t, t, context), t, sched)
    sigma2 = _coef(sched.sigma2, t, x0)
    target = -(x_t - _coef(sched.alpha_bar.sqrt(), t, x0) * x0) / sigma2
    return (sigma2 * (score - target) ** 2).mean()


def reconstruct_x0(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: int | torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """x0_hat = x_t / alpha_t - sigma_t eps_hat / alpha_t"""
    sched.check_t(t)
    signal = _coef(sched.alpha_bar.sqrt(), t, x_t)
    if (torch.is_tensor(signal) and bool((signal == 0).any())) or (not torch.is_tensor(signal) and signal == 0):
        raise ValueError("alpha_bar_t is zero; x0 cannot be recovered")
    noise = _coef(sched.sigma2.sqrt(), t, x_t)
    return (x_t - noise * eps_hat) / signal


def cfg_eps(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, g: float) -> torch.Tensor:
    """eps_uncond + g (eps_cond - eps_uncond), exact at g = 0 and g = 1"""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"guidance shapes differ: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    return torch.lerp(eps_uncond, eps_cond, g)


def ancestral_step(
    x_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    sched: NoiseSchedule,
    noise: torch.Tensor,
    t_prev: int | None = None,
) -> torch.Tensor:
    """One reverse Markov step from t to t_prev (default t - 1).

    For t_prev = t - 1 this is the DDPM update with beta_t. Strided steps use
    the respaced beta' = 1 - alpha_bar_t / alpha_bar_{t_prev}. The step that
    lands on t_prev = 0 adds no noise.
    """
    sched.check_t(t)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev must lie in [0, {t}), got {t_prev}")
    if noise.shape != x_t.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != x_t shape {tuple(x_t.shape)}")
    alpha_bar = sched.alpha_bar_at(t)
    alpha_bar_prev = sched.alpha_bar_at(t_prev)
    beta = float(sched.beta[t - 1]) if t_prev == t - 1 else 1.0 - alpha_bar / alpha_bar_prev

    mean = (x_t - beta / math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(1.0 - beta)
    if t_prev == 0:
        return mean
    if sched.variance == "posterior":
        variance = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    else:
        variance = beta
    return mean + math.sqrt(variance) * noise


def euler_maruyama_step(
    x: torch.Tensor,
    t_cont: float,
    dt: float,
    score: torch.Tensor,
    sched: NoiseSchedule,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Reverse VP-SDE step: x + [-beta(t) x / 2 - beta(t) score] dt + sqrt(beta(t) |dt|) noise"""
    if not 0.0 < t_cont <= 1.0:
        raise ValueError(f"t_cont must lie in (0, 1], got {t_cont}")
    if dt >= 0:
        raise ValueError(f"reverse-time step needs dt < 0, got {dt}")
    beta = sched.beta_continuous(t_cont)
    drift = -0.5 * beta * x - beta * score
    return x + drift * dt + math.sqrt(beta * abs(dt)) * noise


def timestep_subsequence(T: int, steps: int) -> list[int]:
    """Descending, evenly strided timesteps starting at T; includes t=1 when steps >= 2"""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps >= T:
        return list(range(T, 0, -1))
    if steps == 1:
        return [T]
    return [int(t) for t in np.round(np.linspace(T, 1, steps)).astype(int)]


class ChainNoise:
    """Independent Gaussian streams per chain, keyed by (seed, chain index).

    Drawing for a batch of chains gives the same numbers as drawing for each
    chain alone, so batched and serial sampling agree.
    """

    def __init__(self, seed: int, chains: range | list[int]):
        self.generators = []
        for chain in chains:
            state = np.random.SeedSequence([seed, chain]).generate_state(1, dtype=np.uint64)[0]
            self.generators.append(torch.Generator().manual_seed(int(state)))

    def draw(self, shape: tuple[int, ...], dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in self.generators])


def _guided_eps(
    net: EpsNet,
    x: torch.Tensor,
    t: int,
    context: torch.Tensor | None,
    null_context: torch.Tensor | None,
    guidance: float,
) -> torch.Tensor:
    timesteps = torch.full((x.shape[0],), t, dtype=torch.long)
    if context is None:
        return net(x, timesteps, null_context)
    eps_cond = net(x, timesteps, context)
    if guidance == 1.0:
        return eps_cond
    return cfg_eps(eps_cond, net(x, timesteps, null_context), guidance)


def _sample_chunk(
    net: EpsNet,
    sched: NoiseSchedule,
    sampler: str,
    steps: int,
    guidance: float,
    context: torch.Tensor | None,
    null_context: torch.Tensor | None,
    chains: ChainNoise,
    shape: tuple[int, ...],
    dtype: torch.dtype,
    progress: bool,
) -> torch.Tensor:
    x = chains.draw(shape, dtype)
    if sampler == "ancestral":
        timesteps = timestep_subsequence(sched.T, steps)
        if len(timesteps) == 1:
            # one collapsed DDPM step with beta_T, no noise
            eps_hat = _guided_eps(net, x, sched.T, context, null_context, guidance)
            return ancestral_step(x, sched.T, eps_hat, sched, torch.zeros_like(x))
        for index, t in enumerate(tqdm(timesteps, disable=not progress, desc="ancestral", leave=False)):
            t_prev = timesteps[index + 1] if index + 1 < len(timesteps) else 0
            eps_hat = _guided_eps(net, x, t, context, null_context, guidance)
            noise = chains.draw(shape, dtype) if t_prev > 0 else torch.zeros_like(x)
            x = ancestral_step(x, t, eps_hat, sched, noise, t_prev=t_prev)
        return x

    grid = np.linspace(1.0, TERMINAL_TIME, steps + 1)
    for index in tqdm(range(steps), disable=not progress, desc="euler-maruyama", leave=False):
        t_cont, dt = float(grid[index]), float(grid[index + 1] - grid[index])
        t_index = min(max(int(round(t_cont * sched.T)), 1), sched.T)
        eps_hat = _guided_eps(net, x, t_index, context, null_context, guidance)
        _, sigma = sched.sde_marginal(t_cont)
        score = -eps_hat / sigma
        noise = chains.draw(shape, dtype) if index + 1 < steps else torch.zeros_like(x)
        x = euler_maruyama_step(x, t_cont, dt, score, sched, noise)
    return x


def sample(
    net: EpsNet,
    sched: NoiseSchedule,
    sampler: str = "ancestral",
    steps: int | None = None,
    guidance: float = 1.0,
    context: torch.Tensor | None = None,
    seed: int = 0,
    count: int = 1,
    shape: tuple[int, ...] | None = None,
    null_context: Callable[[int, torch.dtype], torch.Tensor] | None = None,
    batch_size: int = 64,
    dtype: torch.dtype = torch.float32,
    progress: bool = False,
) -> torch.Tensor:
    """Run the reverse process from standard normal noise for ``count`` chains.

    ``context`` is either one context per chain ([count, tokens, dim]) or None.
    With a context, guidance blends conditional and null-context predictions;
    the null context is all zeros unless ``null_context`` builds it. Chain i
    draws all its noise from the stream keyed by (seed, i).
    """
    sampler = SAMPLER_ALIASES.get(sampler, sampler)
    if sampler not in SAMPLERS:
        raise ValueError(f"Unknown sampler {sampler!r}; expected one of {SAMPLERS}")
    steps = sched.T if steps is None else steps
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if batch_size < 1 or count < 0:
        raise ValueError(f"need batch_size >= 1 and count >= 0, got {batch_size}, {count}")
    if shape is None:
        shape = tuple(net.config.image_dims)
    conditional = context is not None or getattr(getattr(net, "config", None), "context", None) is not None
    if context is not None and context.shape[0] != count:
        raise ShapeError(f"need one context per chain: {context.shape[0]} != {count}")
    if null_context is None and conditional:
        null_context = getattr(net, "null_context", None) or (
            lambda batch, dtype: torch.zeros((batch, *context.shape[1:]), dtype=dtype)
        )

    logger.info(f"sampling {count} chains with {sampler}, {steps} steps, guidance {guidance}")
    outputs = []
    with torch.no_grad():
        for start in range(0, count, batch_size):
            stop = min(start + batch_size, count)
            chunk_context = None if context is None else context[start:stop].to(dtype)
            chunk_null = null_context(stop - start, dtype) if conditional else None
            outputs.append(
                _sample_chunk(
                    net, sched, sampler, steps, guidance, chunk_context, chunk_null,
                    ChainNoise(seed, range(start, stop)), shape, dtype, progress,
                )
            )
    if not outputs:
        return torch.zeros((0, *shape), dtype=dtype)
    return torch.cat(outputs)

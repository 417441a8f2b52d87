"""
Primitive layers over explicit weight tensors, plus gradient utilities.

Tensors are ``torch.Tensor``; reverse-mode differentiation is torch autograd.
Every op validates its geometry up front and raises ``ShapeError`` instead of
letting torch fail deep inside a kernel.
"""

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from einops import rearrange

from .errors import NonFiniteError, ShapeError
from .params import ParamStore

logger = logging.getLogger(__name__)

REL_ERROR_FLOOR = 1e-12


def check_finite(tensor: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """Raise NonFiniteError if ``tensor`` holds any NaN or Inf"""
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return tensor


def conv_out_dims(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    """Output extent of a convolution: floor((H + 2P - K) / S) + 1 per axis"""
    _check_geometry(kernel, stride, padding)
    h_out = (h + 2 * padding - kernel) // stride + 1
    w_out = (w + 2 * padding - kernel) // stride + 1
    if h + 2 * padding < kernel or w + 2 * padding < kernel or h_out < 1 or w_out < 1:
        raise ShapeError(
            f"Padded input {h + 2 * padding}x{w + 2 * padding} is smaller than kernel {kernel}"
        )
    return h_out, w_out


def conv_transpose_out_dims(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    """Output extent of a transposed convolution: (H - 1) * S - 2P + K per axis"""
    _check_geometry(kernel, stride, padding)
    h_out = (h - 1) * stride - 2 * padding + kernel
    w_out = (w - 1) * stride - 2 * padding + kernel
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"Transposed convolution output {h_out}x{w_out} is empty")
    return h_out, w_out


def _check_geometry(kernel: int, stride: int, padding: int) -> None:
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"Invalid geometry K={kernel}, S={stride}, P={padding}")


def _check_square_kernel(weight: torch.Tensor) -> int:
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"Expected a square 4-D kernel, got {tuple(weight.shape)}")
    return weight.shape[2]


def conv2d(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, stride: int, padding: int
) -> torch.Tensor:
    """Cross-correlation with zero padding. ``weight`` is [C_out, C_in, K, K]."""
    if x.dim() != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W], got {tuple(x.shape)}")
    kernel = _check_square_kernel(weight)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    conv_out_dims(x.shape[2], x.shape[3], kernel, stride, padding)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, stride: int, padding: int
) -> torch.Tensor:
    """Adjoint of conv2d with the same geometry. ``weight`` is [C_in, C_out, K, K]."""
    if x.dim() != 4:
        raise ShapeError(f"conv_transpose2d expects [B, C, H, W], got {tuple(x.shape)}")
    kernel = _check_square_kernel(weight)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"conv_transpose2d input has {x.shape[1]} channels, weight expects {weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"conv_transpose2d bias shape {tuple(bias.shape)} != ({weight.shape[1]},)")
    conv_transpose_out_dims(x.shape[2], x.shape[3], kernel, stride, padding)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """y = x W^T + b with ``weight`` stored [out, in]"""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear input width {x.shape[-1]} != weight input width {weight.shape[1]}")
    return F.linear(x, weight, bias)


def layer_norm(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"layer_norm affine shapes must be ({width},)")
    return F.layer_norm(x, (width,), gamma, beta, eps)


def batch_norm(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Normalize [B, C, H, W] with the statistics of the batch itself (no running averages)"""
    if x.dim() != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm shape mismatch for input {tuple(x.shape)}")
    return F.batch_norm(x, None, None, gamma, beta, training=True, eps=eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # tanh approximation everywhere
    return F.gelu(x, approximate="tanh")


def mlp(x: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """linear(L -> rL) -> gelu -> linear(rL -> L)"""
    hidden = gelu(linear(x, params["fc1_w"], params["fc1_b"]))
    return linear(hidden, params["fc2_w"], params["fc2_b"])


def multi_head_attention(
    x: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    heads: int,
    return_weights: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product self-attention over [B, T, L].

    ``params`` holds ``qkv_w`` [3L, L], ``qkv_b`` [3L], ``out_w`` [L, L], ``out_b`` [L].
    No positional information is injected.
    """
    if x.dim() != 3:
        raise ShapeError(f"attention expects [B, T, L], got {tuple(x.shape)}")
    width = x.shape[-1]
    if heads < 1 or width % heads:
        raise ShapeError(f"Embedding width {width} is not divisible by {heads} heads")
    head_dim = width // heads

    qkv = linear(x, params["qkv_w"], params["qkv_b"])
    q, k, v = rearrange(qkv, "b t (three h d) -> three b h t d", three=3, h=heads)
    scores = torch.einsum("bhid,bhjd->bhij", q, k) * head_dim**-0.5
    weights = scores.softmax(dim=-1)
    mixed = torch.einsum("bhij,bhjd->bhid", weights, v)
    out = linear(rearrange(mixed, "b h t d -> b t (h d)"), params["out_w"], params["out_b"])
    if return_weights:
        return out, weights
    return out


def backward(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` of every reachable leaf with d(loss)/d(leaf).

    Calling again without clearing grads accumulates; pass ``retain_graph=True``
    on every call but the last when reusing one graph.
    """
    if loss.dim() != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss, "loss")
    loss.backward(retain_graph=retain_graph)


@dataclass(frozen=True)
class GradEntry:
    path: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradReport:
    max_rel_error: float = 0.0
    per_parameter: list[GradEntry] = field(default_factory=list)

    def worst_by_path(self) -> dict[str, float]:
        worst: dict[str, float] = {}
        for entry in self.per_parameter:
            worst[entry.path] = max(worst.get(entry.path, 0.0), entry.rel_error)
        return worst

    def render(self) -> str:
        lines = [f"max_rel_error = {self.max_rel_error:.3e}"]
        for path, error in self.worst_by_path().items():
            lines.append(f"  {path:<40s} {error:.3e}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERROR_FLOOR)


def finite_diff_grad_check(
    f: Callable[[ParamStore], torch.Tensor],
    params: ParamStore,
    step: float = 1e-5,
    max_coords_per_tensor: int = 8,
    seed: int = 0,
) -> GradReport:
    """Compare autograd gradients of ``f`` with central differences.

    ``f`` must be deterministic and return a scalar. At most
    ``max_coords_per_tensor`` coordinates are checked per tensor, chosen with a
    seeded generator. The tensors in ``params`` are perturbed in place and
    restored afterwards.
    """
    paths = list(params)
    leaves = [params[path].detach().requires_grad_(True) for path in paths]
    perturbed = ParamStore(dict(zip(paths, leaves)))

    value = f(perturbed)
    check_finite(value, "grad-check objective")
    grads = torch.autograd.grad(value, leaves, allow_unused=True)

    generator = torch.Generator().manual_seed(seed)
    report = GradReport()
    with torch.no_grad():
        for path, leaf, grad in zip(paths, leaves, grads):
            analytic_all = torch.zeros_like(leaf) if grad is None else grad
            flat = leaf.view(-1)
            count = flat.numel()
            if count <= max_coords_per_tensor:
                coords = range(count)
            else:
                coords = torch.randperm(count, generator=generator)[:max_coords_per_tensor].tolist()
            for coord in sorted(coords):
                original = flat[coord].item()
                flat[coord] = original + step
                plus = check_finite(f(perturbed), "grad-check objective").item()
                flat[coord] = original - step
                minus = check_finite(f(perturbed), "grad-check objective").item()
                flat[coord] = original
                numeric = (plus - minus) / (2 * step)
                analytic = analytic_all.reshape(-1)[coord].item()
                error = relative_error(analytic, numeric)
                index = tuple(torch.unravel_index(torch.tensor(coord), leaf.shape))
                report.per_parameter.append(
                    GradEntry(path, tuple(int(i) for i in index), analytic, numeric, error)
                )
                report.max_rel_error = max(report.max_rel_error, error)

    logger.debug(f"gradient check over {len(report.per_parameter)} coordinates: {report.max_rel_error:.3e}")
    return report

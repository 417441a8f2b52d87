"""
Datasets (CIFAR-10 binary batches and synthetic toy sets) and image output
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from einops import rearrange, repeat
from PIL import Image, UnidentifiedImageError

from .errors import ShapeError

logger = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
TOY_KINDS = ("two_blobs", "checker")
IMAGE_FORMATS = ("ppm", "png")
# RGB images are 8 bits per sample
PPM_MAXVAL = 255


@dataclass
class Dataset:
    """Images in [-1, 1] with optional per-image contexts and mode labels"""

    images: torch.Tensor
    name: str
    contexts: torch.Tensor | None = None
    modes: torch.Tensor | None = None

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[0] < 1:
            raise ShapeError(f"dataset needs [N >= 1, C, H, W] images, got {tuple(self.images.shape)}")
        if bool((self.images.abs() > 1.0).any()):
            raise ValueError(f"{self.name}: pixel values must lie in [-1, 1]")
        if self.contexts is not None and self.contexts.shape[0] != self.images.shape[0]:
            raise ShapeError(
                f"{self.name}: {self.contexts.shape[0]} contexts for {self.images.shape[0]} images"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_dims(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def conditional(self) -> bool:
        return self.contexts is not None

    def batch(self, indices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        contexts = None if self.contexts is None else self.contexts[indices]
        return self.images[indices], contexts


def load_cifar10_batch(path: str | os.PathLike) -> Dataset:
    """Parse one CIFAR-10 binary batch: 3073-byte records, label byte then RGB planes.

    Labels are dropped; pixels are mapped linearly from [0, 255] to [-1, 1].
    """
    raw = Path(path).read_bytes()
    if not raw:
        raise ValueError(f"{path}: empty CIFAR-10 batch file")
    if len(raw) % CIFAR_RECORD_BYTES:
        raise ValueError(
            f"{path}: length {len(raw)} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    pixels = records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32)
    images = torch.from_numpy(pixels) / 127.5 - 1.0
    logger.info(f"loaded {images.shape[0]} CIFAR-10 images from {path}")
    return Dataset(images, name=Path(path).name)


def load_cifar10(paths: list[str | os.PathLike]) -> Dataset:
    """Concatenate several CIFAR-10 binary batches"""
    if not paths:
        raise ValueError("no CIFAR-10 batch files given")
    parts = [load_cifar10_batch(path) for path in paths]
    return Dataset(torch.cat([part.images for part in parts]), name="cifar10")


def toy_contexts(modes: torch.Tensor, num_tokens: int = 77, token_dim: int = 8) -> torch.Tensor:
    """One-hot mode identifiers broadcast over every context token"""
    if token_dim < 2:
        raise ValueError(f"token_dim must be >= 2 to separate two modes, got {token_dim}")
    one_hot = torch.nn.functional.one_hot(modes.long(), token_dim).to(torch.float32)
    return repeat(one_hot, "n d -> n k d", k=num_tokens).contiguous()


def _checkerboard(height: int, width: int) -> torch.Tensor:
    rows = torch.arange(height)[:, None] // 2
    cols = torch.arange(width)[None, :] // 2
    return torch.where((rows + cols) % 2 == 0, 0.5, -0.5)


def gen_toy_dataset(
    kind: str,
    n: int,
    dims: tuple[int, int, int],
    seed: int,
    noise_std: float = 0.1,
    conditional: bool = False,
    num_tokens: int = 77,
    token_dim: int = 8,
) -> Dataset:
    """Two-mode synthetic images.

    ``two_blobs``: constant planes at +0.5 (mode 0) or -0.5 (mode 1).
    ``checker``: 2x2-block checkerboards in two opposite phases.
    Pixel noise is Gaussian, clipped to [-1, 1]. Any channel count works, so
    4-channel tensors can stand in for autoencoder latents.
    """
    if kind not in TOY_KINDS:
        raise ValueError(f"Unknown toy dataset {kind!r}; expected one of {TOY_KINDS}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    channels, height, width = dims
    generator = torch.Generator().manual_seed(seed)
    modes = torch.randint(0, 2, (n,), generator=generator)
    sign = torch.where(modes == 0, 1.0, -1.0).view(n, 1, 1, 1)

    if kind == "two_blobs":
        base = sign * torch.full((1, channels, height, width), 0.5)
    else:
        base = sign * repeat(_checkerboard(height, width), "h w -> 1 c h w", c=channels)
    noise = torch.randn((n, channels, height, width), generator=generator)
    images = (base + noise_std * noise).clamp(-1.0, 1.0)

    contexts = toy_contexts(modes, num_tokens, token_dim) if conditional else None
    logger.debug(f"generated {kind} dataset: n={n}, dims={dims}, mode-0 share {float((modes == 0).float().mean()):.2f}")
    return Dataset(images, name=kind, contexts=contexts, modes=modes)


def to_bytes(img: torch.Tensor) -> np.ndarray:
    """[C, H, W] in [-1, 1] -> [H, W, 3] uint8 via round((v + 1) / 2 * 255), clamped"""
    if img.dim() != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"write_image needs [C in (1, 3), H, W], got {tuple(img.shape)}")
    levels = torch.round((img.detach().to(torch.float64) + 1.0) / 2.0 * 255.0).clamp(0, 255)
    levels = levels.to(torch.uint8)
    if levels.shape[0] == 1:
        levels = repeat(levels, "1 h w -> c h w", c=3)
    return rearrange(levels, "c h w -> h w c").contiguous().numpy()


def write_image(img: torch.Tensor, path: str | os.PathLike, format: str = "ppm") -> None:
    """Write a binary PPM (P6) or PNG image"""
    if format not in IMAGE_FORMATS:
        raise ValueError(f"Unknown image format {format!r}; expected one of {IMAGE_FORMATS}")
    try:
        Image.fromarray(to_bytes(img)).save(path, format=format.upper())
    except OSError as e:
        logger.error(f"Error writing image {path}: {e}")
        raise


def _open_ppm(path: str | os.PathLike) -> Image.Image:
    try:
        image = Image.open(path)
    except UnidentifiedImageError as e:
        raise ValueError(f"{path}: not an image") from e
    if image.format != "PPM" or image.mode != "RGB":
        image.close()
        raise ValueError(f"{path}: not an RGB PPM (format {image.format}, mode {image.mode})")
    return image


def read_ppm(path: str | os.PathLike) -> tuple[int, int, int, np.ndarray]:
    """Read a PPM written by write_image: (width, height, maxval, [H, W, 3] pixels)"""
    with _open_ppm(path) as image:
        pixels = np.array(image, dtype=np.uint8)
    height, width, _ = pixels.shape
    return width, height, PPM_MAXVAL, pixels


def read_ppm_header(path: str | os.PathLike) -> tuple[int, int, int]:
    with _open_ppm(path) as image:
        width, height = image.size
    return width, height, PPM_MAXVAL


"""
Process-wide torch settings: threads, determinism and dtype selection
"""

import logging
import os

import torch

logger = logging.getLogger(__name__)

PRECISIONS = {32: torch.float32, 64: torch.float64}


def dtype_for(precision: int) -> torch.dtype:
    """Map a bit width (32 or 64) to the torch floating dtype"""
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"Unsupported precision: {precision} (expected 32 or 64)") from None


def configure_determinism() -> int:
    """Pin torch to deterministic kernels and apply STOIC_THREADS.

    Returns the thread count in effect.
    """
    torch.use_deterministic_algorithms(True)
    threads = os.environ.get("STOIC_THREADS")
    if threads:
        try:
            count = int(threads)
        except ValueError:
            logger.warning(f"Ignoring non-integer STOIC_THREADS={threads!r}")
        else:
            if count >= 1:
                torch.set_num_threads(count)
    count = torch.get_num_threads()
    logger.debug(f"torch threads: {count}")
    return count

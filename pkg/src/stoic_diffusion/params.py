"""
Named parameter storage keyed by slash-separated layer paths
"""

from collections.abc import Iterator, Mapping

import torch

from .errors import ShapeError


class ParamStore(Mapping[str, torch.Tensor]):
    """Ordered map from canonical layer path to tensor.

    Paths look like ``init_conv/weight`` or ``block3/attn/qkv_w``. Iteration is
    always lexicographic so two stores built from the same configuration walk
    their tensors in the same order.
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor] | None = None):
        self._tensors: dict[str, torch.Tensor] = {}
        for path, tensor in (tensors or {}).items():
            self.add(path, tensor)

    def add(self, path: str, tensor: torch.Tensor) -> None:
        if not path or path.startswith("/") or path.endswith("/"):
            raise ValueError(f"Malformed parameter path: {path!r}")
        if path in self._tensors:
            raise ValueError(f"Duplicate parameter path: {path}")
        self._tensors[path] = tensor

    def replace(self, path: str, tensor: torch.Tensor) -> None:
        """Swap the tensor stored at an existing path, keeping its shape"""
        current = self._tensors[path]
        if tuple(current.shape) != tuple(tensor.shape):
            raise ShapeError(
                f"{path}: cannot replace shape {tuple(current.shape)} with {tuple(tensor.shape)}"
            )
        self._tensors[path] = tensor

    def __getitem__(self, path: str) -> torch.Tensor:
        try:
            return self._tensors[path]
        except KeyError:
            raise KeyError(f"No parameter at path {path!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} tensors, {self.num_scalars()} scalars)"

    def scope(self, prefix: str) -> "ParamStore":
        """View of the tensors under ``prefix/`` with the prefix stripped.

        The view shares tensor objects with this store.
        """
        head = prefix.rstrip("/") + "/"
        view = ParamStore()
        for path in self:
            if path.startswith(head):
                view._tensors[path[len(head):]] = self._tensors[path]
        if not view._tensors:
            raise KeyError(f"No parameters under {prefix!r}")
        return view

    def num_scalars(self) -> int:
        return sum(tensor.numel() for tensor in self._tensors.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {path: tuple(self._tensors[path].shape) for path in self}

    def clone(self) -> "ParamStore":
        return ParamStore({path: self._tensors[path].detach().clone() for path in self})

    def to(self, dtype: torch.dtype) -> "ParamStore":
        return ParamStore({path: self._tensors[path].detach().to(dtype) for path in self})

    def requires_grad_(self, requires_grad: bool = True) -> "ParamStore":
        for tensor in self._tensors.values():
            tensor.requires_grad_(requires_grad)
        return self

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.grad = None

    def equal(self, other: "ParamStore") -> bool:
        """Bit-identical comparison of paths, dtypes and values"""
        if list(self) != list(other):
            return False
        return all(
            self[path].dtype == other[path].dtype and torch.equal(self[path], other[path])
            for path in self
        )

"""Named groups of trainable tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

from .tensor import Tensor


@dataclass
class ParamGroup:
    """Tensors that are trained (or frozen) together.

    ``frozen`` is honoured by the optimizer: a frozen group may still receive
    gradients but its data is never modified.
    """

    name: str
    tensors: List[Tensor] = field(default_factory=list)
    frozen: bool = False

    def __post_init__(self):
        for t in self.tensors:
            t.requires_grad = True

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors)

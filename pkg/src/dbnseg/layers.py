"""Parameter containers shared by the network blocks."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .norm import DomainBatchNorm
from .tensor import Tensor


class Module:
    """Walks attributes in definition order to collect parameters and norm layers."""

    def _children(self):
        for value in vars(self).values():
            if isinstance(value, (Module, DomainBatchNorm)):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, (Module, DomainBatchNorm)))

    def parameters(self) -> list[Tensor]:
        out = []
        for child in self._children():
            out.extend(child.parameters())
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def norm_layers(self) -> Iterator[DomainBatchNorm]:
        for child in self._children():
            if isinstance(child, DomainBatchNorm):
                yield child
            else:
                yield from child.norm_layers()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Conv2d(Module):
    """Convolution with ``same`` padding for odd kernels.

    Weights start uniform in ``+-sqrt(1 / (cin * k * k))``, biases at zero;
    ``zero_init`` zeroes the weights too.
    """

    def __init__(self, name: str, cin: int, cout: int, kernel_size: int = 3, stride: int = 1,
                 rng: Optional[np.random.Generator] = None, zero_init: bool = False):
        self.stride = stride
        self.padding = kernel_size // 2
        shape = (cout, cin, kernel_size, kernel_size)
        if zero_init or rng is None:
            w = np.zeros(shape, np.float32)
        else:
            bound = np.sqrt(1.0 / (cin * kernel_size * kernel_size))
            w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def parameter_slots(module) -> list[tuple[object, str]]:
    """``(owner, attribute)`` for every parameter, in :meth:`Module.parameters` order."""
    slots = []
    if isinstance(module, DomainBatchNorm):
        return [(module, "gamma"), (module, "beta")]
    if isinstance(module, Conv2d):
        return [(module, "weight"), (module, "bias")]
    for child in module._children():
        slots.extend(parameter_slots(child))
    return slots

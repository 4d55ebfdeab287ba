"""Named, ordered parameter collections decoupled from live network objects.

A ``ModelParams`` is the exchange currency for everything that treats network
weights as data: epoch-momentum averaging, checkpoints, and rebuilding a
network for inference. Two collections are compatible (can be averaged) iff
their names, order and shapes all match, which is captured by a structural
fingerprint string.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import torch


class StructuralMismatchError(ValueError):
    """Raised when two parameter collections disagree in names/order/shapes."""


@dataclass
class ModelParams:
    kind: str                       # "recurrent" | "nonrecurrent"
    config: dict                    # plain-dict architecture config
    tensors: "OrderedDict[str, torch.Tensor]"

    @property
    def fingerprint(self) -> str:
        parts = [self.kind]
        parts += [f"{n}:{tuple(t.shape)}" for n, t in self.tensors.items()]
        return "|".join(parts)

    def n_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self.tensors.items())

    def compatible(self, other: "ModelParams") -> bool:
        return self.fingerprint == other.fingerprint

    def clone(self) -> "ModelParams":
        cloned = OrderedDict((n, t.detach().clone()) for n, t in self.tensors.items())
        return ModelParams(self.kind, dict(self.config), cloned)

    @classmethod
    def from_module(cls, kind: str, config: dict, module: torch.nn.Module) -> "ModelParams":
        tensors = OrderedDict(
            (name, p.detach().clone()) for name, p in module.named_parameters()
        )
        return cls(kind, dict(config), tensors)

    def load_into(self, module: torch.nn.Module) -> None:
        own = OrderedDict(module.named_parameters())
        if list(own) != list(self.tensors) or any(
            own[n].shape != t.shape for n, t in self.tensors.items()
        ):
            raise StructuralMismatchError(
                "parameter collection does not match the module structure"
            )
        with torch.no_grad():
            for name, tensor in self.tensors.items():
                own[name].copy_(tensor)


def require_compatible(a: ModelParams, b: ModelParams) -> None:
    if not a.compatible(b):
        raise StructuralMismatchError(
            f"incompatible parameter collections:\n  {a.fingerprint}\n  {b.fingerprint}"
        )

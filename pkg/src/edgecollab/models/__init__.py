from .common import SideOutputs
from .nonrecurrent import (
    NonRecurrentConfig,
    NonRecurrentEdgeNet,
    build_nonrecurrent,
    forward_nonrecurrent,
    nonrecurrent_from_params,
)
from .params import ModelParams, StructuralMismatchError
from .recurrent import (
    RecurrentConfig,
    RecurrentEdgeNet,
    build_recurrent,
    forward_recurrent,
    recurrent_from_params,
)

__all__ = [
    "SideOutputs",
    "ModelParams",
    "StructuralMismatchError",
    "RecurrentConfig",
    "RecurrentEdgeNet",
    "build_recurrent",
    "forward_recurrent",
    "recurrent_from_params",
    "NonRecurrentConfig",
    "NonRecurrentEdgeNet",
    "build_nonrecurrent",
    "forward_nonrecurrent",
    "nonrecurrent_from_params",
]


def net_from_params(params: ModelParams):
    """Rebuild the right architecture from a parameter collection."""
    if params.kind == "recurrent":
        return recurrent_from_params(params)
    if params.kind == "nonrecurrent":
        return nonrecurrent_from_params(params)
    raise ValueError(f"unknown model kind: {params.kind!r}")

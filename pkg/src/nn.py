"""
Small feed-forward networks in functional form
===============================================
Parameters live in an immutable ParameterSet so that adapted copies (phi_i)
can be built from theta without touching it; forward() takes the set
explicitly, which is what the inner loop needs.
"""
import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from autodiff import DTYPE
from errors import ContractViolation
from models import ModelSpec

logger = logging.getLogger(__name__)

INIT_STD = 0.01
TRUNCATION = 2.0   # truncated at +-2 sigma

_MAGIC = b"PSET"


class ParameterSet:
    """Named, shaped collection of float64 parameter tensors"""

    def __init__(self, tensors: Mapping[str, torch.Tensor]):
        ordered = OrderedDict()
        for name, value in tensors.items():
            if name in ordered:
                raise ContractViolation(f"duplicate parameter name {name!r}")
            ordered[name] = value if value.dtype == DTYPE else value.to(DTYPE)
        self._tensors = MappingProxyType(ordered)

    # -- mapping view -------------------------------------------------
    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors.keys())

    def values(self) -> List[torch.Tensor]:
        return list(self._tensors.values())

    def items(self) -> Iterable[Tuple[str, torch.Tensor]]:
        return self._tensors.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self._tensors.items()}

    @property
    def total_count(self) -> int:
        return int(sum(t.numel() for t in self._tensors.values()))

    # -- derived sets -------------------------------------------------
    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParameterSet":
        return ParameterSet(OrderedDict((name, fn(t)) for name, t in self.items()))

    def zip_map(self, others: Iterable[torch.Tensor], fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]) -> "ParameterSet":
        """Combine with a same-ordered sequence of tensors (e.g. gradients)"""
        others = list(others)
        if len(others) != len(self):
            raise ContractViolation(f"expected {len(self)} tensors, got {len(others)}")
        return ParameterSet(OrderedDict((name, fn(t, o)) for (name, t), o in zip(self.items(), others)))

    def detach(self) -> "ParameterSet":
        return self.map(lambda t: t.detach())

    def with_grad(self) -> "ParameterSet":
        """Fresh leaf copies that record operations"""
        return self.map(lambda t: t.detach().clone().requires_grad_(True))

    def flatten(self) -> torch.Tensor:
        """Concatenate every parameter in declaration order (graph is kept)"""
        return torch.cat([t.reshape(-1) for t in self.values()])

    def unflatten(self, vector) -> "ParameterSet":
        """Inverse of flatten, shaped like this set"""
        vector = torch.as_tensor(vector, dtype=DTYPE)
        if vector.numel() != self.total_count:
            raise ContractViolation(f"vector length {vector.numel()} != parameter count {self.total_count}")
        out, offset = OrderedDict(), 0
        for name, t in self.items():
            out[name] = vector[offset:offset + t.numel()].reshape(t.shape)
            offset += t.numel()
        return ParameterSet(out)

    def to_numpy(self) -> np.ndarray:
        return self.flatten().detach().cpu().numpy().copy()

    def __repr__(self) -> str:
        return f"ParameterSet({self.shapes()})"


def layer_shapes(spec: ModelSpec) -> List[Tuple[int, int]]:
    """(fan_out, fan_in) for every linear layer"""
    sizes = [spec.input_dim, *spec.hidden_sizes, spec.output_dim]
    return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]


def init_params(spec: ModelSpec, seed: int) -> ParameterSet:
    """
    Initialize network parameters

    Args:
        spec: Network shape
        seed: Seed of the init stream

    Returns:
        Weights from a normal(0, 0.01) truncated at +-2 sigma, zero biases
    """
    generator = torch.Generator().manual_seed(int(seed))
    tensors = OrderedDict()
    for index, (fan_out, fan_in) in enumerate(layer_shapes(spec)):
        weight = torch.empty(fan_out, fan_in, dtype=DTYPE)
        torch.nn.init.trunc_normal_(
            weight, mean=0.0, std=INIT_STD, a=-TRUNCATION * INIT_STD, b=TRUNCATION * INIT_STD, generator=generator
        )
        tensors[f"layer{index}.weight"] = weight
        tensors[f"layer{index}.bias"] = torch.zeros(fan_out, dtype=DTYPE)
    return ParameterSet(tensors)


def forward(params: ParameterSet, spec: ModelSpec, x) -> torch.Tensor:
    """
    Evaluate the network

    Args:
        params: Parameters laid out as init_params produces them
        spec: Network shape
        x: Input batch, shape (n, input_dim)

    Returns:
        Raw outputs (regression) or logits (classification), shape (n, output_dim)
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() == 1:
        x = x.reshape(-1, spec.input_dim) if spec.input_dim == 1 else x.reshape(1, -1)
    if x.shape[-1] != spec.input_dim:
        raise ContractViolation(f"input dimension {x.shape[-1]} does not match spec input_dim {spec.input_dim}")

    n_layers = len(spec.hidden_sizes) + 1
    h = x
    for index in range(n_layers):
        h = F.linear(h, params[f"layer{index}.weight"], params[f"layer{index}.bias"])
        if index < n_layers - 1:
            h = F.relu(h)
    return h


def loss(predictions: torch.Tensor, targets, head: str) -> torch.Tensor:
    """
    Batch-mean task loss

    Args:
        predictions: forward() output
        targets: Real targets (regression) or integer labels (classification)
        head: 'regression' (mean-squared error) or 'classification' (softmax cross-entropy)

    Returns:
        Scalar tensor >= 0
    """
    targets = torch.as_tensor(targets)
    if predictions.shape[0] == 0:
        raise ContractViolation("loss of an empty batch")
    if predictions.shape[0] != targets.reshape(-1).shape[0]:
        raise ContractViolation(f"batch sizes differ: {predictions.shape[0]} predictions, {targets.reshape(-1).shape[0]} targets")

    if head == "regression":
        return F.mse_loss(predictions.reshape(-1), targets.to(DTYPE).reshape(-1))
    if head == "classification":
        return F.cross_entropy(predictions, targets.reshape(-1).long())
    raise ContractViolation(f"unknown head {head!r}")


def accuracy(logits: torch.Tensor, targets) -> float:
    """Fraction of argmax predictions equal to the labels"""
    targets = torch.as_tensor(targets).reshape(-1).long()
    return float((logits.argmax(dim=-1) == targets).to(DTYPE).mean().item())


def save_parameters(params: ParameterSet, path: Union[str, Path]) -> Path:
    """
    Write a ParameterSet to the flat binary format

    Layout: b'PSET', uint32 LE header length, UTF-8 JSON [{name, shape}, ...],
    then little-endian float64 values in declaration order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps([{"name": name, "shape": list(shape)} for name, shape in params.shapes().items()]).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(params.to_numpy().astype("<f8").tobytes())
    logger.debug(f"Saved {params.total_count} parameters to {path}")
    return path


def load_parameters(path: Union[str, Path]) -> ParameterSet:
    """Read a ParameterSet written by save_parameters"""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ContractViolation(f"{path} is not a parameter file")
    (header_len,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + header_len].decode("utf-8"))
    values = np.frombuffer(data[8 + header_len:], dtype="<f8")

    tensors, offset = OrderedDict(), 0
    for entry in header:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        if offset + size > values.size:
            raise ContractViolation(f"{path} is truncated")
        tensors[entry["name"]] = torch.from_numpy(values[offset:offset + size].astype(np.float64).reshape(shape))
        offset += size
    if offset != values.size:
        raise ContractViolation(f"{path} has {values.size - offset} trailing values")
    return ParameterSet(tensors)

"""
Reverse-mode differentiation on torch's autograd graph
=======================================================
A Node is a float64 tensor recorded on the autograd graph; the Tape decides
whether gradient results are themselves recorded (nesting depth >= 1), which
is what lets the MAML outer update differentiate through an inner SGD step.
"""
from typing import List, Optional, Sequence

import torch

from errors import ContractViolation

DTYPE = torch.float64

Node = torch.Tensor


def as_node(value, requires_grad: bool = True) -> Node:
    """Lift a real array into a float64 leaf node"""
    tensor = torch.as_tensor(value, dtype=DTYPE).detach().clone()
    return tensor.requires_grad_(requires_grad)


class Tape:
    """Differentiation context with a fixed nesting depth"""

    def __init__(self, depth: int = 0):
        """
        Initialize tape

        Args:
            depth: 0 for plain gradients, >= 1 to keep gradient results differentiable
        """
        if depth < 0:
            raise ContractViolation(f"nesting depth must be non-negative, got {depth}")
        self.depth = depth

    @property
    def records_gradients(self) -> bool:
        return self.depth >= 1

    def backward(self, output: Node, wrt: Sequence[Node]) -> List[torch.Tensor]:
        """
        Gradient of a scalar output with respect to each node in wrt

        Args:
            output: Scalar node
            wrt: Nodes the output may depend on

        Returns:
            One array per wrt node, shaped like it; zeros where the node is disconnected
        """
        if output.numel() != 1:
            raise ContractViolation(f"backward needs a scalar output, got shape {tuple(output.shape)}")

        wrt = list(wrt)
        grads: List[Optional[torch.Tensor]] = [None] * len(wrt)
        live = [i for i, node in enumerate(wrt) if node.requires_grad]

        if output.requires_grad and live:
            computed = torch.autograd.grad(
                output.reshape(()),
                [wrt[i] for i in live],
                retain_graph=True,
                create_graph=self.records_gradients,
                allow_unused=True,
            )
            for i, grad in zip(live, computed):
                grads[i] = grad

        return [torch.zeros_like(node) if grad is None else grad for node, grad in zip(wrt, grads)]

    def grad_of_grad(
        self,
        output: Node,
        inner_wrt: Sequence[Node],
        outer_wrt: Sequence[Node],
        cotangents: Optional[Sequence[torch.Tensor]] = None,
    ) -> List[torch.Tensor]:
        """
        Second-order gradient

        With inner_wrt empty, output is expected to already contain a gradient
        result (e.g. the query loss at adapted parameters) and is differentiated
        w.r.t. outer_wrt. Otherwise the inner gradient g = d output / d inner_wrt is
        taken on this tape and the scalar sum_k <g_k, v_k> (v defaults to ones) is
        differentiated w.r.t. outer_wrt, i.e. a Hessian-vector product.

        Args:
            output: Scalar node
            inner_wrt: Nodes of the inner differentiation
            outer_wrt: Nodes of the outer differentiation
            cotangents: Optional v_k, shaped like inner_wrt

        Returns:
            Arrays shaped like outer_wrt
        """
        if not self.records_gradients:
            raise ContractViolation("grad_of_grad needs a tape with nesting depth >= 1")

        inner_wrt = list(inner_wrt)
        if not inner_wrt:
            return Tape(0).backward(output, outer_wrt)

        inner = self.backward(output, inner_wrt)
        if cotangents is None:
            cotangents = [torch.ones_like(g) for g in inner]
        contracted = sum(torch.sum(g * v) for g, v in zip(inner, cotangents))
        return Tape(0).backward(contracted, outer_wrt)


def backward(output: Node, wrt: Sequence[Node]) -> List[torch.Tensor]:
    """Plain first-order gradient (depth-0 tape)"""
    return Tape(0).backward(output, wrt)

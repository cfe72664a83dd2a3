from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

__all__ = ["EmbeddingMLP", "mlp_forward"]


def mlp_forward(x: torch.Tensor, weights: Sequence[torch.Tensor], biases: Sequence[torch.Tensor]) -> torch.Tensor:
    """
    Stack of affine layers with tanh after each one.

    Parameters
    ----------
    x: torch.Tensor
        Input, shape (..., in_features).
    weights: sequence of torch.Tensor
        Layer weights, shapes (out_k, in_k).
    biases: sequence of torch.Tensor
        Layer biases, shapes (out_k,).
    """
    if len(weights) != len(biases):
        raise ValueError("'weights' and 'biases' must have the same length")
    for k, (weight, bias) in enumerate(zip(weights, biases)):
        if x.shape[-1] != weight.shape[1]:
            raise ValueError(f"Layer {k} expects {weight.shape[1]} input features, got {x.shape[-1]}")
        x = torch.tanh(F.linear(x, weight, bias))
    return x


class EmbeddingMLP(nn.Module):
    """
    Feature embedding: affine layers of the given widths, each followed by tanh.

    Parameters
    ----------
    in_features: int
        Number of input features.
    widths: sequence of int
        Output width of every layer. The last one is the embedding size.
    generator: torch.Generator or None
        Source of randomness for the initial weights.
    """

    def __init__(self, in_features: int, widths: Sequence[int] = (30, 20, 64), generator: Optional[torch.Generator] = None):
        super().__init__()
        if in_features < 1:
            raise ValueError("'in_features' must be positive")
        if not widths:
            raise ValueError("'widths' must name at least one layer")
        sizes = [in_features, *widths]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        self.reset_parameters(generator)

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        for layer in self.layers:
            bound = layer.in_features**-0.5
            layer.weight.uniform_(-bound, bound, generator=generator)
            layer.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(x, [l.weight for l in self.layers], [l.bias for l in self.layers])

"""Small building blocks shared by the tokenizer, attention and FFN layers."""

from __future__ import annotations

import enum

import torch
from torch import nn

RMS_EPS = 1e-6


class Role(enum.IntEnum):
    BOS = 0
    HIST = 1
    SEP = 2
    PROF = 3
    CAND = 4
    PAD = 5


def rms_norm(x: torch.Tensor, weight: torch.Tensor | None = None, eps: float = RMS_EPS) -> torch.Tensor:
    y = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return y if weight is None else y * weight


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = RMS_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return rms_norm(x, self.weight, self.eps)


class NonFiniteError(FloatingPointError):
    """A non-finite activation or gradient, tagged with where it appeared."""

"""Sigmoid-weighted cross-scale fusion and a bidirectional pyramid."""

from __future__ import annotations

from typing import Sequence

from . import tensor as T
from .blocks import Module
from .tensor import ShapeError, Tensor


class FusionNode(Module):
    """out = sigmoid(alpha) * p_i + sigmoid(beta) * resample(p_j).

    The two weights are squashed independently, so they need not sum to one.
    """

    kind = "fusion"

    def __init__(self, channels: int, alpha: float = 0.0, beta: float = 0.0):
        self.channels = channels
        self.alpha = Tensor(alpha, requires_grad=True)
        self.beta = Tensor(beta, requires_grad=True)

    def hyperparameters(self) -> dict:
        return {"channels": self.channels}

    def weights(self) -> tuple[float, float]:
        return float(T.sigmoid(self.alpha).data), float(T.sigmoid(self.beta).data)

    def __call__(self, p_i: Tensor, p_j: Tensor) -> Tensor:
        return fuse(self, p_i, p_j)


def _weighted_sum(node: FusionNode, p_i: Tensor, other: Tensor) -> Tensor:
    return p_i * T.sigmoid(node.alpha) + other * T.sigmoid(node.beta)


def fuse(node: FusionNode, p_i: Tensor, p_j: Tensor) -> Tensor:
    """Fuse ``p_i`` with the 2x nearest upsampling of the coarser ``p_j``."""
    if (
        p_i.ndim != 4
        or p_j.ndim != 4
        or p_i.shape[:2] != p_j.shape[:2]
        or p_i.shape[2] != 2 * p_j.shape[2]
        or p_i.shape[3] != 2 * p_j.shape[3]
    ):
        raise ShapeError(f"fuse: p_j must be p_i at half resolution; got p_i {p_i.shape} and p_j {p_j.shape}")
    if p_i.shape[1] != node.channels:
        raise ShapeError(f"fuse: node expects {node.channels} channels, got p_i {p_i.shape}")
    return _weighted_sum(node, p_i, T.upsample_nearest2x(p_j))


def fuse_down(node: FusionNode, p_i: Tensor, p_j: Tensor) -> Tensor:
    """Bottom-up counterpart: ``p_j`` is finer and is average-pooled by 2."""
    if p_i.ndim != 4 or p_j.ndim != 4 or p_j.shape[2] != 2 * p_i.shape[2] or p_j.shape[3] != 2 * p_i.shape[3]:
        raise ShapeError(f"fuse_down: p_j must be p_i at double resolution; got p_i {p_i.shape} and p_j {p_j.shape}")
    if p_i.shape[:2] != p_j.shape[:2]:
        raise ShapeError(f"fuse_down: batch/channel mismatch {p_i.shape} vs {p_j.shape}")
    return _weighted_sum(node, p_i, T.avg_pool2x(p_j))


def make_pyramid_nodes(channels: int, n_levels: int) -> list[FusionNode]:
    """2 * (n_levels - 1) nodes: top-down first, then bottom-up."""
    return [FusionNode(channels) for _ in range(2 * max(0, n_levels - 1))]


def pyramid_fuse(levels: Sequence[Tensor], nodes: Sequence[FusionNode]) -> list[Tensor]:
    """Top-down then bottom-up fusion over ``levels`` ordered coarse to fine.

    ``nodes`` holds ``len(levels) - 1`` top-down nodes followed by as many
    bottom-up nodes. Output shapes equal input shapes.
    """
    levels = list(levels)
    n = len(levels)
    if n <= 1:
        return levels
    for coarse, fine in zip(levels[:-1], levels[1:]):
        if fine.shape[2] != 2 * coarse.shape[2] or fine.shape[3] != 2 * coarse.shape[3]:
            raise ShapeError(f"pyramid_fuse: levels must halve in size coarse->fine; got {coarse.shape} then {fine.shape}")
    if len(nodes) != 2 * (n - 1):
        raise ValueError(f"pyramid_fuse: need {2 * (n - 1)} nodes for {n} levels, got {len(nodes)}")
    td_nodes, bu_nodes = nodes[: n - 1], nodes[n - 1 :]

    top_down = [levels[0]]
    for k in range(1, n):
        top_down.append(fuse(td_nodes[k - 1], levels[k], top_down[-1]))

    out: list[Tensor] = [None] * n  # type: ignore[list-item]
    out[n - 1] = top_down[n - 1]
    for k in range(n - 2, -1, -1):
        out[k] = fuse_down(bu_nodes[k], top_down[k], out[k + 1])
    return out

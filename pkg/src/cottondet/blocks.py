"""Network building blocks: RepConv, Ghost/GSConv, SE, CBAM spatial, C2PSA."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Minimal parameter container; subclasses assign Tensors and Modules as attributes."""

    kind = "module"

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue  # derived state, not trainable
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def hyperparameters(self) -> dict:
        return {}

    def save(self, directory: str | Path) -> None:
        """Write a JSON descriptor plus one tensor dump per parameter."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for name, p in self.named_parameters():
            T.dump(p, directory / f"{name}.ssdt")
            names.append(name)
        desc = {"kind": self.kind, "hyperparameters": self.hyperparameters(), "parameters": names}
        (directory / "descriptor.json").write_text(json.dumps(desc, indent=2))

    def load_parameters(self, directory: str | Path) -> None:
        directory = Path(directory)
        desc = json.loads((directory / "descriptor.json").read_text())
        if desc["kind"] != self.kind:
            raise ValueError(f"descriptor kind {desc['kind']!r} does not match {self.kind!r}")
        params = dict(self.named_parameters())
        for name in desc["parameters"]:
            loaded = T.load(directory / f"{name}.ssdt")
            if loaded.shape != params[name].shape:
                raise ShapeError(f"{name}: stored shape {loaded.shape} != expected {params[name].shape}")
            params[name].data[...] = loaded.data


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _check_channels(x: Tensor, channels: int, who: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{who}: expected NCHW input with {channels} channels, got shape {x.shape}")


class Conv(Module):
    """Plain conv + bias."""

    kind = "conv"

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, groups: int = 1, rng=None):
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.k, self.stride, self.groups = c_in, c_out, k, stride, groups
        self.weight = _param(_kaiming(rng, (c_out, c_in // groups, k, k)))
        self.bias = _param(np.zeros(c_out))

    def hyperparameters(self) -> dict:
        return {"c_in": self.c_in, "c_out": self.c_out, "k": self.k, "stride": self.stride, "groups": self.groups}

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.k // 2, self.groups)


class GroupNorm(Module):
    """Per-sample channel-group normalization with a learned per-channel affine."""

    kind = "group_norm"

    def __init__(self, channels: int, groups: int = 4):
        if channels % groups:
            raise ShapeError(f"GroupNorm: {channels} channels not divisible into {groups} groups")
        self.channels, self.groups = channels, groups
        self.gain = _param(np.ones(channels))
        self.shift = _param(np.zeros(channels))

    def hyperparameters(self) -> dict:
        return {"channels": self.channels, "groups": self.groups}

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gain, self.shift)


# ---------------------------------------------------------------------------
# Structural reparameterization
# ---------------------------------------------------------------------------


class RepConvBlock(Module):
    """3x3 + 1x1 + identity branches that fold into a single 3x3 conv.

    The identity branch is only allowed when in- and out-channels match.
    """

    kind = "repconv"

    def __init__(self, c_in: int, c_out: int, identity: bool | None = None, rng=None):
        rng = rng or np.random.default_rng(0)
        if identity is None:
            identity = c_in == c_out
        if identity and c_in != c_out:
            raise ShapeError(f"identity branch needs c_in == c_out, got {c_in} and {c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.identity_enabled = identity
        self.w3 = _param(_kaiming(rng, (c_out, c_in, 3, 3)))
        self.b3 = _param(np.zeros(c_out))
        self.w1 = _param(_kaiming(rng, (c_out, c_in, 1, 1)))
        self.b1 = _param(np.zeros(c_out))
        self.b_identity = _param(np.zeros(c_out))
        self._merged: tuple[Tensor, Tensor] | None = None

    def hyperparameters(self) -> dict:
        return {"c_in": self.c_in, "c_out": self.c_out, "identity": self.identity_enabled}

    def merge(self) -> tuple[Tensor, Tensor]:
        kernel, bias = repconv_merge(self)
        self._merged = (Tensor(kernel), Tensor(bias))
        return self._merged

    @property
    def merged(self) -> tuple[Tensor, Tensor] | None:
        """The folded (kernel, bias) once merge() has run."""
        return self._merged

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return repconv_forward(self, x, mode)


def repconv_merge(block: RepConvBlock) -> tuple[np.ndarray, np.ndarray]:
    """Fold the three branches into one 3x3 kernel and bias."""
    if block.identity_enabled and block.c_in != block.c_out:
        raise ShapeError(f"identity branch needs c_in == c_out, got {block.c_in} and {block.c_out}")
    arrays = [block.w3.data, block.w1.data, block.b3.data, block.b1.data, block.b_identity.data]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValueError("repconv_merge: non-finite parameters")
    kernel = block.w3.data.astype(np.float64).copy()
    kernel[:, :, 1, 1] += block.w1.data[:, :, 0, 0]
    bias = block.b3.data.astype(np.float64) + block.b1.data
    if block.identity_enabled:
        idx = np.arange(block.c_out)
        kernel[idx, idx, 1, 1] += 1.0
        bias = bias + block.b_identity.data
    return kernel.astype(block.w3.dtype), bias.astype(block.w3.dtype)


def repconv_forward(block: RepConvBlock, x: Tensor, mode: str = "train") -> Tensor:
    _check_channels(x, block.c_in, "repconv_forward")
    if mode == "merged":
        if block.merged is None:
            raise RuntimeError("repconv_forward: merged mode requested before merge()")
        kernel, bias = block.merged
        return T.conv2d(x, kernel, bias, 1, 1)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    out = T.conv2d(x, block.w3, block.b3, 1, 1) + T.conv2d(x, block.w1, block.b1, 1, 0)
    if block.identity_enabled:
        n, c, h, w = x.shape
        out = out + x + T.expand(T.reshape(block.b_identity, (1, c, 1, 1)), (n, c, h, w))
    return out


# ---------------------------------------------------------------------------
# Cheap convolutions
# ---------------------------------------------------------------------------


class GhostConv(Module):
    """Primary 1x1 conv plus depthwise 3x3 "ghost" channels derived from it."""

    kind = "ghost"

    def __init__(self, c_in: int, c_out: int, primary_ratio: float = 0.5, rng=None):
        rng = rng or np.random.default_rng(0)
        if not 0.0 < primary_ratio <= 1.0:
            raise ValueError(f"primary_ratio must lie in (0, 1], got {primary_ratio}")
        primary = math.ceil(c_out * primary_ratio)
        if primary < 1:
            raise ValueError("ghost_conv: c_out * primary_ratio must be >= 1")
        self.c_in, self.c_out, self.primary_ratio = c_in, c_out, primary_ratio
        self.n_primary = primary
        self.n_cheap = c_out - primary
        self.primary = Conv(c_in, primary, k=1, rng=rng)
        self.cheap = Conv(self.n_cheap, self.n_cheap, k=3, groups=self.n_cheap, rng=rng) if self.n_cheap else None

    def hyperparameters(self) -> dict:
        return {"c_in": self.c_in, "c_out": self.c_out, "primary_ratio": self.primary_ratio}

    def __call__(self, x: Tensor) -> Tensor:
        return ghost_conv(self, x)


def ghost_conv(block: GhostConv, x: Tensor) -> Tensor:
    _check_channels(x, block.c_in, "ghost_conv")
    y = block.primary(x)
    if block.cheap is None:
        return y
    src = np.arange(block.n_cheap) % block.n_primary
    base = y if np.array_equal(src, np.arange(block.n_primary)) else y[:, src]
    return T.concat([y, block.cheap(base)], axis=1)


def channel_shuffle(x: Tensor, groups: int = 2) -> Tensor:
    """Interleave channels across ``groups``: [a0..ak, b0..bk] -> [a0, b0, a1, b1, ...]."""
    c = x.shape[1]
    if c % groups:
        raise ShapeError(f"channel_shuffle: {c} channels not divisible by {groups} groups")
    perm = np.arange(c).reshape(groups, c // groups).T.reshape(-1)
    return x[:, perm]


class GSConv(Module):
    """Depthwise-separable conv (optionally strided) plus a depthwise ghost half, shuffled."""

    kind = "gsconv"

    def __init__(self, c_in: int, c_out: int, stride: int = 1, rng=None):
        rng = rng or np.random.default_rng(0)
        if c_out % 2:
            raise ShapeError(f"GSConv needs an even number of output channels, got {c_out}")
        half = c_out // 2
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.dw = Conv(c_in, c_in, k=3, stride=stride, groups=c_in, rng=rng)
        self.pw = Conv(c_in, half, k=1, rng=rng)
        self.ghost = Conv(half, half, k=3, groups=half, rng=rng)

    def hyperparameters(self) -> dict:
        return {"c_in": self.c_in, "c_out": self.c_out, "stride": self.stride}

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c_in, "gsconv")
        a = T.relu(self.pw(self.dw(x)))
        b = self.ghost(a)
        return channel_shuffle(T.concat([a, b], axis=1), 2)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


class SEBlock(Module):
    """Squeeze-and-excitation channel attention."""

    kind = "se"

    def __init__(self, channels: int, reduction: int = 16, rng=None):
        rng = rng or np.random.default_rng(0)
        if reduction < 1:
            raise ValueError(f"reduction must be positive, got {reduction}")
        self.channels, self.reduction = channels, reduction
        self.hidden = max(1, channels // reduction)
        self.fc1 = Conv(channels, self.hidden, k=1, rng=rng)
        self.fc2 = Conv(self.hidden, channels, k=1, rng=rng)

    def hyperparameters(self) -> dict:
        return {"channels": self.channels, "reduction": self.reduction}

    def mask(self, x: Tensor) -> Tensor:
        """Per-channel weights of shape (N, C, 1, 1), each in (0, 1)."""
        _check_channels(x, self.channels, "se_channel_attention")
        return T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(x)))))

    def __call__(self, x: Tensor) -> Tensor:
        return se_channel_attention(self, x)


def se_channel_attention(block: SEBlock, x: Tensor) -> Tensor:
    return x * T.expand(block.mask(x), x.shape)


class SpatialAttention(Module):
    """CBAM spatial attention: conv over [channel-mean, channel-max], then sigmoid."""

    kind = "cbam_spatial"

    def __init__(self, kernel_size: int = 7, rng=None):
        rng = rng or np.random.default_rng(0)
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"spatial_kernel must be a positive odd integer, got {kernel_size}")
        self.kernel_size = kernel_size
        self.conv = Conv(2, 1, k=kernel_size, rng=rng)

    def hyperparameters(self) -> dict:
        return {"kernel_size": self.kernel_size}

    def mask(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"cbam_spatial_attention: expected NCHW input, got shape {x.shape}")
        pooled = T.concat([T.tmean(x, axis=1, keepdims=True), T.tmax(x, axis=1, keepdims=True)], axis=1)
        return T.sigmoid(self.conv(pooled))

    def __call__(self, x: Tensor) -> Tensor:
        return cbam_spatial_attention(self, x)


def cbam_spatial_attention(block: SpatialAttention, x: Tensor) -> Tensor:
    return x * T.expand(block.mask(x), x.shape)


class C2PSA(Module):
    """Two-branch block: one half passes through, the other gets SE then spatial
    attention with a residual; a 1x1 conv fuses the concatenation."""

    kind = "c2psa"

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7, rng=None):
        rng = rng or np.random.default_rng(0)
        if channels % 2:
            raise ShapeError(f"C2PSA needs an even channel count, got {channels}")
        self.channels = channels
        half = channels // 2
        self.se = SEBlock(half, reduction, rng=rng)
        self.spatial = SpatialAttention(spatial_kernel, rng=rng)
        self.fuse = Conv(channels, channels, k=1, rng=rng)

    def hyperparameters(self) -> dict:
        return {
            "channels": self.channels,
            "reduction": self.se.reduction,
            "spatial_kernel": self.spatial.kernel_size,
        }

    def __call__(self, x: Tensor) -> Tensor:
        return c2psa_forward(self, x)


def c2psa_forward(block: C2PSA, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] % 2:
        raise ShapeError(f"c2psa_forward: expected NCHW input with an even channel count, got shape {x.shape}")
    _check_channels(x, block.channels, "c2psa_forward")
    half = x.shape[1] // 2
    x_a = x[:, :half]
    x_b = x[:, half:]
    y_b = cbam_spatial_attention(block.spatial, se_channel_attention(block.se, x_b)) + x_b
    return block.fuse(T.concat([x_a, y_b], axis=1))

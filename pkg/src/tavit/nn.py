"""Modules, layers and the architectural blocks of the hybrid CNN-ViT.

Parameters are plain :class:`~tavit.tensor.Tensor` objects with
``requires_grad`` set. Modules discover parameters and child modules from
their attributes, in assignment order, so a module stored under two
attributes (or applied twice) contributes its parameters once.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import attention
from .tensor import BatchNormState, ShapeError, Tensor


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def child_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, name); independent of construction order."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Parameter:
    # leaky-relu gain with a = sqrt(5), the usual framework default for conv layers
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(T.get_default_dtype()))


def xavier_uniform(rng: np.random.Generator, shape) -> Parameter:
    fan_out, fan_in = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(T.get_default_dtype()))


def zeros(shape) -> Parameter:
    return Parameter(np.zeros(shape, dtype=T.get_default_dtype()))


def ones(shape) -> Parameter:
    return Parameter(np.ones(shape, dtype=T.get_default_dtype()))


class Module:
    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Parameter)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "", _seen=None) -> Iterator[tuple[str, "Module"]]:
        _seen = set() if _seen is None else _seen
        if id(self) in _seen:
            return
        _seen.add(id(self))
        yield prefix, self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}.{name}" if prefix else name, _seen)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for mname, mod in self.named_modules():
            for name, child in mod._children():
                if isinstance(child, Parameter) and id(child) not in seen:
                    seen.add(id(child))
                    yield (f"{mname}.{name}" if mname else name), child

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules():
            for name, buf in mod._own_buffers():
                yield (f"{mname}.{name}" if mname else name), buf

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: stored shape {src.shape} != model shape {arr.shape}")
            arr[...] = src


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False):
        shape = (out_features, in_features)
        self.weight = zeros(shape) if zero_init else xavier_uniform(rng, shape)
        self.bias = zeros((out_features,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1, bias: bool = False):
        self.weight = kaiming_uniform(rng, (cout, cin, kernel, kernel), cin * kernel * kernel)
        self.bias = zeros((cout,)) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


class ConvTranspose2d(Module):
    """Stride-2 transposed conv; doubles the spatial extent."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator):
        # each output pixel sees about a quarter of the kernel taps
        fan_in = max(cin * kernel * kernel // 4, 1)
        self.weight = kaiming_uniform(rng, (cin, cout, kernel, kernel), fan_in)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, stride=2)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = ones((channels,))
        self.beta = zeros((channels,))
        self.state = BatchNormState(channels, momentum, eps)

    def _own_buffers(self):
        yield "running_mean", self.state.running_mean
        yield "running_var", self.state.running_var

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(x, self.gamma, self.beta, self.state, "train" if self.training else "eval")


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, sqrt: bool = False, affine: bool = True):
        self.gamma = ones((dim,)) if affine else None
        self.beta = zeros((dim,)) if affine else None
        self.eps = eps
        self.sqrt = sqrt

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps, sqrt=self.sqrt)


# ---------------------------------------------------------------------------
# convolutional blocks
# ---------------------------------------------------------------------------


class ResidualBlock(Module):
    """relu(bn(conv(x))) + skip(x).

    ``resample`` is None, "down" (stride-2 conv) or "up" (stride-2 transposed
    conv). The skip is the identity unless channels or resolution change, in
    which case it is a 1x1 conv (after nearest upsampling for "up").
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3, resample: str | None = None):
        if kernel not in (3, 7):
            raise ValueError(f"kernel must be 3 or 7, got {kernel}")
        if resample not in (None, "down", "up"):
            raise ValueError(f"unknown resample mode {resample!r}")
        self.cin, self.cout, self.resample = cin, cout, resample
        if resample == "up":
            self.conv = ConvTranspose2d(cin, cout, kernel, rng)
        else:
            self.conv = Conv2d(cin, cout, kernel, rng, stride=2 if resample == "down" else 1)
        self.bn = BatchNorm2d(cout)
        self.skip = None
        if cin != cout or resample is not None:
            self.skip = Conv2d(cin, cout, 1, rng, stride=2 if resample == "down" else 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeError(f"residual block expects {self.cin} channels, got {x.shape[1]}")
        y = T.relu(self.bn(self.conv(x)))
        if self.skip is None:
            return y + x
        s = T.upsample_nearest2d(x) if self.resample == "up" else x
        return y + self.skip(s)


class CombinedResidualBlock(Module):
    """Three residual blocks; the last one carries the resampling."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, resample: str | None = None, first_kernel: int = 3):
        self.blocks = [
            ResidualBlock(cin, cout, rng, kernel=first_kernel),
            ResidualBlock(cout, cout, rng),
            ResidualBlock(cout, cout, rng, resample=resample),
        ]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class ConvBlock(Module):
    """Two 3x3 conv layers with a skip back to the block input."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        y = T.relu(self.bn1(self.conv1(x)))
        y = T.relu(self.bn2(self.conv2(y)))
        return x + y


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------


@dataclass
class TransformerConfig:
    embed_dim: int = 256
    heads: int = 8
    layers: int = 4
    mlp_ratio: int = 4
    patch: int = 1
    mlp_activation: str = "gelu"
    layernorm_sqrt: bool = False
    ln_eps: float = 1e-6
    attention: str = "tiled"
    attn_tile: int = 64

    def validate(self) -> None:
        for name in ("embed_dim", "heads", "layers", "mlp_ratio", "patch", "attn_tile"):
            if getattr(self, name) < 1:
                raise ValueError(f"transformer {name} must be positive")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.mlp_activation not in ("gelu", "relu"):
            raise ValueError(f"mlp_activation must be gelu or relu, got {self.mlp_activation!r}")
        if self.attention not in ("tiled", "naive"):
            raise ValueError(f"attention must be tiled or naive, got {self.attention!r}")


class PatchEmbed(Module):
    """(N, C, H, W) -> (N, T, D): per-patch linear projection plus learned positions."""

    def __init__(self, channels: int, grid: int, patch: int, dim: int, rng: np.random.Generator):
        if grid % patch:
            raise ShapeError(f"feature map extent {grid} is not divisible by patch {patch}")
        self.channels, self.grid, self.patch = channels, grid, patch
        self.tokens = (grid // patch) ** 2
        self.proj = Linear(channels * patch * patch, dim, rng)
        self.pos = Parameter((rng.standard_normal((1, self.tokens, dim)) * 0.02).astype(T.get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if (c, h, w) != (self.channels, self.grid, self.grid):
            raise ShapeError(f"patch embed expects (N,{self.channels},{self.grid},{self.grid}), got {x.shape}")
        p, g = self.patch, self.grid // self.patch
        x = x.reshape(n, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, g * g, c * p * p)
        return self.proj(x) + self.pos


class Unpatchify(Module):
    """(N, T, D) -> (N, C, H, W); zero-initialized so a fresh block adds nothing."""

    def __init__(self, dim: int, channels: int, grid: int, patch: int, rng: np.random.Generator):
        self.channels, self.grid, self.patch = channels, grid, patch
        self.proj = Linear(dim, channels * patch * patch, rng, zero_init=True)

    def forward(self, tokens: Tensor) -> Tensor:
        n = tokens.shape[0]
        c, p, g = self.channels, self.patch, self.grid // self.patch
        x = self.proj(tokens)
        return x.reshape(n, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, g * p, g * p)


class MultiHeadAttention(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.heads, self.kind, self.tile = cfg.heads, cfg.attention, cfg.attn_tile
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(n, t, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        o = attention(q, k, v, kind=self.kind, tile=self.tile)
        return self.out(o.transpose(0, 2, 1, 3).reshape(n, t, d))


class MLP(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        hidden = cfg.embed_dim * cfg.mlp_ratio
        self.fc1 = Linear(cfg.embed_dim, hidden, rng)
        self.fc2 = Linear(hidden, cfg.embed_dim, rng)
        self.act = cfg.mlp_activation

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.activation(self.fc1(x), self.act))


class TransformerLayer(Module):
    """Pre-norm layer: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.embed_dim, cfg.ln_eps, cfg.layernorm_sqrt)
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.embed_dim, cfg.ln_eps, cfg.layernorm_sqrt)
        self.mlp = MLP(cfg, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class AdaLNZeroLayer(Module):
    """Transformer layer modulated per token by a conditioning sequence.

    A zero-initialized affine regression of ``x + cond`` yields six
    modulation tensors. Scale/shift pairs act on the affine-free norms
    (``LN(x) * (1 + scale) + shift``); the two gates multiply the attention
    and MLP branches before they join the residual stream. A fresh layer is
    therefore the identity map.
    """

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.norm1 = LayerNorm(d, cfg.ln_eps, cfg.layernorm_sqrt, affine=False)
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(d, cfg.ln_eps, cfg.layernorm_sqrt, affine=False)
        self.mlp = MLP(cfg, rng)
        self.modulation = Linear(d, 6 * d, rng, zero_init=True)

    def regress(self, cond: Tensor) -> list[Tensor]:
        """(scale1, shift1, gate1, scale2, shift2, gate2), each shaped like ``cond``."""
        mods = self.modulation(cond)
        d = cond.shape[-1]
        return [mods[..., i * d : (i + 1) * d] for i in range(6)]

    def forward(self, x: Tensor, cond_tokens: Tensor) -> Tensor:
        if x.shape != cond_tokens.shape:
            raise ShapeError(f"feature tokens {x.shape} and conditioning tokens {cond_tokens.shape} differ")
        scale1, shift1, gate1, scale2, shift2, gate2 = self.regress(x + cond_tokens)
        h = self.norm1(x) * (scale1 + 1.0) + shift1
        x = x + gate1 * self.attn(h)
        h = self.norm2(x) * (scale2 + 1.0) + shift2
        return x + gate2 * self.mlp(h)


class ViTBlock(Module):
    """Patchify, run the transformer encoder, unpatchify, add the block input.

    ``mode="mprvit"`` wraps the encoder in residual 3x3 convs and uses plain
    layers; ``mode="tavit"`` drops the convs and conditions every layer on a
    latent segmentation map of the same spatial grid.
    """

    def __init__(self, channels: int, grid: int, cfg: TransformerConfig, rng: np.random.Generator,
                 mode: str = "mprvit", cond_channels: int | None = None):
        if mode not in ("mprvit", "tavit"):
            raise ValueError(f"unknown ViT block mode {mode!r}")
        cfg.validate()
        self.mode = mode
        self.embed = PatchEmbed(channels, grid, cfg.patch, cfg.embed_dim, rng)
        if mode == "mprvit":
            self.conv_pre = Conv2d(channels, channels, 3, rng)
            self.layers = [TransformerLayer(cfg, rng) for _ in range(cfg.layers)]
        else:
            self.cond_embed = PatchEmbed(cond_channels or channels, grid, cfg.patch, cfg.embed_dim, rng)
            self.layers = [AdaLNZeroLayer(cfg, rng) for _ in range(cfg.layers)]
        self.unpatch = Unpatchify(cfg.embed_dim, channels, grid, cfg.patch, rng)
        if mode == "mprvit":
            self.conv_post = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        if self.mode == "tavit":
            if cond is None:
                raise ValueError("tavit ViT block requires a latent segmentation map")
            tokens = self.embed(x)
            cond_tokens = self.cond_embed(cond)
            for layer in self.layers:
                tokens = layer(tokens, cond_tokens)
            return x + self.unpatch(tokens)
        h = x + self.conv_pre(x)
        tokens = self.embed(h)
        for layer in self.layers:
            tokens = layer(tokens)
        y = self.unpatch(tokens)
        return x + y + self.conv_post(y)

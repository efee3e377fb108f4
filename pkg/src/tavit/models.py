"""MPR-ViT and TA-ViT networks assembled from :mod:`tavit.nn`.

Both share one macro-structure: a convolutional encoder of combined residual
blocks that shrinks the image 4x, an information bottleneck alternating conv
blocks with a single weight-shared ViT block, and a mirrored decoder ending
in a 7x7 conv and tanh. They differ only in the ViT block mode.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import (
    CombinedResidualBlock,
    Conv2d,
    ConvBlock,
    Module,
    TransformerConfig,
    ViTBlock,
    child_rng,
)
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    in_channels: int = 2
    image_size: int = 120
    channels: tuple[int, ...] = (64, 128, 256)
    strides: tuple[int, ...] = (1, 2, 2)
    conditioning: str = "none"
    latent_channels: int = 256
    vit_blocks: int = 2
    seed: int = 0
    transformer: TransformerConfig = field(default_factory=TransformerConfig)

    @property
    def bottleneck_channels(self) -> int:
        return self.channels[-1]

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // int(np.prod(self.strides))

    def validate(self) -> None:
        if self.in_channels not in (1, 2):
            raise ValueError(f"in_channels must be 1 or 2, got {self.in_channels}")
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ValueError("channels and strides must list one entry per combined residual block")
        if any(c < 1 for c in self.channels) or any(s not in (1, 2) for s in self.strides):
            raise ValueError(f"invalid channel plan {self.channels} / strides {self.strides}")
        if int(np.prod(self.strides)) != 4:
            raise ValueError(f"encoder must reduce the image by exactly 4, strides {self.strides} give {int(np.prod(self.strides))}")
        if self.image_size % 4:
            raise ValueError(f"image_size {self.image_size} is not divisible by 4")
        if self.conditioning not in ("none", "adaln_zero"):
            raise ValueError(f"conditioning must be 'none' or 'adaln_zero', got {self.conditioning!r}")
        if self.vit_blocks < 1:
            raise ValueError("vit_blocks must be >= 1")
        self.transformer.validate()
        if self.bottleneck_size % self.transformer.patch:
            raise ValueError(f"bottleneck size {self.bottleneck_size} not divisible by patch {self.transformer.patch}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        tcfg = TransformerConfig(**d.pop("transformer", {}))
        for key in ("channels", "strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(transformer=tcfg, **d)


class HybridViT(Module):
    """Encoder -> bottleneck -> decoder -> 7x7 conv -> tanh."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.config = cfg
        seed = cfg.seed
        chans, strides = cfg.channels, cfg.strides

        self.encoder = []
        cin = cfg.in_channels
        for i, (c, s) in enumerate(zip(chans, strides)):
            rng = child_rng(seed, f"encoder.{i}")
            self.encoder.append(CombinedResidualBlock(
                cin, c, rng, resample="down" if s == 2 else None, first_kernel=7 if i == 0 else 3))
            cin = c

        cb, grid = cfg.bottleneck_channels, cfg.bottleneck_size
        self.conv_blocks = [ConvBlock(cb, child_rng(seed, f"bottleneck.conv.{i}")) for i in range(cfg.vit_blocks + 1)]
        mode = "tavit" if cfg.conditioning == "adaln_zero" else "mprvit"
        # one block, applied vit_blocks times: weights are shared
        self.vit = ViTBlock(cb, grid, cfg.transformer, child_rng(seed, "bottleneck.vit"),
                            mode=mode, cond_channels=cfg.latent_channels)

        self.decoder = []
        rev = list(reversed(range(len(chans))))
        for j, i in enumerate(rev):
            cout = chans[i - 1] if i > 0 else chans[0]
            rng = child_rng(seed, f"decoder.{j}")
            self.decoder.append(CombinedResidualBlock(
                chans[i], cout, rng, resample="up" if strides[i] == 2 else None))
        self.head = Conv2d(chans[0], 1, 7, child_rng(seed, "head"), bias=True)

    @property
    def conditioned(self) -> bool:
        return self.config.conditioning == "adaln_zero"

    def _check_image(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"model expects (B,{cfg.in_channels},{cfg.image_size},{cfg.image_size}) input, got {x.shape}")

    def _check_inputs(self, x: Tensor, seg_latent: Tensor | None) -> None:
        cfg = self.config
        self._check_image(x)
        if self.conditioned:
            if seg_latent is None:
                raise ValueError("TA-ViT forward requires a latent segmentation map")
            g = cfg.bottleneck_size
            if seg_latent.shape != (x.shape[0], cfg.latent_channels, g, g):
                raise ShapeError(
                    f"latent map must be (B,{cfg.latent_channels},{g},{g}), got {seg_latent.shape}")
        elif seg_latent is not None:
            raise ValueError("unconditioned model does not take a latent segmentation map")

    def encode(self, x: Tensor) -> Tensor:
        for block in self.encoder:
            x = block(x)
        return x

    def bottleneck(self, x: Tensor, seg_latent: Tensor | None = None, use_vit: bool = True) -> Tensor:
        x = self.conv_blocks[0](x)
        for conv in self.conv_blocks[1:]:
            if use_vit:
                x = self.vit(x, seg_latent)
            x = conv(x)
        return x

    def decode(self, x: Tensor) -> Tensor:
        for block in self.decoder:
            x = block(x)
        return T.tanh(self.head(x))

    def forward(self, x, seg_latent=None, use_vit: bool = True) -> Tensor:
        x = T.as_tensor(x)
        if seg_latent is not None:
            seg_latent = T.as_tensor(seg_latent, dtype=x.dtype)
        if use_vit:
            self._check_inputs(x, seg_latent)
        else:
            self._check_image(x)
        return self.decode(self.bottleneck(self.encode(x), seg_latent, use_vit=use_vit))

    def transformer_parameters(self) -> int:
        return self.vit.num_parameters()


def build_mprvit(cfg: ModelConfig) -> HybridViT:
    if cfg.conditioning != "none":
        raise ValueError("MPR-ViT requires conditioning='none'")
    return HybridViT(cfg)


def build_tavit(cfg: ModelConfig) -> HybridViT:
    if cfg.conditioning != "adaln_zero":
        raise ValueError("TA-ViT requires conditioning='adaln_zero'")
    return HybridViT(cfg)


def build_latent_encoder(cfg: ModelConfig) -> HybridViT:
    """MPR-ViT trained as an identity map on encoded segmentation maps."""
    if cfg.in_channels != 1:
        raise ValueError("the latent encoder takes a single segmentation channel")
    return build_mprvit(cfg)


def build_model(cfg: ModelConfig) -> HybridViT:
    return build_tavit(cfg) if cfg.conditioning == "adaln_zero" else build_mprvit(cfg)


def forward(model: HybridViT, inputs, seg_latent=None) -> Tensor:
    return model(inputs, seg_latent)


def extract_latent(encoder: HybridViT, seg_image, batch_size: int = 16) -> np.ndarray:
    """Bottleneck activations of the latent encoder, decoder skipped.

    Runs in eval mode without recording a graph. Returns an array of shape
    (B, bottleneck_channels, size/4, size/4).
    """
    cfg = encoder.config
    arr = np.asarray(seg_image.data if isinstance(seg_image, Tensor) else seg_image)
    if arr.ndim != 4 or arr.shape[1:] != (1, cfg.image_size, cfg.image_size):
        raise ShapeError(f"latent extraction expects (B,1,{cfg.image_size},{cfg.image_size}), got {arr.shape}")
    was_training = encoder.training
    encoder.eval()
    dtype = encoder.head.weight.dtype
    outs = []
    try:
        with T.no_grad():
            for s in range(0, len(arr), batch_size):
                x = Tensor(arr[s : s + batch_size].astype(dtype, copy=False))
                outs.append(encoder.bottleneck(encoder.encode(x)).data)
    finally:
        encoder.train(was_training)
    g = cfg.bottleneck_size
    if not outs:
        return np.zeros((0, cfg.bottleneck_channels, g, g), dtype=dtype)
    return np.concatenate(outs, axis=0)


def predict(model: HybridViT, inputs: np.ndarray, latents: np.ndarray | None = None, batch_size: int = 16) -> np.ndarray:
    """Eval-mode batched forward; returns a numpy array in [-1, 1]."""
    was_training = model.training
    model.eval()
    dtype = model.head.weight.dtype
    outs = []
    try:
        with T.no_grad():
            for s in range(0, len(inputs), batch_size):
                x = inputs[s : s + batch_size].astype(dtype, copy=False)
                lat = None if latents is None else latents[s : s + batch_size].astype(dtype, copy=False)
                outs.append(model(x, lat).data)
    finally:
        model.train(was_training)
    return np.concatenate(outs, axis=0)

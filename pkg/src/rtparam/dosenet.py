"""Stage one: dose map prediction.

A UNet-style encoder/decoder with a token-transformer bottleneck. The
encoder halves the grid four times; every bottleneck position becomes
one token, a learned positional embedding is added, and a stack of
pre-norm attention blocks mixes the tokens before the decoder restores
full resolution. The final ReLU keeps predicted dose nonnegative.
Inputs are (6, H, W): CT, target mask, and the four OAR masks, with
H and W divisible by 16. Output is normalized dose in (1, H, W).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ConvBNReLU,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Tensor,
    add,
    attention,
    concat,
    maxpool2d,
    narrow,
    relu,
    reshape,
    transpose,
    upsample_nearest2x,
)

INPUT_CHANNELS = ("ct", "ptv", "bladder", "st", "fhl", "fhr")
DOWNSAMPLE_FACTOR = 16


@dataclass
class DoseNetConfig:
    in_channels: int = 6
    enc_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    dec_channels: tuple[int, int, int, int] = (96, 64, 48, 32)
    transformer_depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    use_skips: bool = True
    use_transformer: bool = True
    image_size: int = 64

    def __post_init__(self):
        if len(self.enc_channels) != 4:
            raise ValueError(f"exactly 4 encoder blocks required, got {len(self.enc_channels)}")
        if len(self.dec_channels) != 4:
            raise ValueError(f"exactly 4 decoder blocks required, got {len(self.dec_channels)}")
        if self.enc_channels[-1] % self.heads:
            raise ValueError(f"model dim {self.enc_channels[-1]} not divisible by {self.heads} heads")
        if self.image_size % DOWNSAMPLE_FACTOR:
            raise ValueError(f"image size {self.image_size} not divisible by {DOWNSAMPLE_FACTOR}")

    @property
    def model_dim(self) -> int:
        return self.enc_channels[-1]

    @property
    def token_grid(self) -> int:
        return self.image_size // DOWNSAMPLE_FACTOR


def feature_to_tokens(feature: Tensor) -> Tensor:
    """(C, h, w) -> (h*w, C): one token per bottleneck position."""
    c, h, w = feature.shape
    return transpose(reshape(feature, c, h * w))


def tokens_to_feature(tokens: Tensor, h: int, w: int) -> Tensor:
    """Inverse of feature_to_tokens; errors if the token count disagrees."""
    n, c = tokens.shape
    if n != h * w:
        raise ValueError(f"{n} tokens cannot fill a {h}x{w} grid")
    return reshape(transpose(tokens), c, h, w)


def resized_pos_embedding(pos: np.ndarray, old_hw: tuple[int, int],
                          new_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of a (h*w, dim) positional table to a new grid,
    corners aligned. Used to run trained weights at a new resolution."""
    oh, ow = old_hw
    nh, nw = new_hw
    grid = pos.reshape(oh, ow, -1)
    ys = np.linspace(0, oh - 1, nh)
    xs = np.linspace(0, ow - 1, nw)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, oh - 1)
    x1 = np.minimum(x0 + 1, ow - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    out = (grid[y0][:, x0] * (1 - wy) * (1 - wx)
           + grid[y0][:, x1] * (1 - wy) * wx
           + grid[y1][:, x0] * wy * (1 - wx)
           + grid[y1][:, x1] * wy * wx)
    return out.reshape(nh * nw, pos.shape[1]).astype(pos.dtype)


class EncoderBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = ConvBNReLU(in_ch, out_ch, rng, dtype=dtype)
        self.conv2 = ConvBNReLU(out_ch, out_ch, rng, dtype=dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        skip = self.conv2(self.conv1(x))
        return maxpool2d(skip, 2), skip

    __call__ = forward


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, dtype=dtype)
        self.wk = Linear(dim, dim, rng, dtype=dtype)
        self.wv = Linear(dim, dim, rng, dtype=dtype)
        self.wo = Linear(dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        outs = []
        for h in range(self.heads):
            lo = h * self.head_dim
            outs.append(attention(narrow(q, 1, lo, self.head_dim),
                                  narrow(k, 1, lo, self.head_dim),
                                  narrow(v, 1, lo, self.head_dim)))
        return self.wo(concat(outs, axis=1))

    __call__ = forward


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng, dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, dtype=dtype)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.norm1(x)))
        return add(x, self.fc2(relu(self.fc1(self.norm2(x)))))

    __call__ = forward


class DecoderBlock(Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, rng,
                 use_skip: bool, dtype=np.float32):
        super().__init__()
        self.use_skip = use_skip
        merged = in_ch + (skip_ch if use_skip else 0)
        self.conv1 = ConvBNReLU(merged, out_ch, rng, dtype=dtype)
        self.conv2 = ConvBNReLU(out_ch, out_ch, rng, dtype=dtype)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = upsample_nearest2x(x)
        if self.use_skip:
            if skip.shape[1:] != x.shape[1:]:
                raise ValueError(f"skip spatial dims {skip.shape[1:]} do not match {x.shape[1:]}")
            x = concat([x, skip], axis=0)
        return self.conv2(self.conv1(x))

    __call__ = forward


class DoseNet(Module):
    def __init__(self, cfg: DoseNetConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        chans = cfg.enc_channels
        self.enc_blocks = ModuleList(
            EncoderBlock(cin, cout, rng, dtype=dtype)
            for cin, cout in zip((cfg.in_channels,) + chans[:-1], chans))

        if cfg.use_transformer:
            g = cfg.token_grid
            self.pos_embedding = Tensor(rng.standard_normal((g * g, cfg.model_dim)) * 0.02,
                                        requires_grad=True, dtype=dtype)
            self.blocks = ModuleList(
                TransformerBlock(cfg.model_dim, cfg.heads, cfg.mlp_ratio, rng, dtype=dtype)
                for _ in range(cfg.transformer_depth))

        dec_out = cfg.dec_channels
        dec_in = (chans[3],) + dec_out[:-1]
        self.dec_blocks = ModuleList(
            DecoderBlock(cin, skip, cout, rng, cfg.use_skips, dtype=dtype)
            for cin, skip, cout in zip(dec_in, reversed(chans), dec_out))
        self.head = Conv2d(dec_out[-1], 1, rng, kernel_size=1, padding=0, dtype=dtype)

    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {c}")
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(f"spatial dims {(h, w)} not divisible by {DOWNSAMPLE_FACTOR}")
        skips = []
        for block in self.enc_blocks:
            x, skip = block(x)
            skips.append(skip)
        return x, skips

    def transform(self, feature: Tensor) -> Tensor:
        if not self.cfg.use_transformer:
            return feature
        c, h, w = feature.shape
        tokens = feature_to_tokens(feature)
        pos = self.pos_embedding
        if pos.shape[0] != h * w:
            g = self.cfg.token_grid
            pos = Tensor(resized_pos_embedding(pos.data, (g, g), (h, w)))
        tokens = add(tokens, pos)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens_to_feature(tokens, h, w)

    def decode(self, feature: Tensor, skips: list[Tensor]) -> Tensor:
        x = feature
        for block, skip in zip(self.dec_blocks, reversed(skips)):
            x = block(x, skip)
        return relu(self.head(x))

    def forward(self, x: Tensor) -> Tensor:
        bottleneck, skips = self.encode(x)
        return self.decode(self.transform(bottleneck), skips)

    __call__ = forward

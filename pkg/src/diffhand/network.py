"""Conditional denoiser: noise-level embedding, text/style encoder and a 1-d U-Net
with cross-attention to the encoded text.

Tensors are channels-last, ``[batch, length, channels]``. Masks are float
tensors of 1 (valid) and 0 (padding).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 128
    heads: int = 4
    ff_mult: int = 2
    down_levels: int = 3
    attn_levels: int = 2  # attention at this many of the coarsest resolutions
    kernel: int = 3
    style_shape: tuple[int, int] = (64, 512)
    style_channels: tuple[int, ...] = (16, 32, 64, 64)
    text_pos_scaling: bool = True

    def __post_init__(self):
        self.style_shape = tuple(self.style_shape)
        self.style_channels = tuple(self.style_channels)
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0 <= self.attn_levels <= self.down_levels + 1:
            raise ValueError("attn_levels must be between 0 and down_levels + 1")

    @property
    def feature_dim(self) -> int:
        return self.style_channels[-1]

    def to_dict(self) -> dict:
        return asdict(self)


FULL_SCALE = dict(d_model=256, heads=8, style_channels=(32, 64, 128, 256))


# ---------------------------------------------------------------- primitives


def sinusoid(positions: torch.Tensor, d_model: int) -> torch.Tensor:
    """Transformer sinusoids at real-valued ``positions``; output ``positions.shape + (d_model,)``."""
    half = (d_model + 1) // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=positions.device) * 2 / d_model
    )
    args = positions.to(torch.float64)[..., None] * freqs
    pe = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)
    return pe[..., :d_model]


def positional_encode(length: int, d_model: int, position_multiplier: float = 1.0) -> torch.Tensor:
    """``[length, d_model]`` encoding of positions ``i * position_multiplier``."""
    if not position_multiplier > 0:
        raise ValueError("position_multiplier must be positive")
    return sinusoid(torch.arange(length, dtype=torch.float64) * position_multiplier, d_model)


def masked_fill_zero(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    return x if mask is None else x * mask[..., None].to(x.dtype)


class Conv1d(nn.Conv1d):
    """Channels-last 1-d convolution with same padding."""

    def __init__(self, c_in, c_out, kernel=3, stride=1):
        super().__init__(c_in, c_out, kernel, stride=stride, padding=kernel // 2)

    def forward(self, x):
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


class NoiseEmbedding(nn.Module):
    """Two fully connected layers mapping the scalar level to a ``d_model`` vector."""

    def __init__(self, d_model: int):
        super().__init__()
        self.fc1 = nn.Linear(1, d_model)
        self.fc2 = nn.Linear(d_model, d_model)

    def forward(self, level: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.fc1(level.reshape(-1, 1).to(self.fc1.weight.dtype)))
        return F.silu(self.fc2(h))


class AffineCondition(nn.Module):
    """Per-channel ``x * scale + bias`` with scale and bias predicted from the noise embedding.

    Initialized to the identity map.
    """

    def __init__(self, emb_dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.fc = nn.Linear(emb_dim, 2 * channels)
        nn.init.zeros_(self.fc.weight)
        with torch.no_grad():
            self.fc.bias[:channels] = 1.0
            self.fc.bias[channels:] = 0.0

    def scale_bias(self, noise_emb):
        sb = self.fc(noise_emb)
        return sb[..., : self.channels], sb[..., self.channels :]

    def forward(self, x: torch.Tensor, noise_emb: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")
        scale, bias = self.scale_bias(noise_emb)
        return x * scale[:, None, :] + bias[:, None, :]


def affine_condition(x: torch.Tensor, noise_emb: torch.Tensor, layer: AffineCondition) -> torch.Tensor:
    return layer(x, noise_emb)


class ConvBlock(nn.Module):
    """Three conv -> affine -> SiLU layers plus a 1x1 convolutional skip path."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int, kernel: int = 3):
        super().__init__()
        self.convs = nn.ModuleList([Conv1d(c_in if i == 0 else c_out, c_out, kernel) for i in range(3)])
        self.affines = nn.ModuleList([AffineCondition(emb_dim, c_out) for _ in range(3)])
        self.skip = Conv1d(c_in, c_out, 1)

    def forward(self, x, noise_emb, mask=None):
        if x.shape[1] == 0:
            raise ValueError("zero-length sequence")
        h = x
        for conv, aff in zip(self.convs, self.affines):
            h = masked_fill_zero(F.silu(aff(conv(h), noise_emb)), mask)
        return masked_fill_zero(h + self.skip(x), mask)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, d_kv: int | None = None):
        super().__init__()
        d_kv = d_kv or d_model
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_kv, d_model)
        self.v = nn.Linear(d_kv, d_model)
        self.o = nn.Linear(d_model, d_model)

    def split(self, x):
        B, L, D = x.shape
        return x.reshape(B, L, self.heads, D // self.heads).transpose(1, 2)

    def forward(self, query, key, value, key_mask=None):
        """Returns the attended values and weights ``[B, heads, Lq, Lk]``."""
        q, k, v = self.split(self.q(query)), self.split(self.k(key)), self.split(self.v(value))
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_mask is not None:
            if bool((key_mask.sum(-1) == 0).any()):
                raise ValueError("attention row with every key masked")
            logits = logits.masked_fill(key_mask[:, None, None, :] == 0, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ v).transpose(1, 2).flatten(2)
        return self.o(out), weights


class FeedForward(nn.Sequential):
    def __init__(self, d_model, width):
        super().__init__(nn.Linear(d_model, width), nn.SiLU(), nn.Linear(width, d_model))


class AttnBlock(nn.Module):
    """Cross-attention to the encoder, self-attention, feed forward; each followed by
    a residual add, layer norm and noise-level affine."""

    def __init__(self, d_model: int, heads: int, emb_dim: int, ff_width: int):
        super().__init__()
        self.d_model = d_model
        self.cross = MultiHeadAttention(d_model, heads)
        self.self_attn = MultiHeadAttention(d_model, heads)
        self.ff = FeedForward(d_model, ff_width)
        self.norms = nn.ModuleList([nn.LayerNorm(d_model) for _ in range(3)])
        self.affines = nn.ModuleList([AffineCondition(emb_dim, d_model) for _ in range(3)])

    def forward(self, x, enc, noise_emb, stroke_mask=None, token_mask=None, text_multiplier=None):
        B, N, D = x.shape
        L = enc.shape[1]
        pe_s = sinusoid(torch.arange(N, device=x.device, dtype=torch.float64), D).to(x.dtype)
        text_pos = torch.arange(L, device=x.device, dtype=torch.float64).expand(B, L)
        if text_multiplier is not None:
            text_pos = text_pos * text_multiplier.to(torch.float64)[:, None]
        pe_t = sinusoid(text_pos, D).to(x.dtype)

        h, weights = self.cross(x + pe_s, enc + pe_t, enc, token_mask)
        x = self.affines[0](self.norms[0](x + h), noise_emb)
        q = x + pe_s
        h, _ = self.self_attn(q, q, x, stroke_mask)
        x = self.affines[1](self.norms[1](x + h), noise_emb)
        x = self.affines[2](self.norms[2](x + self.ff(x)), noise_emb)
        return masked_fill_zero(x, stroke_mask), weights


class StyleExtractor(nn.Module):
    """Strided conv net: each stage halves both image dimensions.

    Output is ``[B, P, C]`` with positions ordered column-major so that
    horizontally adjacent grid cells stay close.
    """

    def __init__(self, channels=(16, 32, 64, 64), image_shape=(64, 512)):
        super().__init__()
        self.image_shape = tuple(image_shape)
        layers, c_in = [], 1
        for c in channels:
            layers.append(nn.Conv2d(c_in, c, 3, stride=2, padding=1))
            c_in = c
        self.stages = nn.ModuleList(layers)

    def grid_shape(self, h=None, w=None):
        h, w = h or self.image_shape[0], w or self.image_shape[1]
        for _ in self.stages:
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 3 or tuple(images.shape[1:]) != self.image_shape:
            raise ValueError(f"style images must be [B, {self.image_shape[0]}, {self.image_shape[1]}], got {tuple(images.shape)}")
        h = images[:, None].to(self.stages[0].weight.dtype)
        for conv in self.stages:
            h = F.silu(conv(h))
        # [B, C, H', W'] -> [B, W', H', C] -> [B, W'*H', C]
        return h.permute(0, 3, 2, 1).flatten(1, 2)

    def column_index(self, grid=None) -> torch.Tensor:
        gh, gw = grid or self.grid_shape()
        return torch.arange(gw).repeat_interleave(gh)


def style_features(images: torch.Tensor, extractor: StyleExtractor) -> torch.Tensor:
    return extractor(images)


class Encoder(nn.Module):
    """Character embeddings attend over style features; result is added back, then a
    feed forward layer; both stages end in layer norm and noise-level affine."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.embed = nn.Embedding(cfg.vocab_size, d, padding_idx=0)
        self.style_proj = nn.Linear(cfg.feature_dim, d)
        self.attn = MultiHeadAttention(d, cfg.heads)
        self.ff = FeedForward(d, cfg.ff_mult * d)
        self.norms = nn.ModuleList([nn.LayerNorm(d) for _ in range(2)])
        self.affines = nn.ModuleList([AffineCondition(d, d) for _ in range(2)])

    def forward(self, tokens, style_feats, noise_emb, token_mask=None, style_columns=None):
        if tokens.shape[1] == 0:
            raise ValueError("empty token sequence")
        B, L = tokens.shape
        d = self.embed.embedding_dim
        x = self.embed(tokens)
        pe_t = sinusoid(torch.arange(L, device=tokens.device), d).to(x.dtype)
        s = self.style_proj(style_feats.to(x.dtype))
        if style_columns is None:
            style_columns = torch.arange(s.shape[1], device=s.device)
        pe_s = sinusoid(style_columns, d).to(x.dtype)
        h, weights = self.attn(x + pe_t, s + pe_s, s)
        x = self.affines[0](self.norms[0](x + h), noise_emb)
        x = self.affines[1](self.norms[1](x + self.ff(x)), noise_emb)
        return masked_fill_zero(x, token_mask), weights


class DenoiserOutput(NamedTuple):
    eps_hat: torch.Tensor  # [B, N, 2]
    pen_prob: torch.Tensor  # [B, N]
    pen_logit: torch.Tensor  # [B, N]
    attention: list  # cross-attention weights per attentional block, [B, heads, N_level, L]
    attention_levels: list  # resolution level of each entry in ``attention``


PROB_EPS = 1e-7


class Denoiser(nn.Module):
    """Predicts the added noise and pen-lift probabilities from a noised stroke sequence.

    Downsampling path of stride-2 convolutions, mirrored nearest-neighbour
    upsampling, convolutional long-range skips, attention at the coarsest
    ``attn_levels`` resolutions, and two linear heads on a shared trunk.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, k = cfg.d_model, cfg.kernel
        self.noise_embed = NoiseEmbedding(d)
        self.style = StyleExtractor(cfg.style_channels, cfg.style_shape)
        self.encoder = Encoder(cfg)
        self.inp = Conv1d(2, d, k)
        L = cfg.down_levels
        self.attn_from = L + 1 - cfg.attn_levels
        self.down_blocks = nn.ModuleList([ConvBlock(d, d, d, k) for _ in range(L + 1)])
        self.downsample = nn.ModuleList([Conv1d(d, d, k, stride=2) for _ in range(L)])
        self.down_attn = nn.ModuleDict(
            {str(i): AttnBlock(d, cfg.heads, d, cfg.ff_mult * d) for i in range(L + 1) if i >= self.attn_from}
        )
        self.up_convs = nn.ModuleList([Conv1d(d, d, k) for _ in range(L)])
        self.skips = nn.ModuleList([Conv1d(d, d, 1) for _ in range(L)])
        self.up_blocks = nn.ModuleList([ConvBlock(d, d, d, k) for _ in range(L)])
        self.up_attn = nn.ModuleDict(
            {str(i): AttnBlock(d, cfg.heads, d, cfg.ff_mult * d) for i in range(L) if i >= self.attn_from}
        )
        self.eps_head = nn.Linear(d, 2)
        self.pen_head = nn.Linear(d, 1)

    def extract_style(self, images):
        return self.style(images)

    def encode(self, tokens, noise_emb, style_images=None, style_feats=None, token_mask=None):
        if style_feats is None:
            if style_images is None:
                raise ValueError("need style images or precomputed style features")
            style_feats = self.style(style_images)
            columns = self.style.column_index().to(tokens.device)
        else:
            grid = self.style.grid_shape()
            columns = self.style.column_index().to(tokens.device) if style_feats.shape[1] == grid[0] * grid[1] else None
        return self.encoder(tokens, style_feats, noise_emb, token_mask, columns)

    def forward(
        self,
        y_t: torch.Tensor,
        tokens: torch.Tensor,
        level: torch.Tensor,
        style_images: torch.Tensor | None = None,
        style_feats: torch.Tensor | None = None,
        stroke_mask: torch.Tensor | None = None,
        token_mask: torch.Tensor | None = None,
    ) -> DenoiserOutput:
        B, N, _ = y_t.shape
        dtype = self.inp.weight.dtype
        level = torch.as_tensor(level, dtype=dtype, device=y_t.device).reshape(-1).expand(B)
        if bool(((level <= 0) | (level > 1)).any()):
            raise ValueError("noise level must lie in (0, 1]")
        if stroke_mask is None:
            stroke_mask = torch.ones(B, N, dtype=dtype, device=y_t.device)
        if token_mask is None:
            token_mask = (tokens != 0).to(dtype)
        stroke_mask = stroke_mask.to(dtype)
        token_mask = token_mask.to(dtype)

        emb = self.noise_embed(level)
        enc, _ = self.encode(tokens, emb, style_images, style_feats, token_mask)
        text_len = token_mask.sum(1)

        attention, attn_levels = [], []

        def attend(block, h, mask, lvl):
            mult = mask.sum(1) / text_len if self.cfg.text_pos_scaling else None
            h, w = block(h, enc, emb, mask, token_mask, mult)
            attention.append(w)
            attn_levels.append(lvl)
            return h

        h = masked_fill_zero(self.inp(y_t.to(dtype)), stroke_mask)
        masks, skips = [stroke_mask], []
        L = self.cfg.down_levels
        for i in range(L + 1):
            h = self.down_blocks[i](h, emb, masks[i])
            if str(i) in self.down_attn:
                h = attend(self.down_attn[str(i)], h, masks[i], i)
            if i < L:
                skips.append(h)
                h = self.downsample[i](h)
                masks.append(masks[i][:, ::2])
                h = masked_fill_zero(h, masks[-1])
        for i in reversed(range(L)):
            n = skips[i].shape[1]
            h = masked_fill_zero(h.repeat_interleave(2, dim=1)[:, :n], masks[i])
            h = masked_fill_zero(self.up_convs[i](h) + self.skips[i](skips[i]), masks[i])
            h = self.up_blocks[i](h, emb, masks[i])
            if str(i) in self.up_attn:
                h = attend(self.up_attn[str(i)], h, masks[i], i)

        eps_hat = masked_fill_zero(self.eps_head(h), stroke_mask)
        logit = self.pen_head(h)[..., 0]
        prob = torch.sigmoid(logit).clamp(PROB_EPS, 1 - PROB_EPS)
        return DenoiserOutput(eps_hat, prob, logit, attention, attn_levels)


def denoiser_forward(model: Denoiser, y_t, tokens, style_image, level, **kw) -> DenoiserOutput:
    return model(y_t, tokens, level, style_images=style_image, **kw)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def params_count(cfg: ModelConfig) -> int:
    return count_parameters(Denoiser(cfg))

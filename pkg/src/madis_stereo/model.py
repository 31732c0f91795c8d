"""Masked stereo vision transformer with reconstruction and disparity heads.

Data flow for one stereo pair::

    patchify -> mask -> encoder (visible tokens only)
             -> decoder (mask tokens re-inserted, self-attn + cross-attn)
             -> linear reconstruction head         (student only)
             -> fusion head on 4 decoder taps -> (d, sigma)

The teacher runs the same pipeline on unmasked views with its own copy of
the encoder; decoder and heads are the very same objects for both paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .nn import Conv2d, DecoderBlock, EncoderBlock, LayerNorm, Linear, Module, parameter
from .tensor import ShapeError, Tensor, concat, gelu, no_grad, softplus, take_rows, upsample_nearest

SIGMA_FLOOR = 1e-3


def default_fusion_taps(decoder_depth: int) -> tuple[int, ...]:
    """Evenly spaced taps at 1/4, 1/2, 3/4 and the full decoder depth."""
    return tuple(int(np.ceil(decoder_depth * k / 4)) for k in range(1, 5))


@dataclass
class ModelConfig:
    image_h: int = 64
    image_w: int = 128
    in_chans: int = 3
    patch_size: int = 16
    embed_dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 2.0
    head_channels: int = 32
    fusion_taps: tuple[int, ...] | None = None
    mask_ratio: float = 0.4

    def __post_init__(self):
        if self.fusion_taps is None:
            self.fusion_taps = default_fusion_taps(self.decoder_depth)
        self.fusion_taps = tuple(int(t) for t in self.fusion_taps)
        self.validate()

    def validate(self) -> None:
        p = self.patch_size
        if self.image_h % p or self.image_w % p:
            raise ValueError(f"image {self.image_h}x{self.image_w} not divisible by patch size {p}")
        if p < 2 or p & (p - 1):
            raise ValueError("patch_size must be a power of two >= 2")
        if self.embed_dim % 4 or self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by 4 and by num_heads")
        taps = self.fusion_taps
        if len(taps) != 4:
            raise ValueError(f"fusion_taps needs exactly 4 layer indices, got {len(taps)}")
        if taps[0] < 1 or taps[-1] > self.decoder_depth:
            raise ValueError(f"fusion_taps {taps} outside 1..{self.decoder_depth}")
        diffs = np.diff(taps)
        # fewer than 4 decoder layers cannot provide 4 distinct taps
        if (self.decoder_depth >= 4 and np.any(diffs <= 0)) or np.any(diffs < 0):
            raise ValueError(f"fusion_taps {taps} must be increasing")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside [0, 1]")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_taps"] = list(self.fusion_taps)
        return d


# -- patches and masks ----------------------------------------------------------


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) or (H, W, C) pixels -> (B, N, p*p*C) patch vectors, row-major patch order."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"patchify (patch size {p})", (h, w))
    gh, gw = h // p, w // p
    out = images.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * c)
    return out[0] if single else out


def unpatchify(patches, patch_size: int, grid_h: int, grid_w: int, chans: int):
    """Inverse of :func:`patchify`; accepts a Tensor (differentiable) or an array."""
    p = patch_size
    if isinstance(patches, Tensor):
        b = patches.shape[0]
        x = patches.reshape(b, grid_h, grid_w, p, p, chans).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, grid_h * p, grid_w * p, chans)
    patches = np.asarray(patches)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b = patches.shape[0]
    x = patches.reshape(b, grid_h, grid_w, p, p, chans).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, grid_h * p, grid_w * p, chans)
    return x[0] if single else x


def patch_index(row: int, col: int, patch_size: int, grid_w: int) -> int:
    """Index of the patch containing pixel (row, col)."""
    return (row // patch_size) * grid_w + col // patch_size


@dataclass
class PatchMask:
    """Per-patch mask flags; ``True`` marks a hidden patch."""

    flags: np.ndarray

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)

    @property
    def num_patches(self) -> int:
        return int(self.flags.size)

    @property
    def num_masked(self) -> int:
        return int(self.flags.sum())

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.flags)

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    def pixel_mask(self, patch_size: int, grid_h: int, grid_w: int) -> np.ndarray:
        """(H, W) boolean map; every pixel of a masked patch is set."""
        grid = self.flags.reshape(grid_h, grid_w)
        return np.repeat(np.repeat(grid, patch_size, axis=0), patch_size, axis=1)

    @classmethod
    def empty(cls, num_patches: int) -> "PatchMask":
        return cls(np.zeros(num_patches, dtype=bool))


def num_masked_patches(num_patches: int, ratio: float) -> int:
    # round half to even, like Python's round
    return int(round(ratio * num_patches))


def sample_mask(num_patches: int, ratio: float, seed) -> PatchMask:
    """Mask exactly ``round(ratio * num_patches)`` patches, uniformly without replacement.

    ``seed`` may be an int or a ``np.random.Generator``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = num_masked_patches(num_patches, ratio)
    flags = np.zeros(num_patches, dtype=bool)
    flags[rng.choice(num_patches, size=n, replace=False)] = True
    return PatchMask(flags)


def sincos_pos_embed(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2D sine-cosine positional embedding, shape (grid_h*grid_w, dim)."""
    if dim % 4:
        raise ValueError("positional embedding dim must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    ys, xs = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64), indexing="ij")

    def encode(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([encode(ys), encode(xs)], axis=1)


@dataclass
class TokenGrid:
    tokens: Tensor  # (B, N, D)
    grid_h: int
    grid_w: int
    pos_embed: np.ndarray  # (N, D)

    def __post_init__(self):
        if self.tokens.shape[1] != self.grid_h * self.grid_w:
            raise ShapeError("TokenGrid", self.tokens.shape, (self.grid_h, self.grid_w))
        if self.pos_embed.shape != self.tokens.shape[1:]:
            raise ShapeError("TokenGrid pos_embed", self.tokens.shape, self.pos_embed.shape)


@dataclass
class DisparityPrediction:
    d: Tensor  # (B, H, W) pixels
    sigma: Tensor  # (B, H, W) strictly positive


@dataclass
class EncodedView:
    features: Tensor  # (B, N_visible, D), visible tokens in original patch order
    masks: list[PatchMask]


@dataclass
class AttentionLog:
    """Softmax weights per decoder layer, each (B, heads, T_q, T_k)."""

    self_attn: list[np.ndarray] = field(default_factory=list)
    cross_attn: list[np.ndarray] = field(default_factory=list)


@dataclass
class DecoderOutput:
    layers: list[Tensor]  # decoder_depth entries, each (B, N, D)
    attention: AttentionLog


@dataclass
class StudentOutput:
    prediction: DisparityPrediction
    recon_left: Tensor  # (B, H, W, C)
    recon_right: Tensor
    attention: AttentionLog  # left-view decoder pass
    attention_right: AttentionLog


def _stack_masks(masks: Sequence[PatchMask], num_patches: int) -> tuple[np.ndarray, np.ndarray]:
    """Visible and restore index arrays for a batch; masks must agree in count."""
    counts = {m.num_masked for m in masks}
    if len(counts) != 1:
        raise ValueError("all masks in a batch need the same number of masked patches")
    for m in masks:
        if m.num_patches != num_patches:
            raise ShapeError("mask", (m.num_patches,), (num_patches,))
    visible = np.stack([m.visible_indices for m in masks])
    order = np.stack([np.concatenate([m.visible_indices, m.masked_indices]) for m in masks])
    restore = np.argsort(order, axis=1, kind="stable")
    return visible, restore


# -- networks -----------------------------------------------------------------


class Encoder(Module):
    """Patch embedding followed by ViT blocks over the visible tokens."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        p, c, d = cfg.patch_size, cfg.in_chans, cfg.embed_dim
        self.cfg = cfg
        self.patch_embed = Linear(p * p * c, d, rng)
        self.blocks = [EncoderBlock(d, cfg.num_heads, cfg.mlp_ratio, rng) for _ in range(cfg.encoder_depth)]
        self.norm = LayerNorm(d)
        self.pos_embed = sincos_pos_embed(d, cfg.grid_h, cfg.grid_w)

    def embed(self, images: np.ndarray) -> TokenGrid:
        cfg = self.cfg
        patches = patchify(images, cfg.patch_size)
        if patches.shape[1:] != (cfg.num_patches, cfg.patch_size**2 * cfg.in_chans):
            raise ShapeError("embed", patches.shape, (cfg.num_patches, cfg.patch_size**2 * cfg.in_chans))
        tokens = self.patch_embed(Tensor(patches))
        return TokenGrid(tokens, cfg.grid_h, cfg.grid_w, self.pos_embed)

    def __call__(self, images: np.ndarray, masks: Sequence[PatchMask]) -> EncodedView:
        grid = self.embed(images)
        if len(masks) != grid.tokens.shape[0]:
            raise ShapeError("encode (one mask per sample)", (len(masks),), grid.tokens.shape)
        visible, _ = _stack_masks(masks, self.cfg.num_patches)
        if visible.shape[1] == 0:
            raise ValueError("no visible tokens: every patch is masked")
        x = take_rows(grid.tokens + grid.pos_embed, visible)
        for block in self.blocks:
            x = block(x)
        return EncodedView(self.norm(x), list(masks))


class Decoder(Module):
    """Cross-view decoder; mask tokens fill hidden positions before the first block."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.cfg = cfg
        self.decoder_embed = Linear(d, d, rng)
        self.mask_token = parameter(rng.normal(0.0, 0.02, size=d))
        self.blocks = [DecoderBlock(d, cfg.num_heads, cfg.mlp_ratio, rng) for _ in range(cfg.decoder_depth)]
        self.pos_embed = sincos_pos_embed(d, cfg.grid_h, cfg.grid_w)

    def fill(self, view: EncodedView) -> Tensor:
        """Full (B, N, D) token grid with mask tokens at hidden patches."""
        x = self.decoder_embed(view.features)
        b, nv, d = x.shape
        _, restore = _stack_masks(view.masks, self.cfg.num_patches)
        n_masked = self.cfg.num_patches - nv
        fill = self.mask_token.reshape(1, 1, d) * np.ones((b, n_masked, 1))
        x = take_rows(concat([x, fill], axis=1), restore)
        return x + self.pos_embed

    def __call__(self, query: EncodedView, context: EncodedView) -> DecoderOutput:
        if query.features.shape[-1] != context.features.shape[-1]:
            raise ShapeError("decode", query.features.shape, context.features.shape)
        x = self.fill(query)
        y = self.fill(context)
        layers, log = [], AttentionLog()
        for block in self.blocks:
            x = block(x, y)
            layers.append(x)
            log.self_attn.append(block.self_attn.last_weights)
            log.cross_attn.append(block.cross_attn.last_weights)
        return DecoderOutput(layers, log)


class ReconstructionHead(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.norm = LayerNorm(cfg.embed_dim)
        self.proj = Linear(cfg.embed_dim, cfg.patch_size**2 * cfg.in_chans, rng)

    def __call__(self, features: Tensor) -> Tensor:
        cfg = self.cfg
        patches = self.proj(self.norm(features))
        return unpatchify(patches, cfg.patch_size, cfg.grid_h, cfg.grid_w, cfg.in_chans)


class FusionHead(Module):
    """Merge four decoder taps into a full-resolution (d, sigma) map.

    Taps are projected to ``head_channels``; starting from the deepest one
    the path is upsampled 2x per stage and the next shallower tap is added
    at matching resolution, each stage followed by a 3x3 convolution.
    Remaining 2x stages halve the channel count before upsampling, so only
    the two narrow output convolutions run at full resolution.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        f = cfg.head_channels
        self.cfg = cfg
        self.num_up = int(np.log2(cfg.patch_size))
        self.proj = [Linear(cfg.embed_dim, f, rng) for _ in range(4)]
        self.fuse = [Conv2d(f, f, rng) for _ in range(4)]
        # levels past the last tap halve the width to keep full-resolution convs cheap
        widths = [f]
        for _ in range(max(self.num_up - 3, 0)):
            widths.append(max(widths[-1] // 2, 4))
        self.extra = [Conv2d(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        c = widths[-1]
        self.out1 = Conv2d(c, max(c // 2, 4), rng)
        self.out2 = Conv2d(max(c // 2, 4), 2, rng)

    def __call__(self, taps: Sequence[Tensor]) -> DisparityPrediction:
        if len(taps) != 4:
            raise ValueError(f"fusion head needs exactly 4 taps, got {len(taps)}")
        cfg = self.cfg
        b = taps[0].shape[0]
        grids = [
            proj(t).reshape(b, cfg.grid_h, cfg.grid_w, cfg.head_channels) for proj, t in zip(self.proj, taps)
        ]
        h = self.fuse[3](gelu(grids[3]))
        level = 0
        for k in (2, 1, 0):
            if level < self.num_up:
                h = upsample_nearest(h, 2)
                level += 1
            tap = upsample_nearest(grids[k], 2**level) if level else grids[k]
            h = self.fuse[k](gelu(h + tap))
        for conv in self.extra:
            h = upsample_nearest(conv(gelu(h)), 2)
            level += 1
        out = self.out2(gelu(self.out1(gelu(h))))
        d = out[:, :, :, 0]
        sigma = softplus(out[:, :, :, 1]) + SIGMA_FLOOR
        return DisparityPrediction(d, sigma)


class MaDisStereo(Module):
    """Student network; the teacher borrows ``decoder`` and ``fusion_head`` by reference."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.recon_head = ReconstructionHead(cfg, rng)
        self.fusion_head = FusionHead(cfg, rng)

    def shared_modules(self) -> list[Module]:
        return [self.decoder, self.fusion_head]

    def taps(self, out: DecoderOutput) -> list[Tensor]:
        return [out.layers[i - 1] for i in self.cfg.fusion_taps]

    def forward_student(
        self,
        left: np.ndarray,
        right: np.ndarray,
        left_masks: Sequence[PatchMask],
        right_masks: Sequence[PatchMask],
    ) -> StudentOutput:
        enc_l = self.encoder(left, left_masks)
        enc_r = self.encoder(right, right_masks)
        dec_l = self.decoder(enc_l, enc_r)
        dec_r = self.decoder(enc_r, enc_l)
        pred = self.fusion_head(self.taps(dec_l))
        return StudentOutput(
            prediction=pred,
            recon_left=self.recon_head(dec_l.layers[-1]),
            recon_right=self.recon_head(dec_r.layers[-1]),
            attention=dec_l.attention,
            attention_right=dec_r.attention,
        )

    def predict(self, left: np.ndarray, right: np.ndarray, encoder: Encoder | None = None) -> DisparityPrediction:
        """Unmasked disparity prediction; ``encoder`` swaps in e.g. the teacher encoder."""
        pred, _ = self._predict(left, right, encoder)
        return pred

    def _predict(self, left, right, encoder=None) -> tuple[DisparityPrediction, AttentionLog]:
        encoder = self.encoder if encoder is None else encoder
        b = np.shape(left)[0]
        empty = [PatchMask.empty(self.cfg.num_patches) for _ in range(b)]
        enc_l = encoder(left, empty)
        enc_r = encoder(right, empty)
        dec_l = self.decoder(enc_l, enc_r)
        return self.fusion_head(self.taps(dec_l)), dec_l.attention

    def forward_teacher(self, left: np.ndarray, right: np.ndarray, teacher_encoder: Encoder) -> DisparityPrediction:
        """Gradient-free prediction with the teacher encoder and the shared decoder/head."""
        with no_grad():
            return self.predict(left, right, encoder=teacher_encoder)

    def attention_maps(self, left: np.ndarray, right: np.ndarray, encoder: Encoder | None = None) -> AttentionLog:
        with no_grad():
            return self._predict(left, right, encoder)[1]

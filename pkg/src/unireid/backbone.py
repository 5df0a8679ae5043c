"""Trainable dual encoder.

The vision side is a ViT that carries two classification tokens: one routed to
text-image retrieval objectives, one to image-image identity objectives.  The
text side is a causal transformer pooled at the EOS position.  A tokenwise
linear projection per side maps both into a shared joint embedding space, so
downstream consumers (losses, inversion networks) see one consistent space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig
from .errors import ConfigError, NumericError


@dataclass
class ImageBatch:
    """A batch of images with unified identity labels and camera ids."""

    pixels: Tensor        # [B, 3, H, W] in [0, 1]
    identity: Tensor      # [B] long, unified labels
    camera: Tensor        # [B] long
    is_t2i: Tensor        # [B] bool, True if the item comes with a paired caption

    def validate(self, cfg: ModelConfig) -> None:
        b, c, h, w = self.pixels.shape
        if c != 3 or h != cfg.image_height or w != cfg.image_width:
            raise ConfigError(
                f"image batch {tuple(self.pixels.shape)} does not match configured "
                f"3x{cfg.image_height}x{cfg.image_width}"
            )
        if cfg.num_identities and bool((self.identity < 0).any() or (self.identity >= cfg.num_identities).any()):
            raise ConfigError(f"identity labels must lie in [0, {cfg.num_identities})")


@dataclass
class VisualFeatures:
    """Per-image encoder output, all in the joint space."""

    cls_t2i: Tensor       # [B, d_e]
    cls_i2i: Tensor       # [B, d_e]
    patch_tokens: Tensor  # [B, N, d_e]

    def all_tokens(self) -> Tensor:
        """Full [B, N+2, d_e] sequence in class-tokens-first order."""
        return torch.cat(
            [self.cls_t2i.unsqueeze(1), self.cls_i2i.unsqueeze(1), self.patch_tokens], dim=1
        )


@dataclass
class TextFeatures:
    """Per-caption encoder output: pooled joint embedding plus the token sequence."""

    eos: Tensor             # [B, d_e], projection of the token feature at eos_index
    token_features: Tensor  # [B, L, d_t], pre-projection
    eos_index: Tensor       # [B] long


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block (attention + MLP, residual on both)."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x: Tensor, attn_mask: Tensor | None = None,
                key_padding_mask: Tensor | None = None) -> Tensor:
        y = self.ln1(x)
        y, _ = self.attn(y, y, y, need_weights=False, attn_mask=attn_mask,
                         key_padding_mask=key_padding_mask)
        x = x + y
        x = x + self.mlp(self.ln2(x))
        return x


def _init_embedding(t: Tensor) -> None:
    nn.init.trunc_normal_(t, std=0.02)


class VisionEncoder(nn.Module):
    """ViT over image patches with one class token per retrieval task.

    The second (image-image) class token is a fresh learnable embedding with its
    own positional embedding; with ``dual_cls_tokens=False`` it is dropped and
    both tasks read the single remaining token.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.vis_width
        self.patch_embed = nn.Conv2d(3, w, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_t2i = nn.Parameter(torch.empty(w))
        self.pos_cls_t2i = nn.Parameter(torch.empty(w))
        if cfg.dual_cls_tokens:
            self.cls_i2i = nn.Parameter(torch.empty(w))
            self.pos_cls_i2i = nn.Parameter(torch.empty(w))
        self.pos_patches = nn.Parameter(torch.empty(cfg.num_patches, w))
        self.blocks = nn.ModuleList(
            TransformerBlock(w, cfg.vis_heads) for _ in range(cfg.vis_layers)
        )
        self.ln_final = nn.LayerNorm(w)
        self.joint_proj = nn.Linear(w, cfg.joint_dim, bias=False)
        for p in (self.cls_t2i, self.pos_cls_t2i, self.pos_patches):
            _init_embedding(p)
        if cfg.dual_cls_tokens:
            _init_embedding(self.cls_i2i)
            _init_embedding(self.pos_cls_i2i)

    def forward(self, pixels: Tensor) -> VisualFeatures:
        b, c, h, w = pixels.shape
        if c != 3 or h != self.cfg.image_height or w != self.cfg.image_width:
            raise ConfigError(
                f"input {tuple(pixels.shape)} does not match configured "
                f"3x{self.cfg.image_height}x{self.cfg.image_width}"
            )
        patches = self.patch_embed(pixels).flatten(2).transpose(1, 2)  # [B, N, w]
        patches = patches + self.pos_patches
        cls_list = [(self.cls_t2i + self.pos_cls_t2i).expand(b, 1, -1)]
        if self.cfg.dual_cls_tokens:
            cls_list.append((self.cls_i2i + self.pos_cls_i2i).expand(b, 1, -1))
        x = torch.cat(cls_list + [patches], dim=1)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after visual block {i}")
        x = self.ln_final(x)
        x = self.joint_proj(x)  # tokenwise projection keeps one consistent space
        n_cls = 2 if self.cfg.dual_cls_tokens else 1
        cls_t2i = x[:, 0]
        cls_i2i = x[:, 1] if self.cfg.dual_cls_tokens else cls_t2i
        return VisualFeatures(cls_t2i=cls_t2i, cls_i2i=cls_i2i, patch_tokens=x[:, n_cls:])


class TextEncoder(nn.Module):
    """Causal transformer over token ids, pooled at the EOS position."""

    def __init__(self, cfg: ModelConfig, eos_id: int):
        super().__init__()
        if cfg.vocab_size <= 0:
            raise ConfigError("vocab_size must be set before building the text encoder")
        self.cfg = cfg
        self.eos_id = eos_id
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.txt_width)
        self.pos_embed = nn.Parameter(torch.empty(cfg.max_text_len, cfg.txt_width))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.txt_width, cfg.txt_heads) for _ in range(cfg.txt_layers)
        )
        self.ln_final = nn.LayerNorm(cfg.txt_width)
        self.joint_proj = nn.Linear(cfg.txt_width, cfg.joint_dim, bias=False)
        _init_embedding(self.token_embed.weight)
        _init_embedding(self.pos_embed)

    @staticmethod
    def _causal_mask(length: int, device) -> Tensor:
        return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1)

    def _run(self, x: Tensor) -> Tensor:
        length = x.shape[1]
        if length > self.cfg.max_text_len:
            raise ConfigError(f"sequence length {length} exceeds max_text_len {self.cfg.max_text_len}")
        x = x + self.pos_embed[:length]
        mask = self._causal_mask(length, x.device)
        for block in self.blocks:
            x = block(x, attn_mask=mask)
        return self.ln_final(x)

    def forward(self, token_ids: Tensor) -> TextFeatures:
        if token_ids.ndim != 2:
            raise ValueError("token_ids must be [batch, length]")
        is_eos = token_ids == self.eos_id
        if not bool(is_eos.any(dim=1).all()):
            raise ValueError("every token sequence must contain an EOS token")
        eos_index = is_eos.float().argmax(dim=1)
        feats = self._run(self.token_embed(token_ids))
        pooled = feats[torch.arange(feats.shape[0]), eos_index]
        return TextFeatures(eos=self.joint_proj(pooled), token_features=feats, eos_index=eos_index)

    def forward_embeddings(self, embeddings: Tensor, eos_index: int) -> Tensor:
        """Encode an already-embedded [B, L, d_t] sequence; returns [B, d_e] at eos_index.

        Used for prompt sequences spliced at embedding level, which bypass the
        token lookup.
        """
        feats = self._run(embeddings)
        return self.joint_proj(feats[:, eos_index])


class DualEncoder(nn.Module):
    """Vision + text encoders with per-task identity heads and a learnable temperature.

    The image-image head follows the batch-norm-neck convention: ranking losses
    consume the raw class embedding, the identity classifier consumes the
    normalized (post-neck) one.
    """

    def __init__(self, cfg: ModelConfig, eos_id: int):
        super().__init__()
        if cfg.num_identities <= 0:
            raise ConfigError("num_identities must be set before building the model")
        self.cfg = cfg
        self.visual = VisionEncoder(cfg)
        self.text = TextEncoder(cfg, eos_id)
        self.classifier_t2i = nn.Linear(cfg.joint_dim, cfg.num_identities, bias=False)
        self.bnneck = nn.BatchNorm1d(cfg.joint_dim)
        self.classifier_i2i = nn.Linear(cfg.joint_dim, cfg.num_identities, bias=False)
        self.log_temp = nn.Parameter(torch.tensor(0.0))

    def set_temperature(self, value: float) -> None:
        with torch.no_grad():
            self.log_temp.fill_(math.log(value))

    def temperature(self) -> Tensor:
        return self.log_temp.exp()

    def encode_image(self, batch: ImageBatch | Tensor) -> VisualFeatures:
        pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
        if isinstance(batch, ImageBatch):
            batch.validate(self.cfg)
        return self.visual(pixels)

    def encode_text(self, token_ids: Tensor) -> TextFeatures:
        return self.text(token_ids)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity: scalar for two vectors, [n, m] matrix for two batches.

    Raises on zero-norm inputs rather than hiding them behind an epsilon.
    """
    a2 = a.unsqueeze(0) if a.ndim == 1 else a
    b2 = b.unsqueeze(0) if b.ndim == 1 else b
    if a2.ndim != 2 or b2.ndim != 2 or a2.shape[-1] != b2.shape[-1]:
        raise ValueError(f"incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    na = a2.norm(dim=-1)
    nb = b2.norm(dim=-1)
    if bool((na == 0).any() or (nb == 0).any()):
        raise NumericError("cosine similarity undefined for zero-norm vectors")
    sim = (a2 / na.unsqueeze(-1)) @ (b2 / nb.unsqueeze(-1)).t()
    if a.ndim == 1 and b.ndim == 1:
        return sim[0, 0]
    return sim

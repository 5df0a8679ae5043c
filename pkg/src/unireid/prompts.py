"""Hierarchical prompt machinery.

Two levels of prompt tokens feed a frozen text encoder:

* identity level: a bank of learnable token embeddings, one row of M_id tokens
  per training identity;
* instance level: K pseudo-tokens inverted from a single sample's encoder
  features by a small transformer, one network per modality.

Both are spliced at embedding level into the fixed caption template
``[BOS] a photo of [id-tokens] and [inst-tokens] person [EOS]`` (the
identity-only form drops the ``and [inst-tokens]`` block), so the template
length and EOS position are constants per prompt kind.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
import torch.nn as nn
from torch import Tensor

from .backbone import TextEncoder, TextFeatures, TransformerBlock, VisualFeatures, _init_embedding
from .config import ModelConfig
from .errors import DataError

if TYPE_CHECKING:
    from .data import Vocabulary

TEMPLATE_PREFIX = ("a", "photo", "of")
TEMPLATE_JOIN = "and"
TEMPLATE_SUFFIX = "person"


@dataclass
class PseudoPromptTokens:
    """Instance-level prompt tokens for a batch, in text token-embedding space."""

    tokens: Tensor         # [B, K, d_t]
    source_modality: str   # "visual" | "textual"


@dataclass
class PromptSequence:
    """An embedding-level prompt batch with its (constant) EOS position."""

    embeddings: Tensor  # [B, L, d_t]
    eos_index: int
    kind: str           # "full_visual" | "full_textual" | "identity_only"


class IdentityPromptBank(nn.Module):
    """Learnable identity-level prompt tokens, one [M_id, d_t] row per identity."""

    def __init__(self, num_identities: int, tokens_per_identity: int, token_dim: int):
        super().__init__()
        self.tokens = nn.Parameter(torch.empty(num_identities, tokens_per_identity, token_dim))
        _init_embedding(self.tokens)

    @property
    def num_identities(self) -> int:
        return self.tokens.shape[0]

    def forward(self, identity: Tensor) -> Tensor:
        if bool((identity < 0).any() or (identity >= self.num_identities).any()):
            raise DataError(
                f"identity label out of range [0, {self.num_identities}) in prompt bank lookup"
            )
        return self.tokens[identity]


class InversionNetwork(nn.Module):
    """Maps a variable-length feature sequence to exactly K prompt tokens.

    K learnable query tokens are prepended to the adapter-mapped input sequence,
    the whole thing runs through N_I full-attention pre-norm blocks, and the
    outputs at the query positions are the pseudo-tokens.  Fixed output arity
    for any input length comes from reading only those K positions.
    """

    def __init__(self, input_dim: int, token_dim: int, num_tokens: int,
                 layers: int, heads: int):
        super().__init__()
        self.num_tokens = num_tokens
        self.input_adapter = nn.Linear(input_dim, token_dim)
        self.query_tokens = nn.Parameter(torch.empty(num_tokens, token_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(token_dim, heads) for _ in range(layers)
        )
        self.ln_out = nn.LayerNorm(token_dim)
        _init_embedding(self.query_tokens)

    def forward(self, features: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        """features: [B, S, input_dim]; mask True where the position is padding."""
        b = features.shape[0]
        x = self.input_adapter(features)
        queries = self.query_tokens.expand(b, -1, -1)
        x = torch.cat([queries, x], dim=1)
        if key_padding_mask is not None:
            keep = torch.zeros(b, self.num_tokens, dtype=torch.bool, device=features.device)
            key_padding_mask = torch.cat([keep, key_padding_mask], dim=1)
        for block in self.blocks:
            x = block(x, key_padding_mask=key_padding_mask)
        return self.ln_out(x[:, : self.num_tokens])


class PromptModules(nn.Module):
    """Bank + the two inversion networks + the frozen prompt encoder.

    The frozen encoder is an architecture clone of the trainable text encoder,
    captured at construction time and never updated; gradients still flow
    through it to spliced prompt tokens.
    """

    def __init__(self, cfg: ModelConfig, text_encoder: TextEncoder):
        super().__init__()
        self.cfg = cfg
        self.bank = IdentityPromptBank(
            cfg.num_identities, cfg.id_tokens_per_identity, cfg.txt_width
        )
        self.inv_visual = InversionNetwork(
            cfg.joint_dim, cfg.txt_width, cfg.inst_tokens, cfg.inversion_layers, cfg.txt_heads
        )
        self.inv_textual = InversionNetwork(
            cfg.txt_width, cfg.txt_width, cfg.inst_tokens, cfg.inversion_layers, cfg.txt_heads
        )
        self.frozen_text = copy.deepcopy(text_encoder)
        self.frozen_text.requires_grad_(False)
        self.frozen_text.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self.frozen_text.eval()  # the frozen clone never leaves eval mode
        return self

    def invert_visual(self, feats: VisualFeatures) -> PseudoPromptTokens:
        return PseudoPromptTokens(self.inv_visual(feats.all_tokens()), "visual")

    def invert_textual(self, feats: TextFeatures) -> PseudoPromptTokens:
        # positions strictly after EOS are padding and must not leak into the
        # pseudo-tokens, otherwise identical captions would invert differently
        # depending on how their batch was padded
        length = feats.token_features.shape[1]
        positions = torch.arange(length, device=feats.token_features.device)
        pad = positions.unsqueeze(0) > feats.eos_index.unsqueeze(1)
        return PseudoPromptTokens(self.inv_textual(feats.token_features, pad), "textual")


class PromptBuilder:
    """Assembles template prompts at embedding level for a frozen encoder.

    Word positions carry the frozen encoder's ordinary vocabulary embeddings;
    the id-token and inst-token slots are filled from the bank and from
    inversion outputs.  Template shape is fixed, so each prompt kind has a
    constant length and EOS position.
    """

    def __init__(self, modules: PromptModules, vocab: "Vocabulary"):
        self.modules = modules
        cfg = modules.cfg
        self.num_id_tokens = cfg.id_tokens_per_identity
        self.num_inst_tokens = cfg.inst_tokens
        embed = modules.frozen_text.token_embed
        with torch.no_grad():
            self._bos = embed.weight[vocab.bos_id].clone()
            self._eos = embed.weight[vocab.eos_id].clone()
            self._prefix = torch.stack(
                [embed.weight[vocab.id_of(wd)] for wd in TEMPLATE_PREFIX]
            ).clone()
            self._join = embed.weight[vocab.id_of(TEMPLATE_JOIN)].clone()
            self._suffix = embed.weight[vocab.id_of(TEMPLATE_SUFFIX)].clone()
        self.full_length = self.num_id_tokens + self.num_inst_tokens + 7
        self.identity_only_length = self.num_id_tokens + 6

    def _as_batch(self, identity: Tensor | int) -> Tensor:
        if isinstance(identity, int):
            identity = torch.tensor([identity])
        if identity.ndim != 1:
            raise ValueError("identity must be a scalar or a 1-d label tensor")
        return identity

    def assemble(self, identity: Tensor | int,
                 inst: PseudoPromptTokens | None = None) -> PromptSequence:
        identity = self._as_batch(identity)
        b = identity.shape[0]
        id_block = self.modules.bank(identity)  # [B, M_id, d_t]
        parts = [
            self._bos.expand(b, 1, -1),
            self._prefix.expand(b, -1, -1),
            id_block,
        ]
        if inst is None:
            kind = "identity_only"
        else:
            if inst.tokens.shape[0] != b:
                raise ValueError(
                    f"{inst.tokens.shape[0]} instance-token rows for {b} identities"
                )
            parts += [self._join.expand(b, 1, -1), inst.tokens]
            kind = f"full_{inst.source_modality}"
        parts += [self._suffix.expand(b, 1, -1), self._eos.expand(b, 1, -1)]
        embeddings = torch.cat(parts, dim=1)
        return PromptSequence(embeddings, eos_index=embeddings.shape[1] - 1, kind=kind)

    def encode(self, seq: PromptSequence) -> Tensor:
        """Frozen-encoder embedding of the prompt batch, [B, d_e]."""
        return self.modules.frozen_text.forward_embeddings(seq.embeddings, seq.eos_index)

    def encode_identity(self, identity: Tensor | int) -> Tensor:
        return self.encode(self.assemble(identity))

    def all_identity_embeddings(self) -> Tensor:
        """Embeddings of every identity-only prompt, [N_id, d_e]."""
        ids = torch.arange(self.modules.bank.num_identities)
        return self.encode_identity(ids)

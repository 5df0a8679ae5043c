"""Training objectives.

Batch layout convention: a joint batch holds caption-paired samples and
PK-structured image-only samples side by side.  Losses that only apply to the
caption-paired subset receive full-batch visual tensors together with a
:class:`BatchViews` and slice internally, so feeding them an out-of-subset
sample cannot change their value.  Text-side tensors only exist for the paired
subset and arrive already restricted.

Distance losses (inversion consistency, prompt alignment, prompt
regularization) are pure squared-L2 forms; whatever normalization the caller
wants happens before the call.  Cosine-based losses normalize internally.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, DataError

EPS = 1e-8


@dataclass
class BatchViews:
    """Index bookkeeping for a joint batch."""

    labels: Tensor    # [B] long, unified identity labels
    cameras: Tensor   # [B] long
    t2i_mask: Tensor  # [B] bool, True where the sample has a paired caption

    def __post_init__(self):
        if not (self.labels.shape == self.cameras.shape == self.t2i_mask.shape):
            raise ConfigError("labels, cameras and t2i_mask must share one batch shape")

    @property
    def batch_size(self) -> int:
        return self.labels.shape[0]

    @property
    def t2i_indices(self) -> Tensor:
        return self.t2i_mask.nonzero(as_tuple=True)[0]

    @property
    def i2i_indices(self) -> Tensor:
        return (~self.t2i_mask).nonzero(as_tuple=True)[0]

    @property
    def num_t2i(self) -> int:
        return int(self.t2i_mask.sum())


def _normalize(x: Tensor) -> Tensor:
    return F.normalize(x, dim=-1, eps=EPS)


def sdm_loss(img: Tensor, txt: Tensor, labels: Tensor, temperature: Tensor | float,
             eps: float = EPS) -> Tensor:
    """Similarity distribution matching between paired image and text embeddings.

    The temperature-softmaxed cross-modal cosine similarities are matched, via
    KL divergence, against the normalized label-match distribution; the two
    directions (image-to-text and text-to-image) are averaged.  The target is
    smoothed by renormalizing ``(q + eps)`` so it stays a true distribution and
    the divergence stays exactly nonnegative.
    """
    if img.shape[0] < 2:
        raise DataError("sdm_loss needs at least 2 paired samples")
    if img.shape != txt.shape:
        raise ConfigError(f"image {tuple(img.shape)} vs text {tuple(txt.shape)} shape mismatch")
    sim = _normalize(img) @ _normalize(txt).t() / temperature
    match = (labels.unsqueeze(0) == labels.unsqueeze(1)).to(img.dtype)
    # the match relation is symmetric and rows are aligned pairs, so one
    # row-normalized target serves both directions
    q = match / match.sum(dim=1, keepdim=True)
    q = (q + eps) / (q + eps).sum(dim=1, keepdim=True)

    def _kl(logits: Tensor, target: Tensor) -> Tensor:
        log_p = F.log_softmax(logits, dim=1)
        return (log_p.exp() * (log_p - target.log())).sum(dim=1).mean()

    return 0.5 * (_kl(sim, q) + _kl(sim.t(), q))


def id_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean cross-entropy over identity logits."""
    if bool((labels < 0).any() or (labels >= logits.shape[1]).any()):
        raise DataError(f"identity label out of range [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def triplet_loss(features: Tensor, labels: Tensor, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss with margin, Euclidean on L2-normalized features.

    Every anchor must see at least one positive and one negative, which the PK
    sampler guarantees; anything else is rejected.
    """
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    pos_mask = same & ~torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    if not bool(pos_mask.any(dim=1).all()) or not bool((~same).any(dim=1).all()):
        raise DataError("triplet batch must give every anchor a positive and a negative")
    f = _normalize(features)
    dist = torch.cdist(f, f)
    hardest_pos = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(same, float("inf")).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + margin).mean()


def prompt_contrastive(img: Tensor, id_prompts: Tensor,
                       temperature: Tensor | float = 0.07) -> tuple[Tensor, Tensor]:
    """Contrastive alignment between images and their identity-prompt embeddings.

    ``id_prompts`` holds one reference embedding per sample (row i is the prompt
    of sample i's identity).  The first loss normalizes over images for a fixed
    prompt, the second over prompts for a fixed image; both numerators use the
    matching position only.  ``temperature=1`` gives the plain cosine form.
    """
    if img.shape != id_prompts.shape:
        raise ConfigError(
            f"images {tuple(img.shape)} vs prompts {tuple(id_prompts.shape)} shape mismatch"
        )
    sim = _normalize(id_prompts) @ _normalize(img).t() / temperature  # [prompt i, image j]
    target = torch.arange(sim.shape[0], device=sim.device)
    l_t2i = F.cross_entropy(sim, target)
    l_i2t = F.cross_entropy(sim.t(), target)
    return l_t2i, l_i2t


def inversion_consistency(vis_prompt_emb: Tensor, cls_t2i: Tensor,
                          txt_prompt_emb: Tensor, txt_eos: Tensor,
                          views: BatchViews) -> Tensor:
    """Squared-L2 consistency between inverted-prompt embeddings and encoder features.

    The visual term (vision-derived prompt vs the image's T2I class embedding)
    averages over the whole batch; the textual term (text-derived prompt vs the
    caption's EOS embedding) averages over the caption-paired subset only.  An
    all-image batch contributes a zero textual term.
    """
    if vis_prompt_emb.shape[0] != views.batch_size:
        raise ConfigError("visual tensors must cover the full batch")
    if txt_prompt_emb.shape[0] != views.num_t2i:
        raise ConfigError("textual tensors must cover exactly the caption-paired subset")
    loss = (vis_prompt_emb - cls_t2i).pow(2).sum(dim=1).mean()
    if views.num_t2i > 0:
        loss = loss + (txt_prompt_emb - txt_eos).pow(2).sum(dim=1).mean()
    return loss


def ilpa_loss(txt_prompt_emb: Tensor, cls_t2i: Tensor,
              vis_prompt_emb: Tensor, txt_eos: Tensor,
              views: BatchViews) -> Tensor:
    """Instance-level prompt alignment over the caption-paired subset.

    Cross pairing: the text-derived prompt embedding targets the image's T2I
    class embedding, and the vision-derived prompt embedding targets the
    caption's EOS embedding.  Visual tensors arrive full-batch and are sliced
    here; an empty subset yields 0.
    """
    if cls_t2i.shape[0] != views.batch_size or vis_prompt_emb.shape[0] != views.batch_size:
        raise ConfigError("visual tensors must cover the full batch")
    if txt_prompt_emb.shape[0] != views.num_t2i or txt_eos.shape[0] != views.num_t2i:
        raise ConfigError("textual tensors must cover exactly the caption-paired subset")
    if views.num_t2i == 0:
        return vis_prompt_emb.new_zeros(())
    idx = views.t2i_indices
    tgps = (txt_prompt_emb - cls_t2i[idx]).pow(2).sum(dim=1).mean()
    vgps = (vis_prompt_emb[idx] - txt_eos).pow(2).sum(dim=1).mean()
    return tgps + vgps


def cic_loss(cls_i2i: Tensor, id_prompt_embs: Tensor, labels: Tensor,
             temperature: Tensor | float = 0.07) -> Tensor:
    """Identity classification of I2I class embeddings against every identity prompt.

    Logits are temperature-scaled cosine similarities to all identity-prompt
    embeddings, so the denominator always runs over the full identity set, not
    just the identities present in the batch.  Mean-reduced; the per-batch sum
    form is this value times the batch size.
    """
    if bool((labels < 0).any() or (labels >= id_prompt_embs.shape[0]).any()):
        raise ConfigError(
            f"labels exceed the {id_prompt_embs.shape[0]} available identity prompts"
        )
    sim = _normalize(cls_i2i) @ _normalize(id_prompt_embs).t() / temperature
    return F.cross_entropy(sim, labels)


def cmpr_loss(p_t: Tensor, p_v: Tensor, views: BatchViews) -> Tensor:
    """Mean squared Frobenius distance between text- and vision-derived prompt tokens.

    ``p_v`` arrives full-batch [B, K, d] and is sliced to the caption-paired
    subset; ``p_t`` arrives already restricted [B_t2i, K, d].
    """
    if p_v.shape[0] != views.batch_size:
        raise ConfigError("vision-derived tokens must cover the full batch")
    if p_t.shape[0] != views.num_t2i:
        raise ConfigError("text-derived tokens must cover exactly the caption-paired subset")
    if p_t.shape[1:] != p_v.shape[1:]:
        raise ConfigError(
            f"token matrices {tuple(p_t.shape[1:])} vs {tuple(p_v.shape[1:])} shape mismatch"
        )
    if views.num_t2i == 0:
        return p_v.new_zeros(())
    diff = p_t - p_v[views.t2i_indices]
    return diff.pow(2).sum(dim=(1, 2)).mean()


@dataclass
class StageOneParts:
    l_t2i: Tensor
    l_i2t: Tensor
    l_ic: Tensor


@dataclass
class StageTwoParts:
    l_sdm: Tensor
    l_id_t2i: Tensor
    l_tri: Tensor
    l_id_i2i: Tensor
    l_cic: Tensor
    l_ilpa: Tensor
    l_cmpr: Tensor


def stage1_objective(parts: StageOneParts) -> Tensor:
    """Prompt-learning objective: both contrastive directions plus inversion consistency."""
    return parts.l_t2i + parts.l_i2t + parts.l_ic


def stage2_objective(parts: StageTwoParts, w) -> Tensor:
    """Full objective: base retrieval suite + prompt-guided terms.

    base = sdm + id_t2i + triplet + id_i2i; the prompt terms add cic unweighted
    and the alignment/regularization terms under their weights.
    """
    base = parts.l_sdm + parts.l_id_t2i + parts.l_tri + parts.l_id_i2i
    return base + parts.l_cic + w.lambda1 * parts.l_ilpa + w.lambda2 * parts.l_cmpr

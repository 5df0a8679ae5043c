"""Two-stage optimization with a strict freezing schedule.

Stage 1 trains only the prompt machinery (identity bank + both inversion
networks) against frozen encoders.  Stage 2 freezes the prompt machinery and
trains the encoders, heads, necks and temperature; gradients still flow
*through* the frozen inverters and the frozen prompt encoder so prompt-guided
losses can shape the encoders.  Each stage audits its trainable-parameter set
on entry and verifies frozen tensors bitwise on exit.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .backbone import DualEncoder
from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint, torch_rng_from_str
from .config import RunConfig, StageConfig, compat_hash, config_to_dict, derive_seed
from .data import (IdentityMap, JointBatch, JointSampler, ManifestDataset, Vocabulary,
                   build_vocabulary, load_manifest, unify_identities)
from .errors import ConfigError
from .evaluator import RetrievalResult, evaluate_i2i, evaluate_t2i
from .losses import (StageOneParts, StageTwoParts, cic_loss, cmpr_loss, id_loss, ilpa_loss,
                     inversion_consistency, prompt_contrastive, sdm_loss, stage1_objective,
                     stage2_objective, triplet_loss)
from .prompts import PromptBuilder, PromptModules


@dataclass
class TrainingContext:
    cfg: RunConfig
    model: DualEncoder
    prompts: PromptModules
    builder: PromptBuilder
    vocab: Vocabulary
    id_map: IdentityMap
    t2i_data: ManifestDataset
    i2i_data: ManifestDataset
    sampler: JointSampler


@dataclass
class StageResult:
    checkpoint: Path
    epoch_rows: list[dict]
    step_losses: list[float] = field(default_factory=list)


def build_training(cfg: RunConfig) -> TrainingContext:
    """Load data, build vocabulary and identity map, and construct all modules.

    Model construction is seeded from the root seed, so two builds from one
    config are parameter-identical.
    """
    cfg.validate()
    cfg.model.dual_cls_tokens = cfg.ablation.enable_trt
    t2i_man = load_manifest(cfg.data.t2i_manifest_path())
    i2i_man = load_manifest(cfg.data.i2i_manifest_path())
    id_map = unify_identities([t2i_man, i2i_man])
    captions = [c for e in t2i_man.entries_in("train") for c in e.captions]
    vocab = build_vocabulary(captions)
    if cfg.model.vocab_size == 0:
        cfg.model.vocab_size = vocab.size
    elif cfg.model.vocab_size < vocab.size:
        raise ConfigError(f"vocab_size={cfg.model.vocab_size} smaller than the "
                          f"{vocab.size} words the training captions need")
    if cfg.model.num_identities == 0:
        cfg.model.num_identities = id_map.num_train_identities
    elif cfg.model.num_identities != id_map.num_train_identities:
        raise ConfigError(f"num_identities={cfg.model.num_identities} but the unified "
                          f"training set has {id_map.num_train_identities}")
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = DualEncoder(cfg.model, vocab.eos_id)
    model.set_temperature(cfg.loss.temperature)
    prompts = PromptModules(cfg.model, model.text)
    builder = PromptBuilder(prompts, vocab)
    t2i_data = ManifestDataset(t2i_man, id_map)
    i2i_data = ManifestDataset(i2i_man, id_map)
    sampler = JointSampler(
        t2i_data, i2i_data,
        t2i_batch=cfg.data.t2i_batch, i2i_batch=cfg.data.i2i_batch,
        instances_per_identity=cfg.data.instances_per_identity,
        vocab=vocab, max_text_len=cfg.model.max_text_len,
        rng=np.random.default_rng(derive_seed(cfg.seed, "sampler")),
    )
    return TrainingContext(cfg, model, prompts, builder, vocab, id_map,
                           t2i_data, i2i_data, sampler)


# ---------------------------------------------------------------- schedules


def lr_at(scfg: StageConfig, epoch: int, step_in_epoch: int, steps_per_epoch: int,
          base_lr: float | None = None) -> float:
    """Pure learning-rate schedule.

    Stage 1: per-epoch exponential decay of the group's base rate.  Stage 2:
    linear warmup from warmup_lr_start to lr_peak over warmup_epochs, then
    cosine annealing to lr_floor at the final epoch.
    """
    if scfg.stage == 1:
        if base_lr is None:
            raise ConfigError("stage 1 schedule needs the group's base rate")
        return base_lr * scfg.lr_decay_per_epoch ** epoch
    e = epoch + step_in_epoch / steps_per_epoch
    if e < scfg.warmup_epochs:
        frac = e / scfg.warmup_epochs
        return scfg.warmup_lr_start + frac * (scfg.lr_peak - scfg.warmup_lr_start)
    t = (e - scfg.warmup_epochs) / (scfg.epochs - scfg.warmup_epochs)
    return scfg.lr_floor + 0.5 * (scfg.lr_peak - scfg.lr_floor) * (1.0 + math.cos(math.pi * t))


# ------------------------------------------------------- freezing machinery


def apply_stage1_freeze(model: DualEncoder, prompts: PromptModules) -> None:
    model.requires_grad_(False)
    prompts.requires_grad_(True)
    prompts.frozen_text.requires_grad_(False)


def apply_stage2_freeze(model: DualEncoder, prompts: PromptModules,
                        temperature_learnable: bool) -> None:
    model.requires_grad_(True)
    model.log_temp.requires_grad_(temperature_learnable)
    prompts.requires_grad_(False)


def _named_params(model: DualEncoder, prompts: PromptModules):
    for n, p in model.named_parameters():
        yield "model." + n, p
    for n, p in prompts.named_parameters():
        yield "prompts." + n, p


def expected_trainable(stage: int, model: DualEncoder, prompts: PromptModules,
                       temperature_learnable: bool = True) -> set[str]:
    if stage == 1:
        return {"prompts." + n for n, _ in prompts.named_parameters()
                if n.startswith(("bank.", "inv_visual.", "inv_textual."))}
    names = {"model." + n for n, _ in model.named_parameters()}
    if not temperature_learnable:
        names.discard("model.log_temp")
    return names


def audit_freezing(stage: int, model: DualEncoder, prompts: PromptModules,
                   temperature_learnable: bool = True) -> None:
    actual = {n for n, p in _named_params(model, prompts) if p.requires_grad}
    expected = expected_trainable(stage, model, prompts, temperature_learnable)
    if actual != expected:
        extra = sorted(actual - expected)
        missing = sorted(expected - actual)
        raise AssertionError(
            f"stage {stage} trainable set is wrong; unexpectedly trainable: {extra}; "
            f"unexpectedly frozen: {missing}"
        )


def _assert_no_frozen_grads(model: DualEncoder, prompts: PromptModules) -> None:
    for name, p in _named_params(model, prompts):
        if not p.requires_grad and p.grad is not None and bool((p.grad != 0).any()):
            raise AssertionError(f"frozen parameter {name} received gradient")


def _snapshot_frozen(model: DualEncoder, prompts: PromptModules) -> dict[str, Tensor]:
    return {n: p.detach().clone() for n, p in _named_params(model, prompts)
            if not p.requires_grad}


def _assert_frozen_unchanged(before: dict[str, Tensor], model: DualEncoder,
                             prompts: PromptModules) -> None:
    now = dict(_named_params(model, prompts))
    for name, old in before.items():
        if not torch.equal(old, now[name].detach()):
            raise AssertionError(f"frozen parameter {name} changed during the stage")


# ------------------------------------------------------------- optimizers


def _norm_param_ids(*modules) -> set[int]:
    ids = set()
    for module in modules:
        for sub in module.modules():
            if isinstance(sub, (torch.nn.LayerNorm, torch.nn.BatchNorm1d)):
                ids.update(id(p) for p in sub.parameters(recurse=False))
    return ids


def _no_decay(name: str, p: Tensor, norm_ids: set[int]) -> bool:
    return (id(p) in norm_ids or name.endswith(("bank.tokens", "query_tokens", "log_temp")))


def build_stage1_optimizer(prompts: PromptModules, scfg: StageConfig) -> torch.optim.Adam:
    norm_ids = _norm_param_ids(prompts)
    groups: dict[tuple[float, float], dict] = {}
    for name, p in prompts.named_parameters():
        if not p.requires_grad:
            continue
        base = scfg.lr_prompts if name.startswith("bank.") else scfg.lr_inversion
        wd = 0.0 if _no_decay(name, p, norm_ids) else scfg.weight_decay
        g = groups.setdefault((base, wd), {"params": [], "names": [], "lr": base,
                                           "base_lr": base, "weight_decay": wd})
        g["params"].append(p)
        g["names"].append("prompts." + name)
    return torch.optim.Adam(list(groups.values()), betas=(0.9, 0.999))


def build_stage2_optimizer(model: DualEncoder, scfg: StageConfig) -> torch.optim.Adam:
    norm_ids = _norm_param_ids(model)
    decay = {"params": [], "names": [], "lr": scfg.warmup_lr_start,
             "base_lr": scfg.lr_peak, "weight_decay": scfg.weight_decay}
    nodecay = {"params": [], "names": [], "lr": scfg.warmup_lr_start,
               "base_lr": scfg.lr_peak, "weight_decay": 0.0}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        g = nodecay if _no_decay(name, p, norm_ids) else decay
        g["params"].append(p)
        g["names"].append("model." + name)
    return torch.optim.Adam([g for g in (decay, nodecay) if g["params"]],
                            betas=(0.9, 0.999))


def _set_group_lrs(optimizer, scfg: StageConfig, epoch: int, step: int,
                   steps_per_epoch: int) -> float:
    last = 0.0
    for g in optimizer.param_groups:
        g["lr"] = lr_at(scfg, epoch, step, steps_per_epoch, base_lr=g["base_lr"])
        last = g["lr"]
    return last


def _clip(optimizer, max_norm: float) -> None:
    params = [p for g in optimizer.param_groups for p in g["params"]]
    torch.nn.utils.clip_grad_norm_(params, max_norm)


def optimizer_payload(optimizer) -> tuple[dict, dict[str, Tensor]]:
    """Serialize Adam state keyed by parameter name."""
    payload = {"groups": [], "steps": {}}
    tensors: dict[str, Tensor] = {}
    for g in optimizer.param_groups:
        payload["groups"].append({"names": g["names"], "lr": g["lr"],
                                  "base_lr": g["base_lr"],
                                  "weight_decay": g["weight_decay"]})
        for name, p in zip(g["names"], g["params"]):
            state = optimizer.state.get(p)
            if not state:
                continue
            payload["steps"][name] = float(state["step"])
            tensors[f"optim.{name}.exp_avg"] = state["exp_avg"]
            tensors[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"]
    return payload, tensors


def restore_optimizer(optimizer, payload: dict, tensors: dict[str, Tensor]) -> None:
    if len(payload["groups"]) != len(optimizer.param_groups):
        raise ConfigError("checkpoint optimizer has a different group structure")
    for g, saved in zip(optimizer.param_groups, payload["groups"]):
        if g["names"] != saved["names"]:
            raise ConfigError("checkpoint optimizer covers different parameters")
        g["lr"] = saved["lr"]
        g["base_lr"] = saved["base_lr"]
        g["weight_decay"] = saved["weight_decay"]
        for name, p in zip(g["names"], g["params"]):
            if name in payload["steps"]:
                optimizer.state[p] = {
                    "step": torch.tensor(payload["steps"][name]),
                    "exp_avg": tensors[f"optim.{name}.exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"].clone(),
                }


# ------------------------------------------------------------ step logic


@dataclass
class StepFeatures:
    """Everything the stage-2 losses consume, full-batch on the visual side."""

    cls_t2i: Tensor            # [B, d_e]
    cls_i2i: Tensor            # [B, d_e]
    txt_eos: Tensor            # [B_t2i, d_e]
    p_v: Tensor | None = None       # [B, K, d_t] vision-derived pseudo-tokens
    p_t: Tensor | None = None       # [B_t2i, K, d_t]
    emb_v: Tensor | None = None     # [B, d_e] full-prompt embeddings (visual inst)
    emb_t: Tensor | None = None     # [B_t2i, d_e]


def _prompt_features(ctx: TrainingContext, vis, txt, labels: Tensor,
                     t2i_idx: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    p_v = ctx.prompts.invert_visual(vis)
    p_t = ctx.prompts.invert_textual(txt)
    emb_v = ctx.builder.encode(ctx.builder.assemble(labels, p_v))
    emb_t = ctx.builder.encode(ctx.builder.assemble(labels[t2i_idx], p_t))
    return p_v.tokens, p_t.tokens, emb_v, emb_t


def stage1_step(ctx: TrainingContext, batch: JointBatch) -> tuple[Tensor, StageOneParts]:
    with torch.no_grad():  # encoders are frozen inputs in this stage
        vis = ctx.model.encode_image(batch.images)
        txt = ctx.model.encode_text(batch.token_ids)
    views = batch.views
    p_v, p_t, emb_v, emb_t = _prompt_features(ctx, vis, txt, views.labels, views.t2i_indices)
    id_embs = ctx.builder.encode_identity(views.labels)
    temperature = ctx.model.temperature()
    l_t2i, l_i2t = prompt_contrastive(vis.cls_t2i, id_embs, temperature)
    l_ic = inversion_consistency(
        F.normalize(emb_v, dim=-1), F.normalize(vis.cls_t2i, dim=-1),
        F.normalize(emb_t, dim=-1), F.normalize(txt.eos, dim=-1), views,
    )
    parts = StageOneParts(l_t2i=l_t2i, l_i2t=l_i2t, l_ic=l_ic)
    return stage1_objective(parts), parts


def stage2_features(ctx: TrainingContext, batch: JointBatch) -> StepFeatures:
    vis = ctx.model.encode_image(batch.images)
    txt = ctx.model.encode_text(batch.token_ids)
    feats = StepFeatures(cls_t2i=vis.cls_t2i, cls_i2i=vis.cls_i2i, txt_eos=txt.eos)
    if ctx.cfg.ablation.enable_hpl:
        feats.p_v, feats.p_t, feats.emb_v, feats.emb_t = _prompt_features(
            ctx, vis, txt, batch.views.labels, batch.views.t2i_indices)
    return feats


def stage2_loss_terms(model: DualEncoder, feats: StepFeatures, views, weights,
                      ablation, id_prompt_embs: Tensor | None) -> StageTwoParts:
    """Assemble every stage-2 loss term from precomputed features.

    Pure given its inputs, so tests can probe the slicing discipline directly.
    """
    t_idx = views.t2i_indices
    labels_t = views.labels[t_idx]
    temperature = model.temperature()
    l_sdm = sdm_loss(feats.cls_t2i[t_idx], feats.txt_eos, labels_t, temperature)
    logits_img = model.classifier_t2i(feats.cls_t2i[t_idx])
    logits_txt = model.classifier_t2i(feats.txt_eos)
    l_id_t2i = 0.5 * (id_loss(logits_img, labels_t) + id_loss(logits_txt, labels_t))
    neck = model.bnneck(feats.cls_i2i)
    l_id_i2i = id_loss(model.classifier_i2i(neck), views.labels)
    i_idx = views.i2i_indices
    l_tri = triplet_loss(feats.cls_i2i[i_idx], views.labels[i_idx], weights.triplet_margin)
    zero = feats.cls_t2i.new_zeros(())
    l_cic = l_ilpa = l_cmpr = zero
    if ablation.enable_hpl:
        if id_prompt_embs is None:
            raise ConfigError("prompt-guided losses need the precomputed identity embeddings")
        l_cic = cic_loss(feats.cls_i2i, id_prompt_embs, views.labels, temperature)
        l_ilpa = ilpa_loss(
            F.normalize(feats.emb_t, dim=-1), F.normalize(feats.cls_t2i, dim=-1),
            F.normalize(feats.emb_v, dim=-1), F.normalize(feats.txt_eos, dim=-1), views,
        )
        if ablation.enable_cmpr:
            l_cmpr = cmpr_loss(F.normalize(feats.p_t, dim=-1),
                               F.normalize(feats.p_v, dim=-1), views)
    return StageTwoParts(l_sdm=l_sdm, l_id_t2i=l_id_t2i, l_tri=l_tri, l_id_i2i=l_id_i2i,
                         l_cic=l_cic, l_ilpa=l_ilpa, l_cmpr=l_cmpr)


# ---------------------------------------------------------- stage runners


def _steps_per_epoch(ctx: TrainingContext, scfg: StageConfig) -> int:
    if scfg.steps_per_epoch:
        return scfg.steps_per_epoch
    return max(1, math.ceil(len(ctx.sampler.t2i_train) / ctx.cfg.data.t2i_batch))


def _parts_dict(parts) -> dict[str, float]:
    return {k: float(v.detach()) for k, v in vars(parts).items()}


def write_metrics_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _gather_tensors(ctx: TrainingContext) -> dict[str, Tensor]:
    out = {"model." + k: v for k, v in ctx.model.state_dict().items()}
    out.update({"prompts." + k: v for k, v in ctx.prompts.state_dict().items()})
    return out


def _save(ctx: TrainingContext, path: Path, *, stage: int, epoch: int, global_step: int,
          optimizer, history: list[dict]) -> Path:
    tensors = _gather_tensors(ctx)
    opt_payload = None
    if optimizer is not None:
        opt_payload, opt_tensors = optimizer_payload(optimizer)
        tensors.update(opt_tensors)
    id_map_payload = {
        "labels": [[ns, raw, label] for (ns, raw), label in sorted(ctx.id_map.label_of.items())],
        "num_train_identities": ctx.id_map.num_train_identities,
    }
    return save_checkpoint(
        path, config=config_to_dict(ctx.cfg), config_hash=compat_hash(ctx.cfg),
        stage=stage, epoch=epoch, global_step=global_step, tensors=tensors,
        optimizer=opt_payload, sampler_rng_state=ctx.sampler.rng.bit_generator.state,
        vocab=ctx.vocab.word_to_id, id_map=id_map_payload, metric_history=history,
    )


def restore_modules(ctx: TrainingContext, ckpt: CheckpointData) -> None:
    model_state = {k.removeprefix("model."): v for k, v in ckpt.tensors.items()
                   if k.startswith("model.")}
    prompt_state = {k.removeprefix("prompts."): v for k, v in ckpt.tensors.items()
                    if k.startswith("prompts.")}
    ctx.model.load_state_dict(model_state)
    ctx.prompts.load_state_dict(prompt_state)
    # the builder caches template embeddings from the frozen encoder
    ctx.builder = PromptBuilder(ctx.prompts, ctx.vocab)


def _restore_rng(ctx: TrainingContext, ckpt: CheckpointData) -> None:
    ctx.sampler.rng.bit_generator.state = ckpt.rng["sampler"]
    torch.set_rng_state(torch_rng_from_str(ckpt.rng["torch"]))


def run_stage1(ctx: TrainingContext, out_dir: str | Path) -> StageResult:
    cfg = ctx.cfg
    if not cfg.ablation.enable_hpl:
        raise ConfigError("stage 1 trains the prompt machinery; enable_hpl is off")
    scfg = cfg.stage1
    out_dir = Path(out_dir)
    ctx.model.zero_grad(set_to_none=True)
    ctx.prompts.zero_grad(set_to_none=True)
    apply_stage1_freeze(ctx.model, ctx.prompts)
    audit_freezing(1, ctx.model, ctx.prompts)
    frozen_before = _snapshot_frozen(ctx.model, ctx.prompts)
    optimizer = build_stage1_optimizer(ctx.prompts, scfg)
    steps = _steps_per_epoch(ctx, scfg)
    result = StageResult(checkpoint=out_dir / "stage1_final", epoch_rows=[])
    global_step = 0
    for epoch in range(scfg.epochs):
        tick = time.perf_counter()
        sums: dict[str, float] = {}
        lr = 0.0
        for step in range(steps):
            lr = _set_group_lrs(optimizer, scfg, epoch, step, steps)
            batch = ctx.sampler.sample()
            total, parts = stage1_step(ctx, batch)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            _assert_no_frozen_grads(ctx.model, ctx.prompts)
            _clip(optimizer, scfg.grad_clip_norm)
            optimizer.step()
            global_step += 1
            result.step_losses.append(float(total.detach()))
            for k, v in _parts_dict(parts).items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"stage": 1, "epoch": epoch, "steps": steps,
               **{k: v / steps for k, v in sums.items()},
               "lr": lr, "wall_time_s": round(time.perf_counter() - tick, 3)}
        result.epoch_rows.append(row)
        write_metrics_csv(out_dir / "stage1_metrics.csv", result.epoch_rows)
    _assert_frozen_unchanged(frozen_before, ctx.model, ctx.prompts)
    _save(ctx, result.checkpoint, stage=1, epoch=scfg.epochs, global_step=global_step,
          optimizer=optimizer, history=result.epoch_rows)
    return result


def run_stage2(ctx: TrainingContext, out_dir: str | Path,
               stage1_checkpoint: str | Path | None = None,
               resume_from: str | Path | None = None) -> StageResult:
    cfg = ctx.cfg
    scfg = cfg.stage2
    out_dir = Path(out_dir)
    use_prompts = cfg.ablation.enable_hpl
    if use_prompts and resume_from is None:
        if stage1_checkpoint is None:
            raise ConfigError("stage 2 needs the stage-1 checkpoint when prompt "
                              "learning is enabled")
        ckpt = load_checkpoint(stage1_checkpoint, expect_config_hash=compat_hash(cfg))
        if ckpt.stage != 1:
            raise ConfigError(f"{stage1_checkpoint} holds a stage-{ckpt.stage} state")
        restore_modules(ctx, ckpt)
    # a fresh named substream makes in-process and from-checkpoint stage starts identical
    ctx.sampler.rng = np.random.default_rng(derive_seed(cfg.seed, "sampler:stage2"))
    ctx.model.zero_grad(set_to_none=True)
    ctx.prompts.zero_grad(set_to_none=True)
    apply_stage2_freeze(ctx.model, ctx.prompts, cfg.loss.temperature_learnable)
    audit_freezing(2, ctx.model, ctx.prompts, cfg.loss.temperature_learnable)
    optimizer = build_stage2_optimizer(ctx.model, scfg)
    steps = _steps_per_epoch(ctx, scfg)
    start_epoch = 0
    global_step = 0
    history: list[dict] = []
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expect_config_hash=compat_hash(cfg))
        if ckpt.stage != 2:
            raise ConfigError(f"{resume_from} holds a stage-{ckpt.stage} state, not stage 2")
        restore_modules(ctx, ckpt)
        restore_optimizer(optimizer, ckpt.optimizer,
                          {k: v for k, v in ckpt.tensors.items() if k.startswith("optim.")})
        _restore_rng(ctx, ckpt)
        start_epoch = ckpt.epoch
        global_step = ckpt.global_step
        history = list(ckpt.metric_history)
        apply_stage2_freeze(ctx.model, ctx.prompts, cfg.loss.temperature_learnable)
    frozen_before = _snapshot_frozen(ctx.model, ctx.prompts)
    id_prompt_embs = None
    if use_prompts:
        with torch.no_grad():  # frozen bank + frozen encoder: constant for the stage
            id_prompt_embs = ctx.builder.all_identity_embeddings()
    result = StageResult(checkpoint=out_dir / "stage2_final", epoch_rows=history)
    for epoch in range(start_epoch, scfg.epochs):
        tick = time.perf_counter()
        sums: dict[str, float] = {}
        lr = 0.0
        for step in range(steps):
            lr = _set_group_lrs(optimizer, scfg, epoch, step, steps)
            batch = ctx.sampler.sample()
            feats = stage2_features(ctx, batch)
            parts = stage2_loss_terms(ctx.model, feats, batch.views, cfg.loss,
                                      cfg.ablation, id_prompt_embs)
            total = stage2_objective(parts, cfg.loss)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            _assert_no_frozen_grads(ctx.model, ctx.prompts)
            _clip(optimizer, scfg.grad_clip_norm)
            optimizer.step()
            global_step += 1
            result.step_losses.append(float(total.detach()))
            for k, v in _parts_dict(parts).items():
                sums[k] = sums.get(k, 0.0) + v
            if (use_prompts and scfg.prompt_audit_every
                    and global_step % scfg.prompt_audit_every == 0):
                with torch.no_grad():
                    fresh = ctx.builder.all_identity_embeddings()
                drift = float((fresh - id_prompt_embs).abs().max())
                if drift > 1e-6:
                    raise AssertionError(
                        f"precomputed identity-prompt embeddings drifted by {drift}"
                    )
        row = {"stage": 2, "epoch": epoch, "steps": steps,
               **{k: v / steps for k, v in sums.items()},
               "lr": lr, "wall_time_s": round(time.perf_counter() - tick, 3)}
        result.epoch_rows.append(row)
        write_metrics_csv(out_dir / "stage2_metrics.csv", result.epoch_rows)
        _save(ctx, out_dir / "stage2_last", stage=2, epoch=epoch + 1,
              global_step=global_step, optimizer=optimizer, history=result.epoch_rows)
    _assert_frozen_unchanged(frozen_before, ctx.model, ctx.prompts)
    _save(ctx, result.checkpoint, stage=2, epoch=scfg.epochs, global_step=global_step,
          optimizer=optimizer, history=result.epoch_rows)
    return result


def train_all(ctx: TrainingContext, out_dir: str | Path) -> StageResult:
    """Stage 1 (when enabled) followed by stage 2; returns the stage-2 result."""
    out_dir = Path(out_dir)
    stage1_ckpt = None
    if ctx.cfg.ablation.enable_hpl:
        stage1_ckpt = run_stage1(ctx, out_dir).checkpoint
    return run_stage2(ctx, out_dir, stage1_checkpoint=stage1_ckpt)


def run_evaluation(ctx: TrainingContext) -> list[RetrievalResult]:
    results = []
    task = ctx.cfg.eval.task
    batch = ctx.cfg.eval.batch_size
    if task in ("t2i", "both"):
        results.append(evaluate_t2i(ctx.model, ctx.t2i_data, ctx.vocab,
                                    max_text_len=ctx.cfg.model.max_text_len,
                                    batch_size=batch))
    if task in ("i2i", "both"):
        results.append(evaluate_i2i(ctx.model, ctx.i2i_data, batch_size=batch))
    return results

"""Alternating min-max training loop, checkpointing and the ablation harness.

One train step updates the generator side (image generator, shared semantic
generator, attention module, uncertainty heads) with the discriminator
frozen, then the discriminator on detached fakes.  Every source of
randomness is derived from (seed, epoch, position) so a run is fully
determined by its config and any checkpoint resumes transparently.
"""

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import checkpoint as ckpt
from .attention import AttentionModule, FeatureUncertainty, forward_stage2
from .config import (AblationSpec, AttentionConfig, TrainConfig, ablation_spec,
                     attention_config_from_dict, config_to_dict,
                     train_config_from_dict)
from .data import AugmentConfig, augment, collate, load_all
from .losses import (LOG_COLUMNS, LossBreakdown, NonFiniteLossError, fake_loss,
                     real_loss, total_objective)
from .metrics import psnr, sharpness_difference, ssim, to_metric_space
from .networks import (PatchDiscriminator, UnetGenerator, default_unet_depth,
                       discriminate, forward_stage1, init_weights)

LOG_NAME = "loss_log.csv"


def build_ablation(baseline_id, n_channels=10, attn_overrides=None, train_overrides=None):
    """Derive (TrainConfig, AttentionConfig, AblationSpec) for baseline A..H.

    The uncertainty-guided targets shrink to the pixel losses that actually
    exist in the configuration: the stage-I semantic loss before attention
    selection is enabled, both semantic losses afterwards.
    """
    spec = ablation_spec(baseline_id)
    if not spec.use_uncertainty:
        targets = ()
    elif spec.use_attention_selection:
        targets = (2, 4)
    else:
        targets = (2,)
    train_kwargs = dict(train_overrides or {})
    train_kwargs["uncertainty_targets"] = targets
    attn_kwargs = dict(attn_overrides or {})
    attn_kwargs.setdefault("n_channels", max(1, n_channels))
    attn_kwargs["uncertainty_count"] = len(targets)
    return TrainConfig(**train_kwargs), AttentionConfig(**attn_kwargs), spec


@dataclass
class TrainState:
    step: int
    epoch: int
    batch_index: int
    seed: int
    gi: UnetGenerator
    gs: UnetGenerator          # None without the semantic cycle
    ga: AttentionModule        # None without attention selection
    unc: FeatureUncertainty    # None unless uncertainty without attention
    d: PatchDiscriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    g_param_names: list
    d_param_names: list
    train_cfg: TrainConfig
    attn_cfg: AttentionConfig
    ablation: AblationSpec
    build_args: dict

    def named_modules_list(self):
        mods = [("gi", self.gi)]
        if self.gs is not None:
            mods.append(("gs", self.gs))
        if self.ga is not None:
            mods.append(("ga", self.ga))
        if self.unc is not None:
            mods.append(("unc", self.unc))
        mods.append(("d", self.d))
        return mods

    def final_output(self, stage1, selection):
        return selection.refined_image if selection is not None else stage1.coarse_image


def _named_params(modules):
    names, params = [], []
    for prefix, m in modules:
        for n, p in m.named_parameters():
            names.append(f"{prefix}.{n}")
            params.append(p)
    return names, params


def build_state(train_cfg, attn_cfg, ablation, *, image_size=64, image_channels=3,
                semantic_channels=3, gi_base=64, gs_base=4, gi_depth=None,
                gs_depth=2, seed=0):
    """Construct all networks and optimizers for one configuration."""
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    if gi_depth is None:
        gi_depth = default_unet_depth(*image_size)
    gen = torch.Generator().manual_seed(seed)

    gi_in = (image_channels if ablation.use_condition_image else 0) + \
            (semantic_channels if ablation.use_semantic_input else 0)
    gi = UnetGenerator(gi_in, image_channels, base_filters=gi_base, depth=gi_depth)
    init_weights(gi, generator=gen)

    gs = None
    if ablation.use_cycle:
        gs = UnetGenerator(image_channels, semantic_channels,
                           base_filters=gs_base, depth=gs_depth)
        init_weights(gs, generator=gen)

    ga = None
    unc = None
    if ablation.use_attention_selection:
        fused = image_channels * 2 + gi_base + gs_base
        ga = AttentionModule(fused, image_channels, attn_cfg,
                             use_pool=ablation.use_multiscale_pool)
        init_weights(ga, generator=gen)
    elif ablation.use_uncertainty:
        unc = FeatureUncertainty(gi_base, attn_cfg.uncertainty_count,
                                 epsilon_u=attn_cfg.epsilon_u)
        init_weights(unc, generator=gen)

    d = PatchDiscriminator(image_channels * 2)
    init_weights(d, generator=gen)

    g_modules = [("gi", gi)] + ([("gs", gs)] if gs else []) + \
                ([("ga", ga)] if ga else []) + ([("unc", unc)] if unc else [])
    g_names, g_params = _named_params(g_modules)
    d_names, d_params = _named_params([("d", d)])
    adam = dict(lr=train_cfg.learning_rate, betas=(train_cfg.beta1, train_cfg.beta2),
                eps=train_cfg.adam_eps)
    build_args = dict(image_size=list(image_size), image_channels=image_channels,
                      semantic_channels=semantic_channels, gi_base=gi_base,
                      gs_base=gs_base, gi_depth=gi_depth, gs_depth=gs_depth)
    return TrainState(
        step=0, epoch=0, batch_index=0, seed=seed,
        gi=gi, gs=gs, ga=ga, unc=unc, d=d,
        opt_g=torch.optim.Adam(g_params, **adam),
        opt_d=torch.optim.Adam(d_params, **adam),
        g_param_names=g_names, d_param_names=d_names,
        train_cfg=train_cfg, attn_cfg=attn_cfg, ablation=ablation,
        build_args=build_args,
    )


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------

def generator_objective(state, batch):
    """Forward both stages and assemble the weighted generator loss."""
    ab = state.ablation
    stage1 = forward_stage1(state.gi, state.gs, batch,
                            ab.use_condition_image, ab.use_semantic_input)
    selection = None
    if ab.use_attention_selection:
        selection = forward_stage2(stage1, batch, state.gs, state.ga)

    pixel_pairs = {1: (stage1.coarse_image, batch.target_image)}
    if stage1.recon_semantic is not None:
        pixel_pairs[2] = (stage1.recon_semantic, batch.target_semantic)
    if selection is not None:
        pixel_pairs[3] = (selection.refined_image, batch.target_image)
        pixel_pairs[4] = (selection.refined_semantic, batch.target_semantic)

    uncertainties = {}
    if ab.use_uncertainty:
        maps = selection.uncertainties if selection is not None \
            else state.unc(stage1.image_features)
        guided = [t for t in state.train_cfg.uncertainty_targets if t in pixel_pairs]
        for k, target in enumerate(guided):
            uncertainties[target] = maps[:, k]

    adv_g1 = real_loss(discriminate(state.d, batch.condition, stage1.coarse_image))
    adv_g2 = None
    tv_image = None
    if selection is not None:
        adv_g2 = real_loss(discriminate(state.d, batch.condition, selection.refined_image))
        if ab.use_tv:
            tv_image = selection.refined_image

    breakdown = total_objective(pixel_pairs, uncertainties, adv_g1, adv_g2,
                                tv_image, state.train_cfg,
                                epsilon_u=state.attn_cfg.epsilon_u)
    return breakdown, stage1, selection


def discriminator_objective(state, batch, coarse, refined):
    real_logits = discriminate(state.d, batch.condition, batch.target_image)
    loss = real_loss(real_logits) + \
        fake_loss(discriminate(state.d, batch.condition, coarse.detach()))
    if refined is not None:
        stage2 = real_loss(real_logits) + \
            fake_loss(discriminate(state.d, batch.condition, refined.detach()))
        loss = loss + state.train_cfg.lambda_adv * stage2
    return loss


def _maybe_clip(params, cfg):
    if cfg.grad_clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)


def train_step(state, batch, update_d=True, d_steps=1):
    """Generator update with D frozen, then discriminator update(s) on
    detached fakes.  Returns (state, LossBreakdown)."""
    breakdown, stage1, selection = generator_objective(state, batch)
    state.opt_g.zero_grad(set_to_none=True)
    breakdown.total.backward()
    _maybe_clip([p for g in state.opt_g.param_groups for p in g["params"]],
                state.train_cfg)
    state.opt_g.step()

    refined = selection.refined_image if selection is not None else None
    d_loss = None
    for _ in range(max(1, d_steps) if update_d else 1):
        d_loss = discriminator_objective(state, batch, stage1.coarse_image, refined)
        if not torch.isfinite(d_loss):
            raise NonFiniteLossError(f"loss term 'd_loss' is not finite: {d_loss}")
        if update_d:
            state.opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            _maybe_clip([p for g in state.opt_d.param_groups for p in g["params"]],
                        state.train_cfg)
            state.opt_d.step()
    breakdown.d_loss = d_loss.detach()
    state.step += 1
    return state, breakdown


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

_ADAM_KEYS = ("step", "exp_avg", "exp_avg_sq")


def save_checkpoint(state: TrainState, path):
    tensors = {}
    for prefix, module in state.named_modules_list():
        tensors.update(ckpt.module_tensors(prefix, module))
    for tag, opt, names in (("optg", state.opt_g, state.g_param_names),
                            ("optd", state.opt_d, state.d_param_names)):
        params = [p for g in opt.param_groups for p in g["params"]]
        for name, p in zip(names, params):
            st = opt.state.get(p)
            if not st:
                continue
            for key in _ADAM_KEYS:
                tensors[f"{tag}.{name}.{key}"] = st[key]
    meta = {
        "step": state.step, "epoch": state.epoch, "batch_index": state.batch_index,
        "seed": state.seed,
        "baseline_id": state.ablation.baseline_id,
        "train_cfg": config_to_dict(state.train_cfg),
        "attn_cfg": config_to_dict(state.attn_cfg),
        "build_args": state.build_args,
    }
    ckpt.save_archive(path, tensors, meta)


def load_checkpoint(path) -> TrainState:
    tensors, meta = ckpt.load_archive(path)
    train_cfg = train_config_from_dict(meta["train_cfg"])
    attn_cfg = attention_config_from_dict(meta["attn_cfg"])
    ablation = ablation_spec(meta["baseline_id"])
    build_args = dict(meta["build_args"])
    build_args["image_size"] = tuple(build_args["image_size"])
    state = build_state(train_cfg, attn_cfg, ablation, seed=meta["seed"], **build_args)
    for prefix, module in state.named_modules_list():
        ckpt.load_module(prefix, module, tensors)
    for tag, opt, names in (("optg", state.opt_g, state.g_param_names),
                            ("optd", state.opt_d, state.d_param_names)):
        params = [p for g in opt.param_groups for p in g["params"]]
        for name, p in zip(names, params):
            entry = {}
            for key in _ADAM_KEYS:
                full = f"{tag}.{name}.{key}"
                if full in tensors:
                    entry[key] = torch.from_numpy(tensors[full])
            if entry:
                opt.state[p] = entry
    state.step = meta["step"]
    state.epoch = meta["epoch"]
    state.batch_index = meta["batch_index"]
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _epoch_order(seed, epoch, n, shuffle):
    if not shuffle:
        return np.arange(n)
    rng = np.random.default_rng(np.random.SeedSequence((seed, epoch, 0x0D0E)))
    return rng.permutation(n)


def _augment_rng(seed, epoch, position):
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, position, 0xA6)))


def _format_row(step, breakdown):
    row = breakdown.as_floats()
    cells = [str(step)]
    for col in LOG_COLUMNS[1:]:
        v = row[col]
        cells.append("" if v == "" else f"{v:.17g}")
    return ",".join(cells)


def run_training(train_cfg, attn_cfg, ablation, data, *, epochs=None, max_steps=None,
                 batch_size=4, seed=0, out_dir=None, augment_cfg=None,
                 checkpoint_interval=0, resume_from=None, shuffle=True, d_steps=1,
                 build_kwargs=None, log_hook=None):
    """Train over the dataset; returns the final TrainState.

    ``data`` is a DatasetManifest or a list of PairedSamples.  Exactly one
    of ``epochs`` / ``max_steps`` bounds the run.  With ``out_dir`` set, a
    CSV loss log and checkpoints (initial, every ``checkpoint_interval``
    steps if positive, and final) are written there.
    """
    samples = data if isinstance(data, list) else load_all(data)
    if epochs is None and max_steps is None:
        raise ValueError("specify epochs or max_steps")
    n = len(samples)
    if n == 0 and (max_steps or epochs):
        if max_steps:
            raise ValueError("cannot take steps on an empty dataset")

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.ablation.baseline_id != ablation.baseline_id:
            raise ValueError("checkpoint baseline disagrees with requested config")
    else:
        state = build_state(train_cfg, attn_cfg, ablation, seed=seed,
                            **(build_kwargs or {}))

    batches_per_epoch = max(1, math.ceil(n / batch_size)) if n else 0
    if epochs is not None and max_steps is None:
        max_steps = epochs * batches_per_epoch

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, LOG_NAME), "w", encoding="utf-8")
        log_fh.write(",".join(LOG_COLUMNS) + "\n")
        if resume_from is None:
            save_checkpoint(state, os.path.join(out_dir, "initial.ckpt"))

    try:
        epoch = state.epoch
        start_batch = state.batch_index
        while state.step < max_steps and n:
            order = _epoch_order(state.seed, epoch, n, shuffle)
            for b in range(start_batch, batches_per_epoch):
                if state.step >= max_steps:
                    break
                idx = order[b * batch_size:(b + 1) * batch_size]
                picked = []
                for pos, i in zip(range(b * batch_size, b * batch_size + len(idx)), idx):
                    s = samples[int(i)]
                    if augment_cfg is not None:
                        s = augment(s, _augment_rng(state.seed, epoch, pos), augment_cfg)
                    picked.append(s)
                batch = collate(picked)
                state, breakdown = train_step(state, batch, d_steps=d_steps)
                state.epoch = epoch if b + 1 < batches_per_epoch else epoch + 1
                state.batch_index = b + 1 if b + 1 < batches_per_epoch else 0
                if log_fh is not None:
                    log_fh.write(_format_row(state.step, breakdown) + "\n")
                    log_fh.flush()
                if log_hook is not None:
                    log_hook(state.step, breakdown)
                if (out_dir is not None and checkpoint_interval > 0
                        and state.step % checkpoint_interval == 0):
                    save_checkpoint(state, os.path.join(out_dir, f"step{state.step:06d}.ckpt"))
            epoch += 1
            start_batch = 0
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(state, os.path.join(out_dir, "final.ckpt"))
    return state


# ---------------------------------------------------------------------------
# Evaluation helpers, ablation table, attention sweep
# ---------------------------------------------------------------------------

def synthesize(state, batch):
    """Inference pass; returns (StageOneOutput, SelectionOutput or None)."""
    ab = state.ablation
    with torch.no_grad():
        stage1 = forward_stage1(state.gi, state.gs, batch,
                                ab.use_condition_image, ab.use_semantic_input)
        selection = None
        if ab.use_attention_selection:
            selection = forward_stage2(stage1, batch, state.gs, state.ga)
    return stage1, selection


def evaluate_pixel_metrics(state, samples, batch_size=8):
    """Mean SSIM/PSNR/SD of the final output against the target over samples."""
    vals = {"ssim": [], "psnr": [], "sd": []}
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start:start + batch_size])
        stage1, selection = synthesize(state, batch)
        out = state.final_output(stage1, selection)
        for i in range(out.shape[0]):
            fake = to_metric_space(out[i])
            real = to_metric_space(batch.target_image[i])
            vals["ssim"].append(ssim(real, fake))
            vals["psnr"].append(psnr(real, fake))
            vals["sd"].append(sharpness_difference(real, fake))
    return {k: float(np.mean(v)) for k, v in vals.items()}


def quick_train(baseline_id, samples, *, steps, seed, batch_size=4, n_channels=10,
                image_size=64, out_dir=None, train_overrides=None, attn_overrides=None):
    train_cfg, attn_cfg, spec = build_ablation(
        baseline_id, n_channels=n_channels,
        attn_overrides=attn_overrides, train_overrides=train_overrides)
    return run_training(train_cfg, attn_cfg, spec, samples, max_steps=steps,
                        batch_size=batch_size, seed=seed, out_dir=out_dir,
                        build_kwargs={"image_size": image_size})


def ablation_table(baseline_ids, samples, *, steps, seed, batch_size=4,
                   n_channels=10, image_size=64):
    """Train each requested baseline on identical data/seed and score it."""
    rows = []
    for bid in baseline_ids:
        state = quick_train(bid, samples, steps=steps, seed=seed,
                            batch_size=batch_size, n_channels=n_channels,
                            image_size=image_size)
        row = {"baseline": state.ablation.baseline_id}
        row.update(evaluate_pixel_metrics(state, samples))
        rows.append(row)
    return rows


def attention_sweep(n_values, samples, *, steps, seed, batch_size=4, image_size=64):
    """Sweep the number of attention channels; n=0 degenerates to the
    uncertainty-only configuration without attention selection."""
    rows = []
    for n in n_values:
        bid = "E" if n == 0 else "F"
        state = quick_train(bid, samples, steps=steps, seed=seed,
                            batch_size=batch_size, n_channels=max(1, n),
                            image_size=image_size)
        row = {"n": n}
        row.update(evaluate_pixel_metrics(state, samples))
        rows.append(row)
    return rows

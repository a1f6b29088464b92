"""Training objectives.

Four L1 pixel losses (coarse image, stage-I semantics, refined image,
stage-II semantics), optional uncertainty rescaling of configured pixel
losses, a two-stage adversarial objective with the stage-II term weighted
by ``lambda_adv``, and anisotropic total variation on the refined image.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import TrainConfig
from .networks import discriminate


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN/Inf; the message names the offending term."""


def _check_finite(value, name):
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(f"loss term {name!r} is not finite: {value}")
    return value


def pixel_l1_map(pred, target):
    """Per-pixel channel-averaged absolute error, shape (B, H, W)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean(dim=-3)


def uncertainty_guided(loss_map, u, epsilon_u=1e-3):
    """Mean over pixels of loss/u + log(u).

    ``u`` must already be clamped to [epsilon_u, 1]; values below the floor
    indicate an upstream bug and raise.
    """
    if loss_map.shape != u.shape:
        raise ValueError(f"loss map {tuple(loss_map.shape)} vs uncertainty {tuple(u.shape)}")
    u_min = float(u.detach().min())
    if u_min < epsilon_u * (1 - 1e-6):
        raise ValueError(f"uncertainty below clamp floor {epsilon_u}: min={u_min}")
    return (loss_map / u + torch.log(u)).mean()


def real_loss(logits):
    """-mean log sigmoid(logits), in stable logit space."""
    return F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits))


def fake_loss(logits):
    """-mean log(1 - sigmoid(logits)), in stable logit space."""
    return F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits))


@dataclass
class AdversarialTerms:
    d_loss: torch.Tensor
    g_loss: torch.Tensor
    g_stage1: torch.Tensor
    g_stage2: torch.Tensor  # None for single-stage configurations
    d_stage1: torch.Tensor
    d_stage2: torch.Tensor  # None for single-stage configurations


def adversarial_losses(d, i_a, i_g, i_g1, i_g2, lambda_adv):
    """Discriminator and generator adversarial losses over both stages.

    The discriminator maximizes, per stage, mean log D(real pair) +
    mean log(1 - D(fake pair)) with fakes detached; its loss is the
    negated stage-1 term plus lambda_adv times the negated stage-2 term.
    The generator minimizes the non-saturating -mean log D(fake pair),
    combined with the same stage weighting.  ``i_g2=None`` drops stage 2.
    """
    real_logits = discriminate(d, i_a, i_g)

    # D side: maximize log D(real) + log(1 - D(fake)); loss is the negation.
    d_stage1 = real_loss(real_logits) + fake_loss(discriminate(d, i_a, i_g1.detach()))
    g_stage1 = real_loss(discriminate(d, i_a, i_g1))

    if i_g2 is None:
        return AdversarialTerms(d_loss=d_stage1, g_loss=g_stage1,
                                g_stage1=g_stage1, g_stage2=None,
                                d_stage1=d_stage1, d_stage2=None)

    d_stage2 = real_loss(real_logits) + fake_loss(discriminate(d, i_a, i_g2.detach()))
    g_stage2 = real_loss(discriminate(d, i_a, i_g2))
    return AdversarialTerms(
        d_loss=d_stage1 + lambda_adv * d_stage2,
        g_loss=g_stage1 + lambda_adv * g_stage2,
        g_stage1=g_stage1,
        g_stage2=g_stage2,
        d_stage1=d_stage1,
        d_stage2=d_stage2,
    )


def tv_regularization(img):
    """Anisotropic total variation: summed |vertical| + |horizontal|
    neighbor differences divided by the total difference count."""
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError("total variation needs at least a 2x2 image")
    dv = (img[..., 1:, :] - img[..., :-1, :]).abs()
    dh = (img[..., :, 1:] - img[..., :, :-1]).abs()
    return (dv.sum() + dh.sum()) / (dv.numel() + dh.numel())


@dataclass
class LossBreakdown:
    """All scalar terms of one generator objective evaluation.

    ``total`` recomposes exactly as sum(lambda_i * pixel_i) + adv_stage1
    + lambda_adv * adv_stage2 + lambda_tv * tv, with absent terms as zero.
    The entries are 0-dim tensors; ``total`` carries the autograd graph.
    """

    pixel: dict              # index (1..4) -> post-guidance scalar
    adv_stage1: torch.Tensor
    adv_stage2: torch.Tensor  # unweighted; None when single-stage
    tv: torch.Tensor          # None when disabled
    total: torch.Tensor
    d_loss: torch.Tensor = None
    per_pixel_maps: dict = field(default_factory=dict)

    def as_floats(self):
        row = {}
        for i in (1, 2, 3, 4):
            v = self.pixel.get(i)
            row[f"pixel_{i}"] = float(v.detach()) if v is not None else ""
        for name in ("adv_stage1", "adv_stage2", "tv", "total", "d_loss"):
            v = getattr(self, name)
            row[name] = float(v.detach()) if v is not None else ""
        return row


LOG_COLUMNS = ("step", "pixel_1", "pixel_2", "pixel_3", "pixel_4",
               "adv_stage1", "adv_stage2", "tv", "total", "d_loss")


def total_objective(pixel_pairs, uncertainties, adv_g_stage1, adv_g_stage2,
                    tv_image, cfg: TrainConfig, epsilon_u=1e-3):
    """Assemble the weighted generator objective.

    pixel_pairs:   {index: (pred, target)} for the pixel losses present
    uncertainties: {index: map (B, H, W)} for the guided subset
    adv_g_stage1/adv_g_stage2: generator adversarial scalars (stage2 may be None)
    tv_image:      image receiving total-variation regularization, or None
    """
    pixel, maps = {}, {}
    for idx, (pred, target) in sorted(pixel_pairs.items()):
        loss_map = pixel_l1_map(pred, target)
        if idx in cfg.uncertainty_targets and idx in uncertainties:
            maps[idx] = loss_map
            scalar = uncertainty_guided(loss_map, uncertainties[idx], epsilon_u)
        else:
            scalar = loss_map.mean()
        pixel[idx] = _check_finite(scalar, f"pixel_{idx}")

    # accumulate in float64 so the reported total recomposes exactly from
    # the reported components
    total = sum(cfg.pixel_weight(i) * v.double() for i, v in pixel.items())
    total = total + _check_finite(adv_g_stage1, "adv_stage1").double()
    if adv_g_stage2 is not None:
        total = total + cfg.lambda_adv * _check_finite(adv_g_stage2, "adv_stage2").double()
    tv = None
    if tv_image is not None:
        tv = _check_finite(tv_regularization(tv_image), "tv")
        total = total + cfg.lambda_tv * tv.double()
    _check_finite(total, "total")

    return LossBreakdown(pixel=pixel, adv_stage1=adv_g_stage1,
                         adv_stage2=adv_g_stage2, tv=tv, total=total,
                         per_pixel_maps=maps)

"""Multi-channel attention selection over a widened generation space.

Stage II fuses the stage-I outputs and features into one tensor, optionally
refines it by multi-scale pooled gating, then produces N candidate
generations and N softmax-normalized attention maps.  The refined image is
the pixel-wise convex combination of the candidates under the attention
weights; the attention maps additionally drive K uncertainty maps that
later rescale pixel losses.
"""

import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .config import AttentionConfig


@dataclass
class SelectionOutput:
    intermediates: torch.Tensor    # (B, N, C, H, W) in [-1, 1]
    attentions: torch.Tensor       # (B, N, 1, H, W), sums to 1 over N
    uncertainties: torch.Tensor    # (B, K, H, W) in [epsilon_u, 1]
    refined_image: torch.Tensor    # (B, C, H, W) in [-1, 1]
    refined_semantic: torch.Tensor  # (B, C, H, W) or None


def fuse_inputs(condition, coarse, f_i, f_s):
    """Channel-concatenate (condition, coarse, image features, semantic features)."""
    parts = [condition, coarse, f_i, f_s]
    sizes = {tuple(p.shape[-2:]) for p in parts}
    if len(sizes) != 1:
        raise ValueError(f"fuse_inputs: spatial sizes disagree: {sizes}")
    return torch.cat(parts, dim=1)


def pool_gate_concat(fc, scales):
    """For each scale: window-average, nearest-upsample, gate by the input;
    concatenate the gated products of all scales channel-wise."""
    h, w = fc.shape[-2:]
    products = []
    for s in scales:
        if h % s or w % s:
            raise ValueError(f"pool scale {s} does not divide {h}x{w}")
        pooled = F.avg_pool2d(fc, kernel_size=s, stride=s)
        up = pooled.repeat_interleave(s, dim=-2).repeat_interleave(s, dim=-1)
        products.append(fc * up)
    return torch.cat(products, dim=1)


def generate_intermediates(fcp, gen_convs, cfg: AttentionConfig):
    """N candidate generations, each tanh-bounded to [-1, 1]."""
    if len(gen_convs) != cfg.n_channels:
        raise ValueError(f"{len(gen_convs)} generation filters but n_channels={cfg.n_channels}")
    return torch.stack([torch.tanh(conv(fcp)) for conv in gen_convs], dim=1)


def generate_attention(fcp, attn_convs, cfg: AttentionConfig):
    """N single-channel maps, softmax-normalized across maps at every pixel."""
    if len(attn_convs) != cfg.n_channels:
        raise ValueError(f"{len(attn_convs)} attention filters but n_channels={cfg.n_channels}")
    logits = torch.cat([conv(fcp) for conv in attn_convs], dim=1)  # (B, N, H, W)
    return torch.softmax(logits, dim=1).unsqueeze(2)


def select(intermediates, attentions):
    """Pixel-wise convex combination of the candidates under the attention weights."""
    if intermediates.shape[1] != attentions.shape[1]:
        raise ValueError("intermediates and attentions disagree on N")
    if intermediates.shape[-2:] != attentions.shape[-2:]:
        raise ValueError("intermediates and attentions disagree on spatial size")
    return (attentions * intermediates).sum(dim=1)


def uncertainty_maps(attentions, unc_convs, cfg: AttentionConfig):
    """K sigmoid maps over the concatenated attentions, clamped to [epsilon_u, 1]."""
    if len(unc_convs) != cfg.uncertainty_count:
        raise ValueError(f"{len(unc_convs)} uncertainty filters but K={cfg.uncertainty_count}")
    stacked = attentions.squeeze(2)  # (B, N, H, W)
    maps = [torch.sigmoid(conv(stacked)).squeeze(1) for conv in unc_convs]
    if not maps:
        return attentions.new_zeros((attentions.shape[0], 0) + attentions.shape[-2:])
    return torch.stack(maps, dim=1).clamp(min=cfg.epsilon_u)


class AttentionModule(nn.Module):
    """Stage-II selection network.

    Parameters:
        in_channels (int)    -- channels of the fused stage-I tensor
        image_channels (int) -- channels of each candidate generation
        cfg (AttentionConfig)
        use_pool (bool)      -- enable multi-scale pooled gating in front of
                                the fusion convolution
    """

    def __init__(self, in_channels, image_channels, cfg: AttentionConfig, use_pool=True):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        self.image_channels = image_channels
        self.use_pool = use_pool
        fusion_in = in_channels * (len(cfg.pool_scales) if use_pool else 1)
        self.fusion = nn.Conv2d(fusion_in, in_channels, 3, padding=1)
        gpad = cfg.gen_kernel // 2
        apad = cfg.attn_kernel // 2
        self.gen_convs = nn.ModuleList(
            nn.Conv2d(in_channels, image_channels, cfg.gen_kernel, padding=gpad)
            for _ in range(cfg.n_channels)
        )
        self.attn_convs = nn.ModuleList(
            nn.Conv2d(in_channels, 1, cfg.attn_kernel, padding=apad)
            for _ in range(cfg.n_channels)
        )
        self.unc_convs = nn.ModuleList(
            nn.Conv2d(cfg.n_channels, 1, cfg.attn_kernel, padding=apad)
            for _ in range(cfg.uncertainty_count)
        )

    def fused_features(self, fc):
        """Pooled gating (when enabled) plus the fusion convolution."""
        if fc.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} fused channels, got {fc.shape[1]}")
        if self.use_pool:
            self.cfg.validate_spatial(*fc.shape[-2:])
            fc = pool_gate_concat(fc, self.cfg.pool_scales)
        return torch.relu(self.fusion(fc))

    def forward(self, fc):
        fcp = self.fused_features(fc)
        intermediates = generate_intermediates(fcp, self.gen_convs, self.cfg)
        attentions = generate_attention(fcp, self.attn_convs, self.cfg)
        refined = select(intermediates, attentions)
        uncertainties = uncertainty_maps(attentions, self.unc_convs, self.cfg)
        return intermediates, attentions, uncertainties, refined


class FeatureUncertainty(nn.Module):
    """Uncertainty maps from stage-I features, for configurations that guide
    pixel losses without the attention selection stage."""

    def __init__(self, in_channels, count, epsilon_u=1e-3):
        super().__init__()
        self.epsilon_u = epsilon_u
        self.convs = nn.ModuleList(
            nn.Conv2d(in_channels, 1, 1) for _ in range(count)
        )

    def forward(self, feat):
        if not len(self.convs):
            return feat.new_zeros((feat.shape[0], 0) + feat.shape[-2:])
        maps = [torch.sigmoid(conv(feat)).squeeze(1) for conv in self.convs]
        return torch.stack(maps, dim=1).clamp(min=self.epsilon_u)


def forward_stage2(stage1, batch, gs, module: AttentionModule, cfg: AttentionConfig = None):
    """Full stage-II pass: fuse, refine, select, and re-run the shared
    semantic generator on the refined image."""
    if cfg is not None and cfg.n_channels != module.cfg.n_channels:
        raise ValueError("attention config disagrees with the module's filter count")
    fc = fuse_inputs(batch.condition, stage1.coarse_image,
                     stage1.image_features, stage1.semantic_features)
    intermediates, attentions, uncertainties, refined = module(fc)
    refined_semantic = None
    if gs is not None:
        refined_semantic, _ = gs(refined)
    return SelectionOutput(intermediates, attentions, uncertainties,
                           refined, refined_semantic)


# ---------------------------------------------------------------------------
# Debug dump of the selection internals as image grids
# ---------------------------------------------------------------------------

def _to_grid(maps_01):
    """Tile (N, H, W, C) arrays in [0, 1] into one uint8 grid image."""
    n, h, w, c = maps_01.shape
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    grid = np.zeros((rows * (h + 2) - 2, cols * (w + 2) - 2, c), dtype=np.float64)
    for i in range(n):
        r, col = divmod(i, cols)
        grid[r * (h + 2):r * (h + 2) + h, col * (w + 2):col * (w + 2) + w] = maps_01[i]
    return np.clip(np.round(grid * 255.0), 0, 255).astype(np.uint8)


def dump_selection(selection: SelectionOutput, out_dir, prefix="sample", index=0):
    """Write the candidate generations, attention maps and uncertainty maps
    of one batch element as 8-bit image grids.  Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    inter = selection.intermediates[index].detach().cpu().numpy()      # (N, C, H, W)
    inter01 = (np.transpose(inter, (0, 2, 3, 1)) + 1.0) / 2.0
    path = os.path.join(out_dir, f"{prefix}_intermediates.png")
    Image.fromarray(_to_grid(inter01)).save(path)
    written.append(path)

    attn = selection.attentions[index, :, 0].detach().cpu().numpy()    # (N, H, W)
    path = os.path.join(out_dir, f"{prefix}_attentions.png")
    Image.fromarray(_to_grid(attn[..., None]).squeeze(-1), mode="L").save(path)
    written.append(path)

    if selection.uncertainties.shape[1]:
        unc = selection.uncertainties[index].detach().cpu().numpy()    # (K, H, W)
        path = os.path.join(out_dir, f"{prefix}_uncertainties.png")
        Image.fromarray(_to_grid(unc[..., None]).squeeze(-1), mode="L").save(path)
        written.append(path)
    return written

"""Generator and discriminator networks.

The image generator and the semantic generator are U-Nets whose final
decoder layer is exposed as a feature map (64 and 4 channels by default);
the discriminator is a patch classifier over pairwise inputs.  One
semantic generator instance is shared by both generation stages, and one
discriminator instance serves both stage outputs.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn


def init_weights(module, std=0.2, generator=None):
    """Gaussian(0, std) init for all conv weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def default_unet_depth(height, width):
    """Down-sampling stage count for a given resolution: log2(min side) - 2, capped at 8."""
    depth = int(torch.log2(torch.tensor(float(min(height, width)))).item()) - 2
    return max(1, min(8, depth))


class UnetGenerator(nn.Module):
    """U-Net encoder/decoder with skip connections and an exposed feature map.

    Parameters:
        in_channels (int)  -- channels of the network input
        out_channels (int) -- channels of the generated output
        base_filters (int) -- filters of the first encoder conv; doubles per
                              stage, capped at 8x
        depth (int)        -- number of stride-2 down-sampling stages; inputs
                              must be divisible by 2**depth

    forward(x) returns ``(out, feat)``: the tanh-bounded output in [-1, 1]
    and the full-resolution feature map (``base_filters`` channels) taken
    after the last decoder convolution and its nonlinearity, just before
    the output head.
    """

    def __init__(self, in_channels, out_channels, base_filters=64, depth=4):
        super().__init__()
        if min(in_channels, out_channels, base_filters, depth) < 1:
            raise ValueError("channel counts and depth must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.base_filters = base_filters
        self.depth = depth

        filters = [base_filters * min(2 ** k, 8) for k in range(depth)]
        self.encoders = nn.ModuleList()
        for k in range(depth):
            c_in = in_channels if k == 0 else filters[k - 1]
            layers = [nn.Conv2d(c_in, filters[k], kernel_size=4, stride=2, padding=1)]
            if k > 0:
                layers.append(nn.InstanceNorm2d(filters[k]))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            self.encoders.append(nn.Sequential(*layers))

        self.decoders = nn.ModuleList()
        for k in range(depth - 1, -1, -1):
            c_out = base_filters if k == 0 else filters[k - 1]
            c_in = filters[k] if k == depth - 1 else filters[k] + filters[k]
            self.decoders.append(nn.Sequential(
                nn.ConvTranspose2d(c_in, c_out, kernel_size=4, stride=2, padding=1),
                nn.InstanceNorm2d(c_out),
                nn.ReLU(inplace=True),
            ))

        self.head = nn.Conv2d(base_filters, out_channels, kernel_size=3, padding=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        step = 2 ** self.depth
        if h % step or w % step:
            raise ValueError(f"input {h}x{w} not divisible by 2^{self.depth}")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        y = self.decoders[0](skips[-1])
        for i, dec in enumerate(self.decoders[1:], start=1):
            y = dec(torch.cat([y, skips[self.depth - 1 - i]], dim=1))
        feat = y
        out = torch.tanh(self.head(feat))
        return out, feat


def build_image_generator(base_filters=64, in_channels=6, out_channels=3,
                          depth=4, generator=None):
    net = UnetGenerator(in_channels, out_channels, base_filters=base_filters, depth=depth)
    init_weights(net, generator=generator)
    return net


def build_semantic_generator(base_filters=4, in_channels=3, out_channels=3,
                             depth=2, generator=None):
    net = UnetGenerator(in_channels, out_channels, base_filters=base_filters, depth=depth)
    init_weights(net, generator=generator)
    return net


class PatchDiscriminator(nn.Module):
    """Patch classifier over a channel-concatenated image pair.

    Three stride-2 convolutions followed by two stride-1 convolutions
    (70x70 receptive field); emits a grid of per-patch logits.
    """

    def __init__(self, in_channels=6, base_filters=64):
        super().__init__()
        if in_channels < 1:
            raise ValueError("in_channels must be positive")
        self.in_channels = in_channels
        f = base_filters
        self.model = nn.Sequential(
            nn.Conv2d(in_channels, f, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f, f * 2, 4, stride=2, padding=1),
            nn.InstanceNorm2d(f * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f * 2, f * 4, 4, stride=2, padding=1),
            nn.InstanceNorm2d(f * 4),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f * 4, f * 8, 4, stride=1, padding=1),
            nn.InstanceNorm2d(f * 8),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f * 8, 1, 4, stride=1, padding=1),
        )

    @staticmethod
    def output_size(n):
        """Patch-grid side length for input side n (three /2 stages, two k4 s1 p1)."""
        for _ in range(3):
            n = (n - 2) // 2 + 1
        for _ in range(2):
            n = n - 1
        return n

    def forward(self, x):
        h, w = x.shape[-2:]
        if self.output_size(h) < 1 or self.output_size(w) < 1:
            raise ValueError(f"input {h}x{w} too small for the patch classifier")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return self.model(x)


def build_discriminator(in_channels=6, base_filters=64, generator=None):
    net = PatchDiscriminator(in_channels, base_filters=base_filters)
    init_weights(net, generator=generator)
    return net


def discriminate(d, condition, candidate):
    """Patch logits for the pair (condition, candidate)."""
    if condition.shape[-2:] != candidate.shape[-2:]:
        raise ValueError("condition and candidate must share spatial size")
    return d(torch.cat([condition, candidate], dim=1))


@dataclass
class StageOneOutput:
    """Coarse generation plus the features feeding stage II."""

    coarse_image: torch.Tensor            # (B, 3, H, W) in [-1, 1]
    recon_semantic: torch.Tensor          # (B, 3, H, W) or None without a cycle
    image_features: torch.Tensor          # (B, base_filters_i, H, W)
    semantic_features: torch.Tensor       # (B, base_filters_s, H, W) or None


def stage1_input(batch, use_condition=True, use_semantic=True):
    """Assemble the image-generator input from the enabled sources."""
    parts = []
    if use_condition:
        parts.append(batch.condition)
    if use_semantic:
        parts.append(batch.target_semantic)
    if not parts:
        raise ValueError("stage-1 input needs the condition image or the semantic map")
    return torch.cat(parts, dim=1)


def forward_stage1(gi, gs, batch, use_condition=True, use_semantic=True):
    """Coarse synthesis followed by the semantic reconstruction cycle.

    ``gs=None`` skips the cycle (single-generator baselines).  The whole
    computation stays differentiable end-to-end, including the semantic
    branch flowing back through the coarse image.
    """
    coarse, f_i = gi(stage1_input(batch, use_condition, use_semantic))
    if gs is None:
        return StageOneOutput(coarse, None, f_i, None)
    recon, f_s = gs(coarse)
    return StageOneOutput(coarse, recon, f_i, f_s)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())

"""Configuration objects shared by the attention module, losses and trainer.

All configs are plain dataclasses that round-trip through dicts so they can
live inside JSON config files and checkpoint metadata.
"""

import dataclasses
import math
from dataclasses import dataclass, field


@dataclass
class AttentionConfig:
    """Settings of the multi-channel attention selection module.

    n_channels:        number of intermediate generations / attention maps (N)
    pool_scales:       spatial pooling window sizes; each must divide H and W
    uncertainty_count: number of uncertainty maps produced (K)
    gen_kernel:        kernel size of the intermediate-generation convolutions
    attn_kernel:       kernel size of the attention (and uncertainty) convolutions
    epsilon_u:         lower clamp of the uncertainty maps, keeps 1/U and log U finite
    """

    n_channels: int = 10
    pool_scales: tuple = (2, 4, 8)
    uncertainty_count: int = 2
    gen_kernel: int = 3
    attn_kernel: int = 1
    epsilon_u: float = 1e-3

    def __post_init__(self):
        self.pool_scales = tuple(int(s) for s in self.pool_scales)
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if any(s < 1 for s in self.pool_scales):
            raise ValueError("pool scales must be positive")
        if self.uncertainty_count < 0:
            raise ValueError("uncertainty_count must be >= 0")
        if self.gen_kernel % 2 != 1 or self.attn_kernel % 2 != 1:
            raise ValueError("kernels must be odd so padding preserves size")
        if not 0.0 < self.epsilon_u < 1.0:
            raise ValueError("epsilon_u must lie in (0, 1)")

    def validate_spatial(self, height, width):
        for s in self.pool_scales:
            if height % s != 0 or width % s != 0:
                raise ValueError(
                    f"pool scale {s} does not divide feature size {height}x{width}"
                )


@dataclass
class TrainConfig:
    """Loss weights and optimizer settings.

    lambda_1..lambda_4 weight the four L1 pixel losses: coarse image,
    stage-I semantic reconstruction, refined image, stage-II semantic
    reconstruction.  lambda_adv weights the stage-II adversarial term,
    lambda_tv the total-variation term on the refined image.
    uncertainty_targets lists which pixel losses (by 1-based index) are
    rescaled by learned uncertainty maps.
    """

    lambda_1: float = 100.0
    lambda_2: float = 1.0
    lambda_3: float = 200.0
    lambda_4: float = 2.0
    lambda_adv: float = 4.0
    lambda_tv: float = 1e-6
    uncertainty_targets: tuple = (2, 4)
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 0.0  # 0 disables clipping; escape hatch at e.g. 10.0

    def __post_init__(self):
        self.uncertainty_targets = tuple(int(t) for t in self.uncertainty_targets)
        weights = (self.lambda_1, self.lambda_2, self.lambda_3, self.lambda_4,
                   self.lambda_adv, self.lambda_tv)
        if any(not math.isfinite(w) or w < 0 for w in weights):
            raise ValueError("loss weights must be finite and nonnegative")
        if any(t not in (1, 2, 3, 4) for t in self.uncertainty_targets):
            raise ValueError("uncertainty_targets must be a subset of {1,2,3,4}")
        if len(set(self.uncertainty_targets)) != len(self.uncertainty_targets):
            raise ValueError("uncertainty_targets must not repeat")

    def pixel_weight(self, index):
        return (self.lambda_1, self.lambda_2, self.lambda_3, self.lambda_4)[index - 1]


BASELINE_IDS = "ABCDEFGH"


@dataclass(frozen=True)
class AblationSpec:
    """Feature toggles of one ablation baseline.

    The eight baselines form a cumulative ladder: A/B/C vary the generator
    input, then each later letter enables exactly one extra feature.
    """

    baseline_id: str
    use_condition_image: bool
    use_semantic_input: bool
    use_cycle: bool
    use_uncertainty: bool
    use_attention_selection: bool
    use_tv: bool
    use_multiscale_pool: bool

    @property
    def two_stage(self):
        return self.use_attention_selection


def ablation_spec(baseline_id: str) -> AblationSpec:
    """Return the toggle vector of baseline ``A``..``H``."""
    bid = baseline_id.strip().upper()
    if bid not in BASELINE_IDS:
        raise ValueError(f"unknown baseline id {baseline_id!r}, expected one of A..H")
    rank = BASELINE_IDS.index(bid)
    return AblationSpec(
        baseline_id=bid,
        use_condition_image=(bid != "B"),
        use_semantic_input=(bid != "A"),
        use_cycle=rank >= 3,
        use_uncertainty=rank >= 4,
        use_attention_selection=rank >= 5,
        use_tv=rank >= 6,
        use_multiscale_pool=rank >= 7,
    )


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def attention_config_from_dict(d: dict) -> AttentionConfig:
    return AttentionConfig(**d)


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**d)

"""Two-stage cross-view image translation with multi-channel attention
selection, cycled semantic guidance and uncertainty-weighted pixel losses."""

from .config import AblationSpec, AttentionConfig, TrainConfig, ablation_spec
from .data import (AugmentConfig, DatasetManifest, PairedSample, SynthSpec,
                   augment, generate_synthetic, load_dataset, load_manifest)
from .networks import (PatchDiscriminator, StageOneOutput, UnetGenerator,
                       build_discriminator, build_image_generator,
                       build_semantic_generator, discriminate, forward_stage1)
from .attention import (AttentionModule, SelectionOutput, forward_stage2,
                        fuse_inputs, select)
from .losses import (LossBreakdown, NonFiniteLossError, adversarial_losses,
                     pixel_l1_map, total_objective, tv_regularization,
                     uncertainty_guided)
from .metrics import (MetricsReport, compute_report, inception_score, kl_score,
                      psnr, segmentation_scores, sharpness_difference, ssim,
                      topk_accuracy)
from .trainer import (TrainState, attention_sweep, build_ablation, build_state,
                      load_checkpoint, run_training, save_checkpoint, train_step)

__version__ = "0.1.0"

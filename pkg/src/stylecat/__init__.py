"""Decoupled style/category encoders over a frozen backbone, with a toy
guided diffusion model and a gradient-checked autodiff core."""

from .tensor import Tensor, ShapeError, backward, finite_diff_grad, no_grad
from .backbone import FrozenWeights, Vocab, embed_image, embed_text, embed_prompt_prototypes
from .encoders import AdapterParams, EncoderBundle, adapter_forward, blend
from .losses import (
    LossConfig,
    category_labeled_loss,
    category_triplet_loss,
    ce_loss,
    class_logits,
    confusion_loss,
    style_labeled_loss,
    style_triplet_loss,
)
from .captions import CategoryLexicon, DecomposedCaption, batch_decompose, decompose
from .datagen import SyntheticSpec, generate_classification_dataset, generate_diffusion_dataset
from .diffusion import (
    DenoiserParams,
    DiffusionSchedule,
    GuidanceCondition,
    attention,
    build_conditions,
    ddpm_train_step,
    oracle_classify,
    sample,
    split_cross_attention,
)
from .train import TrainConfig, evaluate_classification, gradcheck_suite, train_encoders

__version__ = "0.1.0"

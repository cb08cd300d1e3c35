"""Cross-modal knowledge distillation and modality-shifting fusion for
conversational emotion recognition, runnable end to end at desk scale."""

__version__ = "0.1.0"

from .autodiff import Tensor
from .dataset import (
    DatasetSplit,
    FeatureRecord,
    GeneratorConfig,
    generate,
    load_features,
    make_batches,
    save_features,
)
from .distillation import KDConfig, feature_loss, response_loss, student_loss
from .encoders import ClassifierHead, StubEncoder, classify, cross_entropy_loss, encode
from .evaluation import (
    EvalReport,
    confusion_matrix,
    default_grid_spec,
    run_ablation,
    teacher_study_spec,
    weighted_f1,
)
from .fusion import (
    FusionConfig,
    FusionParams,
    ShiftTrace,
    fuse_and_classify,
    nonverbal_attend,
    shift,
)
from .numerics import (
    AttentionParams,
    DualValue,
    kl_divergence,
    l2_norm,
    multi_head_self_attention,
    pearson_distance,
    softmax_temp,
)
from .config import RunConfig, load_config, save_config
from .training import (
    AdamW,
    TrainConfig,
    distill_students,
    gradient_check,
    train_fusion,
    train_teacher,
)

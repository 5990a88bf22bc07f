"""srlab: a desk-scale laboratory for a test-time adversarial defense.

The defense encodes several slightly shifted copies of the input, undoes
each shift on the feature map, and averages the realigned maps before the
rest of the network runs. The package bundles everything needed to study
it end to end: a float64 autodiff engine, configurable CNN classifiers
with tap points, the white-box attack suite the defense is measured
against, a differentiable stereo-matching track, and a reproducible
experiment harness with CSV/JSON/figure reports.
"""

from .actions import (
    GroupAction,
    ShiftSet,
    build_shift_set,
    inverse_rotate_features,
    inverse_shift_features,
    rotate_image,
    translate_image,
)
from .attacks import (
    AdversarialExample,
    AttackConfig,
    classification_loss,
    cw_margin,
    dense_pgd,
    fgsm,
    make_adaptive,
    pgd,
    worst_case_ensemble,
)
from .config import ExperimentConfig, config_hash, parse_config, serialize_config
from .datasets import gen_synthetic_shapes, load_mnist_idx
from .defense import DefenseConfig, ensemble_features, feature_distance, sr_forward
from .harness import run_experiment
from .models import (
    Model,
    ModelSpec,
    TapPoint,
    TrainConfig,
    WeightBundle,
    build_model,
    equivariant_probe_spec,
    load_weights,
    save_weights,
    train,
)
from .report import ExperimentReport, emit_report, load_report, report_hash
from .stereo import (
    BlockStructure,
    DisparityMap,
    StereoPair,
    block_match_oracle,
    conv_encoder,
    gen_random_dot_stereogram,
    patch_encoder,
    stereo_match,
    stereo_metrics,
    stereo_predict,
)
from .tensor import Tensor, backward, finite_diff_gradient

__version__ = "0.1.0"

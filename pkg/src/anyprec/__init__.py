"""anyprec: train one network, run it at any integer bit-width.

One set of float master weights serves every precision: weights quantize
on the fly (or by bit-shifting stored 8-bit codes at deployment), and each
bit-width keeps its own BatchNorm statistics so activations stay
well-scaled when the precision switches at runtime.
"""

from .data import Dataset, load_idx, synth_dataset, load_digits_bundle, digits_paths
from .diagnostics import (
    GradientTrace,
    HistogramReport,
    RobustnessResult,
    activation_histogram,
    bn_calibrate,
    cross_bit_robustness,
    fgsm_attack,
    record_gradient_traces,
    uca,
    uca_matrix,
)
from .errors import (
    AnyPrecError,
    ConfigError,
    DimensionError,
    DivergenceError,
    FormatError,
    InputError,
    PrecisionUnavailableError,
    UndefinedStatisticError,
    UsageError,
)
from .inference import (
    BitPlaneMatrix,
    InferenceModel,
    PackedModel,
    infer,
    integer_layer_forward,
    load_model,
    load_packed,
    pack_bitplanes,
    pack_model,
    popcount_dot,
    save_model,
    unpack_bitplanes,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_dataset_pair
from .metrics import write_metrics
from .network import (
    AnyPrecisionModel,
    ArchSpec,
    BatchNormBank,
    BatchNormState,
    batchnorm_forward,
    init_model,
    model_forward,
    parse_architecture,
)
from .quantize import (
    FULL_PRECISION,
    QuantScheme,
    QuantizedWeights,
    act_quantize_ste,
    bitshift_truncate,
    normalize_weights,
    quantize_activations,
    quantize_weights,
    weight_quantize_ste,
)
from .tensor import (
    Tensor,
    conv2d,
    kl_divergence,
    matmul,
    maxpool2d,
    relu,
    softmax_cross_entropy,
)
from .training import (
    LossRecord,
    OptimizerState,
    TrainConfig,
    TrainResult,
    adam_update,
    evaluate,
    lr_schedule,
    recursive_kd_losses,
    sgd_momentum_update,
    train,
    train_step,
)

__version__ = "0.1.0"

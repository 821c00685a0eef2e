"""Training small networks with SGD while tracing generalization-bound components."""

from .bounds import (
    BoundObserver,
    BoundOptions,
    BoundTrace,
    GaussianConvolutionCase,
    GradStats,
    RateModel,
    RateSweepResult,
    StepStats,
    clipped_bounded_bound,
    clipped_bounded_general,
    clipped_subgaussian_bound,
    clipped_subgaussian_general,
    delta_factor,
    flatness_estimate,
    flatness_t1pm,
    grad_variance_trace,
    hutchinson_trace,
    kl_gaussian,
    lemma1_check,
    rate_sweep,
    traj_bounded_bound,
    traj_bounded_general,
    traj_subgaussian_bound,
    traj_subgaussian_general,
    tv_gaussian_1d,
    zeta_factor,
)
from .data import (
    BatchSampler,
    Dataset,
    load_mnist_idx,
    next_batch,
    save_idx,
    split_dataset,
    synth_digit_images,
    synth_gaussian_mixture,
    take_subset,
)
from .estimator import BoundTracedMLPClassifier
from .exceptions import (
    ConfigError,
    GenboundError,
    IdxDimensionError,
    IdxFormatError,
    IdxMagicError,
    IdxTruncatedError,
    NonFiniteLossError,
    ShapeError,
)
from .nn import (
    CrossEntropy,
    MlpModel,
    PureQuadratic,
    TruncatedCrossEntropy,
    flatten_params,
    init_mlp,
    loss_eval,
    loss_gradient,
    mlp_backward,
    mlp_forward,
    per_sample_grad_stats,
    per_sample_gradients,
    set_flat_params,
)
from .optim import (
    EpochSnapshot,
    NoiseSchedule,
    SurrogateState,
    TrainConfig,
    TrainResult,
    clip_gradient,
    run_training,
    sample_noise,
    sgd_step,
    t1pm_virtual,
    t2pm_virtual,
)
from .quadrature import QuadratureSpec, adaptive_simpson
from .rng import StreamKey, make_rng

__version__ = "0.1.0"

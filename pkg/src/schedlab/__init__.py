"""schedlab: step-size schedules, warm-restart SGD, and kernel
binary-classification benchmarks with numerical bound checks."""

from .errors import FetchError, TrainingError, ValidationError
from .schedules import (
    LemmaReport,
    LemmaSweep,
    ScheduleKind,
    ScheduleSpec,
    eta,
    lemma_sweep,
    partial_sums,
    verify_lemma1,
    verify_lemma2,
)
from .data import (
    SparseDataset,
    SparseExample,
    SplitSpec,
    fetch_dataset,
    minibatch_indices,
    normalize_labels,
    parse_libsvm,
    serialize_libsvm,
    split,
    synthetic_blobs,
)
from .objectives import (
    KernelClassifier,
    KernelObjective,
    KernelScorer,
    MlpObjective,
    Objective,
    QuadraticBowl,
    SmallMlp,
    estimate_noise,
    estimate_smoothness,
    finite_diff_check,
    grad_norm_sq,
    kernel_loss_and_grad,
    mlp_loss_and_grad,
    rbf_kernel,
)
from .optim import (
    ArmijoResult,
    MetricTrace,
    OptimizerKind,
    OptimizerState,
    PlateauController,
    TrainConfig,
    adam_step,
    armijo_search,
    monitor_descent,
    nesterov_step,
    plateau_update,
    run_inner,
    run_warm_restarts,
    sample_output_iterate,
    sgd_step,
)
from .bench import (
    ComparisonResult,
    ExperimentConfig,
    RateEstimate,
    RunRecord,
    check_lemmas,
    compare_schedules,
    config_hash,
    emit,
    estimate_rate,
    load_config,
    rate_experiment,
    run_experiment,
)

__version__ = "0.1.0"

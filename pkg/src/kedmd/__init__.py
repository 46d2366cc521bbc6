"""Kernel dictionary learning for kernel-based extended DMD.

Fits finite Koopman operator approximations from snapshot data using
dictionaries of kernel sections, optimizes a normalized weighted sum of
primitive kernels by stochastic gradient descent, prunes unimportant
primitives, and evaluates spectra, residuals, and trajectory predictions.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DegenerateKernelError,
    DivergedError,
    KedmdError,
    NumericError,
    TrainingAbortError,
    VariantError,
)
from .kernels import (
    CosineKernel,
    EmbeddedRBFKernel,
    LinearKernel,
    NNGPKernel,
    ParamGradient,
    RBFKernel,
    WeightedKernelSum,
    make_primitive,
)
from .koopman import (
    EigenpairReport,
    EquivalenceReport,
    KoopmanModel,
    SnapshotSet,
    eigenfunctions_at,
    eigenpair_reports,
    equivalence_check,
    fit_modes,
    fit_projection,
    fit_sk,
    fit_tr,
    map_spectrum,
    predict,
    residual,
    residuals,
)
from .losses import (
    LossReport,
    LossWeights,
    combined_loss,
    loss_dict,
    loss_eig,
    loss_eig_pred,
    loss_pred,
    loss_tr_suite,
    regularization,
)
from .systems import (
    DuffingSpec,
    KseSpec,
    ModuloSpec,
    TrajectoryBundle,
    duffing_trajectory,
    generate_dataset,
    kse_solve,
    modulo_step,
    modulo_true_eigenvalues,
)
from .training import (
    TrainConfig,
    TrainHistory,
    fine_tune,
    make_batches,
    prune_and_retrain,
    schedule_lookup,
    subsample_centers,
    train,
)

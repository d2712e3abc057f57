"""Off-policy evaluation with variance-optimal mixtures of per-policy
estimators, plus a simulated recommender benchmark."""

from .core import (
    BehaviorDataset,
    DataFormatError,
    MultiDataset,
    RatioVector,
    Step,
    SupportViolationError,
    Trajectory,
    ValidationConfig,
    ValidationError,
    half_split,
    importance_ratios,
    load_multidataset,
    save_multidataset,
    split_multidataset,
    validate,
)
from .estimators import (
    ComponentEstimate,
    DegenerateWeightsError,
    DiscountConfig,
    Family,
    components,
    components_dr,
    components_is,
    components_swdr,
    components_swis,
    estimate_dr,
    estimate_is,
    estimate_swdr,
    estimate_swis,
    estimate_wdr,
    estimate_wis,
    prepare_table,
    prepare_tables,
)
from .mixture import (
    MixtureEstimate,
    MixtureWeights,
    alphabeta_weights,
    horizon_weights,
    mix_alphabeta,
    mix_horizon,
    mix_naive,
    naive_weights,
)
from .variance import CovarianceEstimate, assemble_cov, delta_method_variance

__version__ = "0.1.0"

"""Per-point data value scaling laws.

Measure how each training point's marginal contribution to model quality
decays with dataset size, fit per-point power laws to the decay, and apply
the fits to data valuation and size-aware point selection.
"""

import os

# Bit-reproducible stores require a fixed reduction order; cap BLAS threading
# before numpy loads (no-op when the host already configured it).
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from .amortized import (  # noqa: E402
    AmortizedConfig,
    AmortizedNet,
    load_net,
    predict_params,
    save_net,
    train_amortized,
)
from .data import (  # noqa: E402
    CsvSchema,
    DataPoint,
    Dataset,
    DatasetView,
    SubsetSpec,
    Task,
    load_csv,
    sample_subset,
    synth_classification,
    synth_linear,
)
from .fitting import (  # noqa: E402
    LikelihoodConfig,
    ScalingFit,
    analytic_c,
    analytic_sigma2,
    fit_likelihood,
    fit_loglinear,
    fit_variance_law,
    nll,
    predict_psi,
    r2_report,
    read_fits_jsonl,
    write_fits_jsonl,
)
from .models import (  # noqa: E402
    ModelSpec,
    TrainedModel,
    TrainingError,
    decision_boundary_distance,
    eval_accuracy,
    eval_loss,
    train,
)
from .sampler import (  # noqa: E402
    CardinalityGrid,
    SampleRecord,
    SampleStore,
    estimate_psi,
    estimate_variance,
    run_campaign,
    sample_contribution,
)
from .theory import (  # noqa: E402
    LinearTheoryInstance,
    MEstimatorInstance,
    alpha_rate_check,
    linear_delta_oracle,
    linear_exact_expected_delta,
    linear_leading_term,
    mestimator_leading_term,
)
from .valuation import (  # noqa: E402
    ValuationScore,
    boundary_correlation,
    cross_model_correlation,
    point_addition_eval,
    select_points,
    shapley_from_scaling,
    shapley_monte_carlo,
)

__version__ = "0.1.0"

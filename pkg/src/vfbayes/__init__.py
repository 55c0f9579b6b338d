"""Two-stage Bayesian hierarchical models for longitudinal visual-field data.

Typical use::

    from vfbayes import data_io, stage1, stage2, evaluation

    records, truth = data_io.simulate(data_io.TruthConfig(), 20, 10, rng)
    data = data_io.ingest(records)
    fits = stage1.fit_all(data, stage1.Stage1Config.preset("desk", model=3), seed=1)
    result = stage2.run_stage2({k: f.pool for k, f in fits.items()}, stage2.Stage2Config(), 2)
"""

from .data_io import GeneratorTruth, IngestError, TruthConfig, VfRecordFile, ingest, simulate
from .diagnostics import split_rhat
from .distributions import CholeskyError, RngStream
from .evaluation import (
    DicReport,
    PppReport,
    RecoveredEffects,
    RecoveryConfig,
    compute_dic,
    gelman_discrepancy,
    ppc_individual,
    recover_random_effects,
)
from .model import (
    CovarianceSpec,
    FixedEffects,
    IndividualData,
    ModelVariant,
    Observation,
    ParameterState,
    RandomEffects,
    StructuralError,
    VarianceParams,
    censor,
    linear_predictor,
    loglik_individual,
    loglik_observation,
)
from .stage1 import SamplePool, Stage1Config, Stage1Error, fit_all, fit_individual
from .stage2 import (
    IndividualTheta,
    PopulationState,
    Stage2Config,
    Stage2Result,
    mh_update_individual,
    run_stage2,
    update_population_covariances,
    update_population_means,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

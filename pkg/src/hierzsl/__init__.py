"""hierzsl: blind zero-shot classification with hierarchies and attributes."""

__version__ = "0.1.0"

from .core import (
    AttributeMatrix,
    ClassCatalog,
    DataFormatError,
    DatasetSplit,
    DegenerateProblemError,
    FeatureSet,
    Posterior,
    validate_catalog,
)
from .hierarchy import (
    Hierarchy,
    LinkageStep,
    Node,
    NodePrediction,
    build_hierarchy,
    correlation_distance,
)
from .linear import (
    CalibratedOneVsRestClassifier,
    LinearModel,
    SigmoidCalibration,
    fit_sigmoid,
    predict_leaf_posterior,
    score_confusion_matrix,
    train_binary_linear,
)
from .attributes import (
    AttributeErrorModel,
    AttributeEstimate,
    DirectAttributeClassifier,
    class_likelihoods_ml,
    estimate_attribute_error_model,
    predict_attributes_indirect,
    rank_classes,
    rank_of_true,
)
from .decision import (
    DartsClassifier,
    MaxExpClassifier,
    TuneResult,
    darts_classify,
    darts_tune_lambda,
    debias_posterior,
    maxexp_classify,
    maxexp_tune_theta,
    topn_combine,
)
from .metrics import (
    EvalRecord,
    SweepCurve,
    SweepPoint,
    aggregate_outcomes,
    hierarchical_rank_contribution,
    info_gain_node,
    info_gain_rank,
    mra_flat,
    mra_hierarchical_rank,
    topn_eval,
)
from .synth import SynthBundle, SynthConfig, generate, nearest_prototype, oracle_bayes_rank
from .experiment import Experiment, ExperimentConfig, ExperimentError, run_experiment

__all__ = [name for name in dir() if not name.startswith("_")]

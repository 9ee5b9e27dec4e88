from .cate import (
    DIFFERENCE,
    PSEUDO_OUTCOME,
    CateEstimatorSpec,
    CateModel,
    DifferenceModel,
    PseudoOutcomeModel,
    RidgeParams,
    fit_cate,
)
from .forest import ForestModel, ForestParams, forest_fit
from .ridge import LinearModel, ridge_cv_fit, ridge_fit
from .serialize import load_cate_model, save_cate_model

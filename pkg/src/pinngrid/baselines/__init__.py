"""Data-driven baselines: ridge regression, random forest, gradient-boosted trees."""
from .linear import LinearModel, fit_linear
from .trees import (
    ForestConfig,
    ForestModel,
    GbtConfig,
    GbtModel,
    Tree,
    fit_forest,
    fit_gbt,
    fit_tree,
    model_from_dict,
    presort,
)

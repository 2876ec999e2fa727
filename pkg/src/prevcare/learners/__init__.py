"""Self-contained supervised learners: CART, boosted trees, random forest, linear."""
from .forest import ForestModel, ForestParams, fit_random_forest
from .gbdt import GbdtModel, GbdtParams, fit_gbdt, logloss
from .linear import LinearModel, fit_linear
from .serialize import MODEL_FORMAT_VERSION, dump_model, load_model, model_from_dict, model_to_dict
from .tree import Tree, TreeNode, fit_tree

__all__ = [
    "ForestModel", "ForestParams", "GbdtModel", "GbdtParams", "LinearModel", "Tree", "TreeNode",
    "MODEL_FORMAT_VERSION", "dump_model", "fit_gbdt", "fit_linear", "fit_random_forest",
    "fit_tree", "load_model", "logloss", "model_from_dict", "model_to_dict", "predict_proba",
]


def predict_proba(model, x):
    """Probability of class 1 for a feature vector (scalar) or matrix (array)."""
    import numpy as np

    x = np.asarray(x, dtype=np.float64)
    p = model.predict_proba(x)
    return float(p[0]) if x.ndim == 1 else p

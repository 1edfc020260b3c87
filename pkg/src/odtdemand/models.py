"""Model-family registry: flat hyperparameter dicts -> classifiers, and JSON loading.

A family config is the flat dict produced by the tuner (see
:func:`odtdemand.hpo.family_space`); :func:`build_model` turns it into an
unfitted classifier.
"""

from __future__ import annotations

from .neural import FittedMlp, MlpConfig
from .trees import (
    Bagging,
    BaggingConfig,
    DecisionTree,
    ForestConfig,
    KNearestNeighbors,
    KnnConfig,
    RandomForest,
    TreeConfig,
)

FAMILIES = ("rf", "bagging", "ann", "dnn")

# inner forest used when bagging's base estimator is a random forest
BAGGED_FOREST_TREES = 10
KNN_DEFAULT_K = 5

# best values reported for the two models, in the tuner's vocabulary
PAPER_CONFIGS = {
    "production": {
        "rf": {"n_estimators": 150, "criterion": "gini", "max_depth": 150, "max_features": "sqrt",
               "min_samples_leaf": 0.005362, "min_samples_split": 0.013786},
        "bagging": {"base_estimator": "knn", "n_estimators": 70, "max_features": 0.513365,
                    "max_samples": 0.9265818, "bootstrap": True, "bootstrap_features": False},
        "ann": {"hidden_activation": "tanh", "output_activation": "softmax", "initializer": "glorot_uniform",
                "dropout_rate": 0.0, "max_norm_constraint": 0.0, "neurons_per_hidden": 22,
                "batch_size": 10, "epochs": 500, "optimizer": "adadelta"},
        "dnn": {"hidden_activation": "tanh", "output_activation": "sigmoid", "initializer": "glorot_uniform",
                "dropout_rate": 0.0, "max_norm_constraint": 0.0, "neurons_per_hidden": 20,
                "batch_size": 10, "epochs": 100, "optimizer": "adadelta", "hidden_layers": 6},
    },
    "distribution": {
        "rf": {"n_estimators": 50, "criterion": "entropy", "max_depth": 40, "max_features": "sqrt",
               "min_samples_leaf": 0.0036382, "min_samples_split": 0.00452197},
        "bagging": {"base_estimator": "rf", "n_estimators": 200, "max_features": 0.307943,
                    "max_samples": 0.210654, "bootstrap": False, "bootstrap_features": False},
        "ann": {"hidden_activation": "relu", "output_activation": "softmax", "initializer": "uniform",
                "dropout_rate": 0.0, "max_norm_constraint": 0.0, "neurons_per_hidden": 15,
                "batch_size": 10, "epochs": 150, "optimizer": "adam"},
        "dnn": {"hidden_activation": "tanh", "output_activation": "sigmoid", "initializer": "normal",
                "dropout_rate": 0.0, "max_norm_constraint": 0.0, "neurons_per_hidden": 15,
                "batch_size": 20, "epochs": 300, "optimizer": "adam", "hidden_layers": 4},
    },
}


def _forest_config(config, seed):
    tree = TreeConfig(
        criterion=config.get("criterion", "gini"),
        max_depth=config.get("max_depth"),
        max_features=config.get("max_features", "sqrt"),
        min_samples_leaf=config.get("min_samples_leaf", 1),
        min_samples_split=config.get("min_samples_split", 2),
    )
    return ForestConfig(n_estimators=int(config.get("n_estimators", 100)), tree=tree, seed=seed)


def build_model(family, config, seed=0, max_epochs=None, scaling="minmax"):
    """Unfitted classifier for `family` from a flat config dict.

    `max_epochs` optionally caps neural training length (desk-scale runs);
    `scaling` applies to the scale-sensitive learners (k-NN, neural nets).
    """
    config = dict(config)
    if family == "rf":
        return RandomForest(_forest_config(config, seed))
    if family == "bagging":
        base = config.get("base_estimator", "knn")
        if base == "knn":
            base_cfg = KnnConfig(int(config.get("knn_k", KNN_DEFAULT_K)), scaling)
        elif base == "rf":
            base_cfg = ForestConfig(n_estimators=BAGGED_FOREST_TREES, tree=TreeConfig(max_features="sqrt"))
        elif base == "tree":
            base_cfg = TreeConfig()
        else:
            raise ValueError(f"unknown bagging base estimator {base!r}")
        return Bagging(BaggingConfig(
            base=base_cfg,
            n_estimators=int(config.get("n_estimators", 10)),
            max_features=float(config.get("max_features", 1.0)),
            max_samples=float(config.get("max_samples", 1.0)),
            bootstrap=bool(config.get("bootstrap", True)),
            bootstrap_features=bool(config.get("bootstrap_features", False)),
            seed=seed,
        ))
    if family in ("ann", "dnn"):
        epochs = int(config.get("epochs", 100))
        if max_epochs is not None:
            epochs = min(epochs, int(max_epochs))
        cfg = MlpConfig(
            hidden_layers=1 if family == "ann" else int(config.get("hidden_layers", 2)),
            neurons_per_hidden=int(config.get("neurons_per_hidden", 16)),
            hidden_activation=config.get("hidden_activation", "relu"),
            output_activation=config.get("output_activation", "softmax"),
            initializer=config.get("initializer", "glorot_uniform"),
            dropout_rate=float(config.get("dropout_rate", 0.0)),
            max_norm_constraint=float(config.get("max_norm_constraint", 0.0)),
            batch_size=int(config.get("batch_size", 10)),
            epochs=epochs,
            optimizer=config.get("optimizer", "adam"),
            seed=seed,
        )
        return FittedMlp(cfg, scaling)
    raise ValueError(f"unknown model family {family!r}; expected one of {FAMILIES}")


_LOADERS = {
    "tree": DecisionTree,
    "forest": RandomForest,
    "bagging": Bagging,
    "knn": KNearestNeighbors,
    "mlp": FittedMlp,
}


def model_to_dict(model, family=None) -> dict:
    doc = model.to_dict()
    if family is not None:
        doc["model_family"] = family
    return doc


def model_from_dict(doc):
    try:
        loader = _LOADERS[doc["family"]]
    except KeyError:
        raise ValueError(f"not a serialized model: family {doc.get('family')!r}") from None
    return loader.from_dict(doc)

from .forest import RandomForest
from .mlp import Mlp
from .selection import CvResult, TuneResult, cross_validate, expand_grid, stratified_folds, tune
from .trained import FeatureConfig, LabelCodec, ModelSpec, TrainedModel
from .tree import DecisionTree, TreeArrays, grow_tree, warmup

__all__ = [
    "CvResult", "DecisionTree", "FeatureConfig", "LabelCodec", "Mlp", "ModelSpec", "RandomForest",
    "TrainedModel", "TreeArrays", "TuneResult", "cross_validate", "expand_grid", "grow_tree",
    "stratified_folds", "tune", "warmup",
]

"""A classifier bundled with everything needed to score new feature rows."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import VrsniffError
from ..features import FeatureDataset, KnnReference, Standardizer
from ..outputs import write_atomic
from .forest import RandomForest
from .mlp import Mlp
from .tree import DecisionTree

FORMAT_VERSION = 1
MODEL_TYPES = {"tree": DecisionTree, "forest": RandomForest, "mlp": Mlp}


@dataclass(frozen=True)
class LabelCodec:
    labels: tuple[str, ...]

    @classmethod
    def fit(cls, labels) -> "LabelCodec":
        return cls(tuple(sorted(set(labels))))

    def __len__(self) -> int:
        return len(self.labels)

    def encode(self, labels) -> np.ndarray:
        index = {lab: i for i, lab in enumerate(self.labels)}
        try:
            return np.array([index[lab] for lab in labels], dtype=np.int64)
        except KeyError as exc:
            raise VrsniffError("UNKNOWN_LABEL", f"label {exc.args[0]!r} not seen in training") from None

    def decode(self, codes) -> np.ndarray:
        return np.array([self.labels[c] for c in codes], dtype=object)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_TYPES:
            raise VrsniffError("BAD_CONFIG", f"unknown model kind {self.kind!r}; choose from {sorted(MODEL_TYPES)}")

    def build(self):
        return MODEL_TYPES[self.kind](**self.params)

    def with_params(self, **params) -> "ModelSpec":
        return ModelSpec(self.kind, {**self.params, **params})


@dataclass(frozen=True)
class FeatureConfig:
    window_s: int = 5
    stride_s: int = 1
    centered: bool = True
    cdf: bool = False
    split_direction: bool = False
    knn_k: int = 3


class TrainedModel:
    """Estimator + label codec + f7 reference + (for the MLP) input scaling.

    Trees see raw features; the MLP sees features standardised with statistics
    of the training rows. f7 is always recomputed against the training rows.
    """

    def __init__(self, estimator, codec: LabelCodec, columns: tuple[str, ...], target: str,
                 knn: KnnReference, input_scaler: Standardizer | None, feature_config: FeatureConfig,
                 knn_rows: np.ndarray):
        self.estimator = estimator
        self.codec = codec
        self.columns = tuple(columns)
        self.target = target
        self.knn = knn
        self.input_scaler = input_scaler
        self.feature_config = feature_config
        self._knn_rows = knn_rows

    @property
    def kind(self) -> str:
        return self.estimator.kind

    @classmethod
    def fit(cls, train: FeatureDataset, spec: ModelSpec, target: str = "activity",
            feature_config: FeatureConfig | None = None) -> "TrainedModel":
        if len(train) == 0:
            raise VrsniffError("EMPTY_DATASET", "no training rows")
        cfg = feature_config or FeatureConfig(cdf="f13" in train.columns, split_direction="f1_up" in train.columns)
        y = train.labels(target)
        if any(lab is None for lab in y):
            raise VrsniffError("BAD_CONFIG", f"training rows lack a {target} label")
        codec = LabelCodec.fit(y)
        knn = KnnReference(train, cfg.knn_k)
        train = cls._with_knn(train, knn, exclude_self=True)
        X = train.X
        scaler = None
        if spec.kind == "mlp":
            scaler = Standardizer.fit(X)
            X = scaler.transform(X)
        estimator = spec.build().fit(X, codec.encode(y), len(codec))
        return cls(estimator, codec, train.columns, target, knn, scaler, cfg, train.knn_inputs.copy())

    @staticmethod
    def _with_knn(ds: FeatureDataset, knn: KnnReference, exclude_self: bool = False) -> FeatureDataset:
        X = ds.X.copy()
        X[:, ds.col("f7")] = knn.distances(ds.knn_inputs, exclude_self)
        return replace(ds, X=X, standardization=knn.standardizer)

    def prepare(self, ds: FeatureDataset) -> np.ndarray:
        """Feature matrix exactly as the estimator consumes it."""
        if tuple(ds.columns) != self.columns:
            raise VrsniffError("ARITY_MISMATCH",
                               f"model expects {len(self.columns)} columns {self.columns}, got {tuple(ds.columns)}")
        X = self._with_knn(ds, self.knn).X
        return self.input_scaler.transform(X) if self.input_scaler is not None else X

    def predict_proba(self, ds: FeatureDataset) -> np.ndarray:
        return self.estimator.predict_proba(self.prepare(ds))

    def predict(self, ds: FeatureDataset) -> np.ndarray:
        return self.codec.decode(self.predict_proba(ds).argmax(axis=1))

    # ---- persistence ----------------------------------------------------

    def to_json(self) -> dict:
        return {
            "header": {
                "format_version": FORMAT_VERSION,
                "model_kind": self.kind,
                "label_codec": list(self.codec.labels),
                "feature_arity": len(self.columns),
                "columns": list(self.columns),
                "target": self.target,
                "standardization": {
                    "knn": self.knn.standardizer.to_json(),
                    "inputs": self.input_scaler.to_json() if self.input_scaler is not None else None,
                },
                "feature_config": asdict(self.feature_config),
                "params": self.estimator.params(),
            },
            "body": {
                "knn_reference": self._knn_rows.tolist(),
                "estimator": self.estimator.payload(),
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainedModel":
        try:
            head, body = doc["header"], doc["body"]
            version = head["format_version"]
        except (KeyError, TypeError):
            raise VrsniffError("BAD_MODEL", "not a vrsniff model file") from None
        if version != FORMAT_VERSION:
            raise VrsniffError("BAD_MODEL_VERSION", f"model format {version}, this build reads {FORMAT_VERSION}")
        codec = LabelCodec(tuple(head["label_codec"]))
        cfg = FeatureConfig(**head["feature_config"])
        rows = np.asarray(body["knn_reference"], dtype=float)
        knn = KnnReference(rows, cfg.knn_k, Standardizer.from_json(head["standardization"]["knn"]))
        inputs = head["standardization"]["inputs"]
        estimator = MODEL_TYPES[head["model_kind"]].from_payload(head["params"], body["estimator"], len(codec))
        return cls(estimator, codec, tuple(head["columns"]), head["target"], knn,
                   Standardizer.from_json(inputs) if inputs else None, cfg, rows)

    def save(self, path: str | Path) -> None:
        write_atomic(path, json.dumps(self.to_json(), separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

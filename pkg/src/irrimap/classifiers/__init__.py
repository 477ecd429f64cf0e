"""Classifier suite behind one interface: rule-based reference, random
forest, gradient-boosted trees, and the transformer-style sequence network.

A trained model carries its variant tag, parameters, standardization and
input-mode metadata; model files are JSON metadata plus a little-endian
float64 parameter blob.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import admissibility
from .. import timeseries as ts
from . import network
from .forest import ForestModel, ForestTree, fit_random_forest
from .gbdt import GBDTModel, Tree, fit_gbdt
from .network import NetworkConfig

VARIANTS = ("reference", "random_forest", "gbdt", "transformer")
INPUT_MODES = ("ALL_BANDS", "EVI", "EVI_SHIFTED")
MODEL_FORMAT_VERSION = 1


@dataclass
class ClassifierSpec:
    variant: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown classifier variant {self.variant!r}")


@dataclass
class TrainedModel:
    variant: str
    input_mode: str
    layers: list[str]
    timesteps: int
    standardizer_mean: np.ndarray      # (L,)
    standardizer_std: np.ndarray       # (L,)
    payload: object                    # ForestModel | GBDTModel | network params | None
    network_config: NetworkConfig | None = None
    training_meta: dict = field(default_factory=dict)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return ts.standardize_batch(features, self.standardizer_mean,
                                    self.standardizer_std)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """Class-1 probability for an (N, L, T) batch in raw units."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 3 or features.shape[1] != len(self.layers) \
                or features.shape[2] != self.timesteps:
            raise ValueError(
                f"batch shape {features.shape} does not match model input "
                f"({len(self.layers)} layers x {self.timesteps} steps)")
        if self.variant == "reference":
            # Rule-based classifier works on raw index values; sample-level
            # slope is unknown, so the slope rule passes trivially here.
            grid = ts.TimeGrid(timesteps=self.timesteps)
            out = np.array([
                float(admissibility.reference_classify(s[0], 0.0, grid))
                for s in features])
            return out
        x = self.standardize(features)
        if self.variant == "transformer":
            return network.predict_proba(self.payload, x, self.network_config)
        flat = x.reshape(x.shape[0], -1)
        return self.payload.predict_proba(flat)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.predict_proba(features) >= 0.5).astype(np.int64)


def _blob_arrays(model: TrainedModel) -> dict[str, np.ndarray]:
    arrays = {"standardizer_mean": model.standardizer_mean,
              "standardizer_std": model.standardizer_std}
    if model.variant == "transformer":
        for name, p in model.payload.items():
            arrays[f"param:{name}"] = p
    elif model.variant == "gbdt":
        for i, tree in enumerate(model.payload.trees):
            arrays[f"tree{i}:feature"] = tree.feature.astype(np.float64)
            arrays[f"tree{i}:threshold"] = tree.threshold
            arrays[f"tree{i}:left"] = tree.left.astype(np.float64)
            arrays[f"tree{i}:right"] = tree.right.astype(np.float64)
            arrays[f"tree{i}:value"] = tree.value
    elif model.variant == "random_forest" and model.payload.constant_p1 is None:
        for i, tree in enumerate(model.payload.trees):
            arrays[f"tree{i}:feature"] = tree.feature.astype(np.float64)
            arrays[f"tree{i}:threshold"] = tree.threshold
            arrays[f"tree{i}:left"] = tree.left.astype(np.float64)
            arrays[f"tree{i}:right"] = tree.right.astype(np.float64)
            arrays[f"tree{i}:leaf_p1"] = tree.leaf_p1
    return arrays


def save_model(model: TrainedModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = _blob_arrays(model)
    manifest = []
    blob = bytearray()
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        manifest.append({"name": name, "shape": list(arr.shape)})
        blob.extend(arr.astype("<f8").tobytes())
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "variant": model.variant,
        "input_mode": model.input_mode,
        "layers": model.layers,
        "timesteps": model.timesteps,
        "training_meta": model.training_meta,
        "arrays": manifest,
    }
    if model.variant == "transformer":
        cfg = model.network_config
        meta["network"] = {"input_layers": cfg.input_layers, "timesteps": cfg.timesteps,
                           "d_model": cfg.d_model, "heads": cfg.heads,
                           "ffn_dim": cfg.ffn_dim, "penultimate": cfg.penultimate}
    elif model.variant == "gbdt":
        meta["gbdt"] = {"base_score": model.payload.base_score,
                        "shrinkage": model.payload.shrinkage,
                        "n_trees": len(model.payload.trees)}
    elif model.variant == "random_forest":
        meta["forest"] = {"n_trees": 0 if model.payload.constant_p1 is not None
                          else len(model.payload.trees),
                          "constant_p1": model.payload.constant_p1}
    with open(directory / "model.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    with open(directory / "params.bin", "wb") as fh:
        fh.write(bytes(blob))


def load_model(directory) -> TrainedModel:
    directory = Path(directory)
    with open(directory / "model.json") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unknown model format version {meta.get('format_version')!r}")
    raw = np.fromfile(directory / "params.bin", dtype="<f8")
    arrays = {}
    offset = 0
    for entry in meta["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = raw[offset:offset + size].reshape(entry["shape"])
        offset += size
    if offset != raw.size:
        raise ValueError("parameter blob size does not match the manifest")

    variant = meta["variant"]
    payload: object = None
    network_config = None
    if variant == "transformer":
        net = meta["network"]
        network_config = NetworkConfig(**net)
        payload = {name[len("param:"):]: arr for name, arr in arrays.items()
                   if name.startswith("param:")}
    elif variant == "gbdt":
        trees = []
        for i in range(meta["gbdt"]["n_trees"]):
            trees.append(Tree(
                feature=arrays[f"tree{i}:feature"].astype(np.int32),
                threshold=arrays[f"tree{i}:threshold"],
                left=arrays[f"tree{i}:left"].astype(np.int32),
                right=arrays[f"tree{i}:right"].astype(np.int32),
                value=arrays[f"tree{i}:value"]))
        payload = GBDTModel(base_score=meta["gbdt"]["base_score"],
                            shrinkage=meta["gbdt"]["shrinkage"], trees=trees,
                            best_round=meta["gbdt"]["n_trees"])
    elif variant == "random_forest":
        const = meta["forest"]["constant_p1"]
        if const is not None:
            payload = ForestModel(constant_p1=const)
        else:
            trees = []
            for i in range(meta["forest"]["n_trees"]):
                trees.append(ForestTree(
                    feature=arrays[f"tree{i}:feature"].astype(np.int64),
                    threshold=arrays[f"tree{i}:threshold"],
                    left=arrays[f"tree{i}:left"].astype(np.int64),
                    right=arrays[f"tree{i}:right"].astype(np.int64),
                    leaf_p1=arrays[f"tree{i}:leaf_p1"]))
            payload = ForestModel(trees=trees)
    return TrainedModel(
        variant=variant, input_mode=meta["input_mode"], layers=meta["layers"],
        timesteps=meta["timesteps"],
        standardizer_mean=arrays["standardizer_mean"],
        standardizer_std=arrays["standardizer_std"],
        payload=payload, network_config=network_config,
        training_meta=meta.get("training_meta", {}))


__all__ = [
    "ClassifierSpec", "TrainedModel", "NetworkConfig", "VARIANTS", "INPUT_MODES",
    "fit_random_forest", "fit_gbdt", "ForestModel", "GBDTModel", "network",
    "save_model", "load_model",
]

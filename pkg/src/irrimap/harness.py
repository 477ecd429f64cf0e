"""Training orchestration and evaluation: balancing weights, the augmented
epoch loop with min-validation-F1 checkpointing, metrics, withheld-region
sweeps, prediction alignment, and the polygon-fraction ablation.

The primary robustness metric throughout is the F1 score on test data of
regions withheld from training; networks checkpoint on the minimum
validation F1 across included regions so no region is sacrificed for mean
performance.
"""

from __future__ import annotations

import copy
import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import timeseries as ts
from .classifiers import (ClassifierSpec, NetworkConfig, TrainedModel,
                          fit_gbdt, fit_random_forest, network)
from .labels import split_polygons
from .raster_io import SampleTable

BATCH_SIZE = 256
MAX_EPOCHS = 30
EPOCH_PATIENCE = 10
LEARNING_RATE = 1e-4
GBDT_CARVE_FRACTION = 0.10

TRAINABLE = "trainable"
HOLDOUT_ONLY = "holdout_only"


@dataclass
class Dataset:
    features: np.ndarray        # (N, L, T)
    labels: np.ndarray          # (N,) in {0, 1}
    weights: np.ndarray         # (N,) positive
    regions: np.ndarray         # (N,) str tags

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.regions = np.asarray(self.regions, dtype=object)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.weights.shape != (n,) \
                or self.regions.shape != (n,):
            raise ValueError("dataset arrays disagree on sample count")
        if n and (not np.isfinite(self.weights).all() or (self.weights <= 0).any()):
            raise ValueError("weights must be finite and positive")

    def __len__(self):
        return self.features.shape[0]


@dataclass
class RegionDataset:
    name: str
    role: str                   # trainable | holdout_only
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    f1: float
    accuracy_irrigated: float | None       # TP / (TP + FN)
    accuracy_non_irrigated: float | None   # TN / (TN + FP)
    f1_degenerate: bool = False


@dataclass
class TrainingRunConfig:
    input_mode: str = "EVI"
    batch_size: int = BATCH_SIZE
    max_epochs: int = MAX_EPOCHS
    patience: int = EPOCH_PATIENCE
    learning_rate: float = LEARNING_RATE
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.input_mode not in ("ALL_BANDS", "EVI", "EVI_SHIFTED"):
            raise ValueError(f"unknown input mode {self.input_mode!r}")


@dataclass
class SweepRow:
    subset: tuple[str, ...]
    withheld: str
    f1: float
    accuracy_irrigated: float | None
    accuracy_non_irrigated: float | None
    counts: ConfusionCounts


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def rows_for_size(self, x: int) -> list[SweepRow]:
        return [r for r in self.rows if len(r.subset) == x]

    def aggregate(self) -> dict[int, dict]:
        out = {}
        for x in sorted({len(r.subset) for r in self.rows}):
            f1s = np.array([r.f1 for r in self.rows_for_size(x)])
            out[x] = {"n": int(f1s.size), "mean_f1": float(f1s.mean()),
                      "p10_f1": float(np.percentile(f1s, 10))}
        return out


def input_layers(table: SampleTable, input_mode: str) -> list[str]:
    if input_mode in ("EVI", "EVI_SHIFTED"):
        if "EVI" not in table.layers:
            raise ValueError("table has no EVI layer")
        return ["EVI"]
    bands = [name for name in table.layers if name != "EVI"]
    if not bands:
        raise ValueError("ALL_BANDS mode needs spectral band layers")
    return bands


def build_region_datasets(table: SampleTable, input_mode: str = "EVI",
                          holdout_regions: tuple[str, ...] = ()
                          ) -> list[RegionDataset]:
    """Per-region train/val/test datasets from a labeled sample table."""
    layers = input_layers(table, input_mode)
    layer_idx = [table.layers.index(name) for name in layers]
    features = table.series[:, layer_idx, :]
    out = []
    for name in sorted(set(table.regions.tolist())):
        in_region = table.regions == name
        splits = {}
        for split in ("train", "val", "test"):
            sel = in_region & (table.splits == split)
            splits[split] = Dataset(features[sel], table.classes[sel],
                                    np.ones(int(sel.sum())),
                                    np.full(int(sel.sum()), name, dtype=object))
        role = HOLDOUT_ONLY if name in holdout_regions else TRAINABLE
        out.append(RegionDataset(name, role, splits["train"], splits["val"],
                                 splits["test"]))
    return out


def compute_weights(labels_by_region: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-sample weights: region balance times within-region class balance.

    Class weight in region r for class c is n_r / (2 * n_rc); region weight
    is max_r n_r / n_r; the sample weight is their product.
    """
    sizes = {name: len(y) for name, y in labels_by_region.items()}
    if not sizes or min(sizes.values()) == 0:
        raise ValueError("every region needs at least one sample")
    max_n = max(sizes.values())
    out = {}
    for name, y in labels_by_region.items():
        y = np.asarray(y)
        n_r = sizes[name]
        region_w = max_n / n_r
        w = np.empty(n_r, dtype=np.float64)
        for c in (0, 1):
            n_rc = int((y == c).sum())
            if n_rc == 0:
                warnings.warn(f"region {name} has no class-{c} samples; "
                              "weighting the present class only")
                continue
            w[y == c] = region_w * n_r / (2.0 * n_rc)
        out[name] = w
    return out


def f1_score(counts: ConfusionCounts) -> float:
    """F1 = TP / (TP + (FP + FN) / 2); degenerate all-zero case returns 1."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp == 0 and fp == 0 and fn == 0:
        warnings.warn("F1 undefined (no positives involved); returning 1")
        return 1.0
    if tp == 0:
        return 0.0
    return tp / (tp + 0.5 * (fp + fn))


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    return ConfusionCounts(
        tp=int((pred & truth).sum()), fp=int((pred & ~truth).sum()),
        fn=int((~pred & truth).sum()), tn=int((~pred & ~truth).sum()))


def metrics_from_predictions(pred: np.ndarray, truth: np.ndarray) -> MetricsReport:
    counts = confusion(pred, truth)
    degenerate = counts.tp == 0 and counts.fp == 0 and counts.fn == 0
    with warnings.catch_warnings():
        if degenerate:
            warnings.simplefilter("ignore")
        f1 = f1_score(counts)
    acc_irr = (counts.tp / (counts.tp + counts.fn)
               if counts.tp + counts.fn else None)
    acc_non = (counts.tn / (counts.tn + counts.fp)
               if counts.tn + counts.fp else None)
    return MetricsReport(counts, f1, acc_irr, acc_non, degenerate)


def _trainable(regions: list[RegionDataset]) -> list[RegionDataset]:
    kept = [r for r in regions if r.role == TRAINABLE]
    assert all(r.role == TRAINABLE for r in kept)
    if not kept:
        raise ValueError("no trainable regions")
    return kept


def _standardizer(regions: list[RegionDataset]):
    feats = np.concatenate([r.train.features for r in regions])
    if feats.shape[0] == 0:
        raise ValueError("no training samples to fit the standardizer")
    return ts.fit_standardizer(feats)


def _f1_of_predictions(proba: np.ndarray, labels: np.ndarray) -> float:
    report = metrics_from_predictions(proba >= 0.5, labels == 1)
    return report.f1


def train_network_loop(regions: list[RegionDataset], spec: ClassifierSpec,
                       config: TrainingRunConfig, layers: list[str]
                       ) -> tuple[TrainedModel, dict]:
    """Epoch loop: one batch per region per step, concatenated and shuffled;
    checkpoint whenever the minimum validation F1 over regions improves;
    stop on patience or the epoch cap and restore the best checkpoint."""
    included = _trainable(regions)
    shifted = config.input_mode == "EVI_SHIFTED"
    mean, std = _standardizer(included)
    weights = compute_weights({r.name: r.train.labels for r in included})

    net_kwargs = {k: v for k, v in spec.params.items()
                  if k in ("d_model", "heads", "ffn_dim", "penultimate")}
    net_cfg = NetworkConfig(input_layers=len(layers),
                            timesteps=included[0].train.features.shape[2],
                            **net_kwargs)
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    # float32 training: deterministic and fast; float64 is reserved for
    # gradient verification.
    params = network.init_params(net_cfg, seed=seeds[0], dtype=np.float32)
    adam = network.AdamState()
    batch_rng = np.random.default_rng(seeds[1])
    shift_rng = np.random.default_rng(seeds[2])

    std_train = [ts.standardize_batch(r.train.features, mean, std).astype(np.float32)
                 for r in included]
    std_val = [ts.standardize_batch(r.val.features, mean, std).astype(np.float32)
               for r in included]

    batch = config.batch_size
    steps_per_epoch = max(
        int(np.ceil(len(r.train) / batch)) for r in included)
    cursors = [np.array([], dtype=np.int64) for _ in included]

    best_min_f1 = -np.inf
    best_params = copy.deepcopy(params)
    best_epoch = 0
    history = {"epochs": [], "best_epoch": 0, "best_min_val_f1": None,
               "improved_after_first_epoch": True}

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for _ in range(steps_per_epoch):
            xs, ys, ws = [], [], []
            for ri, region in enumerate(included):
                n = len(region.train)
                take = min(batch, n)
                while cursors[ri].size < take:
                    cursors[ri] = np.concatenate(
                        [cursors[ri], batch_rng.permutation(n)])
                idx, cursors[ri] = cursors[ri][:take], cursors[ri][take:]
                x = std_train[ri][idx]
                if shifted:
                    x = ts.shift_batch(x, ts.draw_shifts(shift_rng, take))
                xs.append(x)
                ys.append(region.train.labels[idx])
                ws.append(weights[region.name][idx])
            x = np.concatenate(xs)
            y = np.concatenate(ys)
            w = np.concatenate(ws)
            order = batch_rng.permutation(len(y))
            loss, grads = network.loss_and_grads(
                params, x[order], y[order], w[order], net_cfg)
            network.adam_step(params, grads, adam,
                              learning_rate=config.learning_rate)
            losses.append(loss)

        val_f1s = {}
        for ri, region in enumerate(included):
            xv = std_val[ri]
            if shifted and len(region.val):
                xv = ts.shift_batch(xv, ts.draw_shifts(shift_rng, len(region.val)))
            proba = network.predict_proba(params, xv, net_cfg)
            val_f1s[region.name] = _f1_of_predictions(proba, region.val.labels)
        min_f1 = min(val_f1s.values())
        checkpointed = min_f1 > best_min_f1
        if checkpointed:
            best_min_f1 = min_f1
            best_params = copy.deepcopy(params)
            best_epoch = epoch
        history["epochs"].append({
            "epoch": epoch, "train_loss": float(np.mean(losses)),
            "val_f1": val_f1s, "min_val_f1": min_f1,
            "checkpointed": bool(checkpointed)})
        if epoch - best_epoch >= config.patience:
            break

    history["best_epoch"] = best_epoch
    history["best_min_val_f1"] = float(best_min_f1)
    history["improved_after_first_epoch"] = best_epoch > 1
    if best_epoch <= 1:
        history["flag"] = "no improvement after the first epoch"

    best_params = {k: v.astype(np.float64) for k, v in best_params.items()}
    model = TrainedModel(
        variant="transformer", input_mode=config.input_mode, layers=list(layers),
        timesteps=net_cfg.timesteps, standardizer_mean=mean,
        standardizer_std=std, payload=best_params, network_config=net_cfg,
        training_meta={"epochs_run": len(history["epochs"]),
                       "best_epoch": best_epoch,
                       "best_min_val_f1": float(best_min_f1)})
    return model, history


def train_tree_models(regions: list[RegionDataset], spec: ClassifierSpec,
                      config: TrainingRunConfig, layers: list[str]
                      ) -> TrainedModel:
    """Tree-model fit on the merged train+val rows of the included regions.

    Weights are recomputed on the merge.  The gradient-boosted variant
    carves a seeded 10% of the merged rows as its early-stopping set.
    """
    included = _trainable(regions)
    mean, std = _standardizer(included)
    merged_x, merged_y, merged_region = [], [], []
    for region in included:
        for split in (region.train, region.val):
            if len(split):
                merged_x.append(ts.standardize_batch(split.features, mean, std))
                merged_y.append(split.labels)
                merged_region.append(split.regions)
    x = np.concatenate(merged_x)
    y = np.concatenate(merged_y)
    region_tags = np.concatenate(merged_region)

    labels_by_region = {name: y[region_tags == name]
                        for name in sorted(set(region_tags.tolist()))}
    weights_by_region = compute_weights(labels_by_region)
    w = np.empty(len(y))
    for name, wv in weights_by_region.items():
        w[region_tags == name] = wv

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    if config.input_mode == "EVI_SHIFTED":
        x = ts.shift_batch(x, ts.draw_shifts(rng, len(y)))

    flat = x.reshape(x.shape[0], -1)
    meta = {"merged_rows": int(len(y))}
    if spec.variant == "random_forest":
        payload = fit_random_forest(
            flat, y, w, n_trees=spec.params.get("n_trees", 1000),
            min_leaf=spec.params.get("min_leaf", 5), seed=spec.seed,
            n_jobs=config.threads)
    elif spec.variant == "gbdt":
        carve = max(1, int(round(GBDT_CARVE_FRACTION * len(y))))
        order = rng.permutation(len(y))
        val_idx, train_idx = order[:carve], order[carve:]
        if train_idx.size == 0:
            train_idx = val_idx
        payload = fit_gbdt(
            flat[train_idx], y[train_idx], w[train_idx],
            flat[val_idx], y[val_idx], w[val_idx],
            max_rounds=spec.params.get("max_rounds", 1000),
            max_depth=spec.params.get("max_depth", 6),
            shrinkage=spec.params.get("shrinkage", 0.1),
            patience=spec.params.get("patience", 50))
        meta["boosting_rounds"] = payload.best_round
    else:
        raise ValueError(f"{spec.variant!r} is not a tree variant")

    return TrainedModel(
        variant=spec.variant, input_mode=config.input_mode, layers=list(layers),
        timesteps=included[0].train.features.shape[2],
        standardizer_mean=mean, standardizer_std=std, payload=payload,
        training_meta=meta)


def train_model(regions: list[RegionDataset], spec: ClassifierSpec,
                config: TrainingRunConfig, layers: list[str]
                ) -> tuple[TrainedModel, dict]:
    """Dispatch to the variant's training path; reference needs no fit."""
    if spec.variant == "reference":
        t = regions[0].train.features.shape[2] if regions else 36
        model = TrainedModel(
            variant="reference", input_mode="EVI", layers=["EVI"], timesteps=t,
            standardizer_mean=np.zeros(1), standardizer_std=np.ones(1),
            payload=None)
        return model, {}
    if spec.variant == "transformer":
        return train_network_loop(regions, spec, config, layers)
    return train_tree_models(regions, spec, config, layers), {}


def evaluate(model: TrainedModel, regions: list[RegionDataset],
             split: str = "test") -> dict[str, MetricsReport]:
    """Per-region metrics on unshifted inputs of the chosen split."""
    out = {}
    for region in regions:
        data: Dataset = getattr(region, split)
        if len(data) == 0:
            raise ValueError(f"region {region.name} has an empty {split} split")
        pred = model.predict(data.features)
        out[region.name] = metrics_from_predictions(pred, data.labels == 1)
    return out


def region_sweep(regions: list[RegionDataset], sizes, spec: ClassifierSpec,
                 config: TrainingRunConfig, layers: list[str] | None = None
                 ) -> SweepResult:
    """Train on every x-subset of trainable regions, evaluate each withheld
    trainable region's test split.  Row count per size x is C(R, x)*(R-x)."""
    trainable = _trainable([r for r in regions if r.role == TRAINABLE])
    names = sorted(r.name for r in trainable)
    by_name = {r.name: r for r in trainable}
    layers = layers or ["EVI"]

    jobs = []
    for x in sizes:
        if not 1 <= x <= len(names) - 1:
            raise ValueError(f"subset size {x} out of range for {len(names)} regions")
        for subset in itertools.combinations(names, x):
            jobs.append(subset)

    def run_one(job_index: int) -> list[SweepRow]:
        subset = jobs[job_index]
        sub_seed = int(np.random.SeedSequence(
            [config.seed, job_index]).generate_state(1)[0])
        sub_spec = ClassifierSpec(spec.variant, seed=sub_seed,
                                  params=dict(spec.params))
        sub_regions = [by_name[name] for name in subset]
        model, _ = train_model(sub_regions, sub_spec, config, layers)
        rows = []
        for withheld in names:
            if withheld in subset:
                continue
            report = evaluate(model, [by_name[withheld]], split="test")[withheld]
            rows.append(SweepRow(subset, withheld, report.f1,
                                 report.accuracy_irrigated,
                                 report.accuracy_non_irrigated, report.counts))
        return rows

    result = SweepResult()
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            for rows in pool.map(run_one, range(len(jobs))):
                result.rows.extend(rows)
    else:
        for i in range(len(jobs)):
            result.rows.extend(run_one(i))
    return result


def prediction_alignment(model_a: TrainedModel, model_b: TrainedModel,
                         regions: list[RegionDataset]) -> dict:
    """Fraction of equal hard predictions per region, with both disagreement
    counts, over all splits of each region."""
    per_region = {}
    for region in regions:
        feats = np.concatenate([d.features for d in
                                (region.train, region.val, region.test) if len(d)])
        pa = model_a.predict(feats)
        pb = model_b.predict(feats)
        agree = pa == pb
        aligned_non = int(((pa == 0) & agree).sum())
        aligned_irr = int(((pa == 1) & agree).sum())
        per_region[region.name] = {
            "aligned_non_irrigated": aligned_non,
            "aligned_irrigated": aligned_irr,
            "misaligned_a0_b1": int(((pa == 0) & (pb == 1)).sum()),
            "misaligned_a1_b0": int(((pa == 1) & (pb == 0)).sum()),
            "fraction_aligned": float(agree.mean()),
        }
    fractions = [v["fraction_aligned"] for v in per_region.values()]
    return {"regions": per_region,
            "average_regional_alignment": float(np.mean(fractions))}


def resplit_table(table: SampleTable, train_fraction: float, seed: int = 0
                  ) -> SampleTable:
    """Re-split polygons with the given training fraction; complement -> test."""
    if not 0 < train_fraction < 1:
        raise ValueError("train fraction must be in (0, 1)")
    refs = {}
    for pid, region, cls in zip(table.polygon_ids, table.regions, table.classes):
        refs[int(pid)] = _PolygonRef(int(pid), region,
                                     "irrigated" if cls == 1 else "non_irrigated")
    assignment = split_polygons(list(refs.values()),
                                ratios=(train_fraction, 0.0,
                                        round(1.0 - train_fraction, 12)),
                                seed=seed)
    new_splits = np.array([assignment.split_of(int(pid))
                           for pid in table.polygon_ids], dtype=object)
    return SampleTable(table.regions, table.polygon_ids, table.classes,
                       new_splits, list(table.layers), table.series)


@dataclass
class _PolygonRef:
    id: int
    region: str
    class_name: str


def ablation_fraction(table: SampleTable, fractions, sizes,
                      spec: ClassifierSpec, config: TrainingRunConfig
                      ) -> dict[float, SweepResult]:
    """Rerun the region sweep for each training-polygon fraction.

    The complement of each fraction forms the test split (no validation
    split; the boosted-tree variant carves its own early-stop set).
    """
    if spec.variant == "transformer":
        raise ValueError("the polygon-fraction ablation uses tree variants")
    out = {}
    for fraction in fractions:
        try:
            resplit = resplit_table(table, float(fraction), seed=config.seed)
        except ValueError as exc:
            warnings.warn(f"fraction {fraction}: {exc}; skipped")
            continue
        regions = build_region_datasets(resplit, config.input_mode)
        out[float(fraction)] = region_sweep(regions, sizes, spec, config,
                                            input_layers(resplit, config.input_mode))
    return out

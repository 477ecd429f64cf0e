"""Single executable exposing the pipeline as verbs.

Verbs: synth, mosaic, unmix, curate, filter, train, sweep, diagnose (ks /
ols / saliency), infer, sieve, zonestats, composite, plus rerun, which
replays any verb from its run manifest.  Every invocation writes a
``run.json`` manifest (inputs, resolved config + hash, seed, versions) in
its output directory; re-running from the manifest reproduces the outputs.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, admissibility, diagnostics, harness, inference
from . import labels as labels_mod
from . import synth as synth_mod
from . import timeseries as ts
from . import unmix as unmix_mod
from .classifiers import ClassifierSpec, load_model, save_model
from .mosaic import MosaicConfig, SceneImage, build_stack
from .raster_io import (RasterStack, SampleTable, StackHeader, ZoneMap,
                        concat_tables, read_polygons, read_raster, read_samples,
                        read_stack, read_zone_map, write_polygons, write_raster,
                        write_samples, write_stack, write_zone_map)

DEFAULT_CONFIG = {
    "grid": {"start_date": "2020-06-01", "step_days": 10, "timesteps": 36},
    "thresholds": {"evi": 0.2, "slope_percent": 8.0, "min_area_ha": 0.1,
                   "noise_std_max": 0.15, "min_run": 2},
    "splits": {"train": 0.70, "val": 0.15, "test": 0.15},
    "shift": {"max_shift": 3},
    "gmm": {"components": 15, "tol": 1e-4, "max_iter": 200,
            "max_clean_iterations": 10},
    "forest": {"n_trees": 1000, "min_leaf": 5},
    "gbdt": {"max_rounds": 1000, "max_depth": 6, "shrinkage": 0.1,
             "patience": 50},
    "network": {"d_model": 32, "heads": 4, "ffn_dim": 64, "penultimate": True,
                "learning_rate": 1e-4},
    "training": {"batch_size": 256, "max_epochs": 30, "patience": 10},
    "mosaic": {"scene_cloud_threshold": 0.10, "pad_timesteps": 5},
    "unmix": {"endmembers": 4, "pc_dims": 3},
    "diagnostics": {"ks_dims": 10},
    "sieve": {"connectivity": 4},
    "synth": {
        "world": {"width": 96, "height": 96, "zones": 2,
                  "fields_per_zone": {"irrigated": 4, "non_irrigated": 4},
                  "field_side": [4, 8], "margin": 2, "phase_offsets": None,
                  "noise_std": 0.03, "slope_plateaus": 2},
        "regions": [{"name": "region_a", "non_irrigated": 120, "irrigated": 120,
                     "phase_offset": 0, "noise_std": 0.03, "contamination": 0.0},
                    {"name": "region_b", "non_irrigated": 120, "irrigated": 120,
                     "phase_offset": 1, "noise_std": 0.03, "contamination": 0.0}],
        "scenes": {"scenes_per_window": 2, "empty_window_fraction": 0.05,
                   "cloud_blobs": 2},
    },
}


def merge_config(defaults: dict, override: dict, path: str = "") -> dict:
    """Recursive merge that rejects keys absent from the defaults."""
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ValueError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and path != "synth":
            if not isinstance(value, dict):
                raise ValueError(f"config key {where} must be a mapping")
            out[key] = merge_config(defaults[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path) as fh:
        user = json.load(fh)
    return merge_config(DEFAULT_CONFIG, user)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _file_hash(path: Path) -> str | None:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError:
        return None


def _grid_from_config(cfg: dict) -> ts.TimeGrid:
    g = cfg["grid"]
    return ts.TimeGrid(g["start_date"], g["step_days"], g["timesteps"])


def _write_manifest(out: Path, verb: str, inputs: dict, options: dict,
                    cfg: dict, seed: int, threads: int, outputs: list[str]) -> None:
    manifest = {
        "verb": verb,
        "inputs": {k: str(Path(v).resolve()) for k, v in inputs.items()},
        "input_hashes": {k: _file_hash(v) for k, v in inputs.items()},
        "options": options,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seed": seed,
        "threads": threads,
        "outputs": sorted(outputs),
        "versions": {"irrimap": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
    }
    with open(out / "run.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# verb implementations (shared by the parser handlers and `rerun`)

def _verb_synth(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    grid = _grid_from_config(cfg)
    outputs = []
    if options.get("mode", "world") == "regions":
        tables = []
        for spec in cfg["synth"]["regions"]:
            rspec = synth_mod.RegionSpec(
                name=spec["name"],
                counts={"non_irrigated": spec.get("non_irrigated", 100),
                        "irrigated": spec.get("irrigated", 100)},
                phase_offset=spec.get("phase_offset", 0),
                noise_std=spec.get("noise_std", 0.03),
                contamination=spec.get("contamination", 0.0))
            table, _ = synth_mod.generate_region(
                rspec, seed=seed + len(tables),
                grid=grid, id_start=1 + 10_000 * len(tables))
            tables.append(table)
        write_samples(concat_tables(tables), out / "samples.csv")
        outputs.append("samples.csv")
        return outputs

    w = cfg["synth"]["world"]
    config = synth_mod.WorldConfig(
        width=w["width"], height=w["height"], zones=w["zones"],
        fields_per_zone=dict(w["fields_per_zone"]),
        field_side=tuple(w["field_side"]), margin=w["margin"],
        phase_offsets=w["phase_offsets"], noise_std=w["noise_std"],
        seed=seed, slope_plateaus=w["slope_plateaus"], grid=grid)
    world = synth_mod.generate_world(config)
    write_stack(world.stack, out / "evi")
    write_polygons(world.polygons, out / "polygons.json")
    write_zone_map(world.zones, out / "zones")
    write_raster(world.slope, out / "slope", band="slope_percent",
                 start_date=grid.start_date)
    write_raster(world.truth.astype(np.float32), out / "truth", band="irrigated",
                 start_date=grid.start_date)
    outputs += ["evi.stack.json", "evi.data.bin", "evi.mask.bin",
                "polygons.json", "zones.stack.json", "zones.data.bin",
                "zones.mask.bin", "zones.names.json", "slope.stack.json",
                "slope.data.bin", "slope.mask.bin", "truth.stack.json",
                "truth.data.bin", "truth.mask.bin"]
    if options.get("scenes"):
        sc = cfg["synth"]["scenes"]
        scenes = synth_mod.generate_scenes(
            world, pad=cfg["mosaic"]["pad_timesteps"],
            scenes_per_window=sc["scenes_per_window"],
            empty_window_fraction=sc["empty_window_fraction"],
            cloud_blobs=sc["cloud_blobs"], seed=seed + 9999)
        scene_dir = out / "scenes"
        scene_dir.mkdir(parents=True, exist_ok=True)
        for scene in scenes:
            name = f"scene_{scene.scene_id}"
            h, wdt = scene.cloud_mask.shape
            header = StackHeader(width=wdt, height=h,
                                 bands=["blue", "red", "nir"], timesteps=1,
                                 start_date=scene.acquisition_date,
                                 step_days=grid.step_days)
            valid = ~np.broadcast_to(scene.cloud_mask,
                                     (1, 3, h, wdt)).copy()
            write_stack(RasterStack(header, scene.bands[None].astype(np.float32),
                                    valid), scene_dir / name)
            with open(scene_dir / f"{name}.scene.json", "w") as fh:
                json.dump({"date": scene.acquisition_date,
                           "cloud_fraction": scene.cloud_fraction}, fh)
            outputs.append(f"scenes/{name}.scene.json")
    return outputs


def _read_scene_dir(path: Path) -> list[SceneImage]:
    scenes = []
    for sidecar in sorted(Path(path).glob("*.scene.json")):
        with open(sidecar) as fh:
            meta = json.load(fh)
        stem = sidecar.name[: -len(".scene.json")]
        stack = read_stack(sidecar.parent / stem)
        scenes.append(SceneImage(
            acquisition_date=meta["date"],
            bands=np.asarray(stack.values[0], dtype=np.float64),
            cloud_mask=~stack.valid[0, 0],
            scene_id=stem))
    if not scenes:
        raise ValueError(f"no *.scene.json files under {path}")
    return scenes


def _verb_mosaic(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    scenes = _read_scene_dir(Path(inputs["scenes"]))
    grid = _grid_from_config(cfg)
    mcfg = MosaicConfig(cfg["mosaic"]["scene_cloud_threshold"],
                        grid.step_days, cfg["mosaic"]["pad_timesteps"])
    bands = options.get("bands") or ["blue", "red", "nir"]
    stack, report = build_stack(scenes, mcfg, grid, bands)
    write_stack(stack, out / "mosaic")
    with open(out / "interp_stats.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=2)
        fh.write("\n")
    return ["mosaic.stack.json", "mosaic.data.bin", "mosaic.mask.bin",
            "interp_stats.json"]


def _stack_evi_layer(stack: RasterStack) -> np.ndarray:
    """(T, H, W) vegetation-index layer of a stack, computed when absent."""
    names = [b.lower() for b in stack.header.bands]
    if "evi" in names:
        return np.asarray(stack.values[:, names.index("evi")], dtype=np.float64)
    needed = {"blue", "red", "nir"}
    if needed.issubset(names):
        blue = stack.values[:, names.index("blue")]
        red = stack.values[:, names.index("red")]
        nir = stack.values[:, names.index("nir")]
        return np.asarray(ts.compute_evi(blue, red, nir), dtype=np.float64)
    raise ValueError("stack has neither an EVI band nor blue/red/nir bands")


def _verb_unmix(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    stack = read_stack(inputs["stack"])
    evi = _stack_evi_layer(stack)
    t, h, w = evi.shape
    cube = evi.reshape(t, -1).T
    k = min(cfg["unmix"]["pc_dims"], min(cube.shape) - 0)
    basis, scores = unmix_mod.pc_transform(cube, k)
    spec = options.get("endmembers", "auto")
    if spec == "auto":
        strategy = ("hull", cfg["unmix"]["endmembers"], k)
    else:
        pixels = [tuple(int(v) for v in part.split(",")) for part in spec.split(";")]
        strategy = ("manual", [r * w + c for r, c in pixels])
    ems = unmix_mod.select_endmembers(cube, scores, strategy)
    result = unmix_mod.unmix_lsq(cube, ems)

    m = ems.matrix.shape[1]
    frac_header = StackHeader(width=w, height=h, bands=list(ems.names),
                              timesteps=1, start_date=stack.header.start_date,
                              step_days=stack.header.step_days,
                              pixel_size_m=stack.header.pixel_size_m)
    fractions = result.fractions.T.reshape(1, m, h, w)
    write_stack(RasterStack(frac_header, fractions.astype(np.float32),
                            np.ones_like(fractions, dtype=bool)), out / "fractions")
    write_raster(result.rms.reshape(h, w).astype(np.float32), out / "rms",
                 band="rms", pixel_size_m=stack.header.pixel_size_m,
                 start_date=stack.header.start_date)
    with open(out / "rms_cdf.json", "w") as fh:
        json.dump(unmix_mod.rms_cdf(result, thresholds=[0.05, 0.10, 0.20]), fh,
                  indent=2)
        fh.write("\n")
    return ["fractions.stack.json", "fractions.data.bin", "fractions.mask.bin",
            "rms.stack.json", "rms.data.bin", "rms.mask.bin", "rms_cdf.json"]


def _verb_curate(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    stack = read_stack(inputs["stack"])
    polygons = read_polygons(inputs["polygons"])
    grid = ts.TimeGrid(stack.header.start_date, stack.header.step_days,
                       stack.header.timesteps)
    evi = _stack_evi_layer(stack)
    valid = stack.valid[:, 0]
    thr = cfg["thresholds"]["evi"]

    confirmed = []
    log = {"polygons": [], "cleaning": {}}
    for poly in polygons:
        pixels = labels_mod.rasterize_polygon(poly, stack.header.height,
                                              stack.header.width)
        if len(pixels) == 0:
            log["polygons"].append({"id": poly.id, "status": "empty"})
            continue
        median, std, spline, _ = labels_mod.polygon_median_series(evi, valid, pixels)
        ok, reason = labels_mod.confirm_polygon(
            median, std, spline, poly.class_label, grid, threshold=thr,
            noise_std_max=cfg["thresholds"]["noise_std_max"])
        log["polygons"].append({"id": poly.id, "status": "confirmed" if ok
                                else f"discarded: {reason}"})
        if ok:
            confirmed.append((poly, pixels))

    if not confirmed:
        raise ValueError("no polygon survived confirmation")

    # Assemble per-pixel samples of confirmed polygons, then clean per
    # (region, class) and split surviving polygons.
    rows = []
    for poly, pixels in confirmed:
        for r, c in pixels:
            rows.append((poly.region, poly.id, poly.class_label, evi[:, r, c]))
    regions = np.array([r[0] for r in rows], dtype=object)
    poly_ids = np.array([r[1] for r in rows])
    classes = np.array([r[2] for r in rows])
    series = np.stack([r[3] for r in rows])

    keep = np.ones(len(rows), dtype=bool)
    k = cfg["gmm"]["components"]
    for region in sorted(set(regions.tolist())):
        for cls in (0, 1):
            sel = (regions == region) & (classes == cls)
            n = int(sel.sum())
            if n == 0:
                continue
            if n < k:
                warnings.warn(f"{region}/{cls}: {n} samples < {k} components; "
                              "skipping cluster cleaning")
                continue
            retained, clog = labels_mod.clean_labels(
                series[sel], cls, grid, seed=seed, k=k,
                max_iterations=cfg["gmm"]["max_clean_iterations"], threshold=thr)
            keep[np.flatnonzero(sel)[~retained]] = False
            log["cleaning"][f"{region}/{'irrigated' if cls else 'non_irrigated'}"] = {
                "iterations": clog.iterations, "stopped": clog.stopped_reason}

    surviving = sorted({int(pid) for pid in poly_ids[keep]})
    refs = {p.id: p for p, _ in confirmed}
    ratios = (cfg["splits"]["train"], cfg["splits"]["val"], cfg["splits"]["test"])
    assignment = labels_mod.split_polygons([refs[pid] for pid in surviving],
                                           ratios=ratios, seed=seed)
    sel = np.flatnonzero(keep)
    splits = np.array([assignment.split_of(int(poly_ids[i])) for i in sel],
                      dtype=object)
    table = SampleTable(regions[sel], poly_ids[sel], classes[sel], splits,
                        ["EVI"], series[sel][:, None, :])
    write_samples(table, out / "samples.csv")
    with open(out / "curation_log.json", "w") as fh:
        json.dump(log, fh, indent=2)
        fh.write("\n")
    return ["samples.csv", "curation_log.json"]


def _verb_filter(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    stack = read_stack(inputs["stack"])
    slope, _ = read_raster(inputs["slope"])
    grid = ts.TimeGrid(stack.header.start_date, stack.header.step_days,
                       stack.header.timesteps)
    evi = _stack_evi_layer(stack)
    ok = admissibility.admissibility_grid(
        evi, slope, grid, threshold=cfg["thresholds"]["evi"],
        slope_max=cfg["thresholds"]["slope_percent"])
    write_raster(ok.astype(np.float32), out / "admissible", band="admissible",
                 pixel_size_m=stack.header.pixel_size_m,
                 start_date=stack.header.start_date)
    return ["admissible.stack.json", "admissible.data.bin", "admissible.mask.bin"]


def _spec_from_options(cfg, options, seed) -> ClassifierSpec:
    variant = options["model"]
    params = {}
    if variant == "random_forest":
        params = dict(cfg["forest"])
    elif variant == "gbdt":
        params = dict(cfg["gbdt"])
    elif variant == "transformer":
        params = {k: cfg["network"][k] for k in ("d_model", "heads", "ffn_dim",
                                                 "penultimate")}
    return ClassifierSpec(variant, seed=seed, params=params)


def _run_config(cfg, options, seed, threads) -> harness.TrainingRunConfig:
    return harness.TrainingRunConfig(
        input_mode=options.get("input", "EVI"),
        batch_size=cfg["training"]["batch_size"],
        max_epochs=cfg["training"]["max_epochs"],
        patience=cfg["training"]["patience"],
        learning_rate=cfg["network"]["learning_rate"],
        seed=seed, threads=threads)


def _verb_train(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    table = read_samples(inputs["samples"])
    holdouts = tuple(options.get("holdout_regions") or ())
    run_cfg = _run_config(cfg, options, seed, threads)
    regions = harness.build_region_datasets(table, run_cfg.input_mode, holdouts)
    layers = harness.input_layers(table, run_cfg.input_mode)
    spec = _spec_from_options(cfg, options, seed)
    if options.get("saliency"):
        spec.params["penultimate"] = False
    trainable = [r for r in regions if r.role == harness.TRAINABLE]
    model, history = harness.train_model(trainable, spec, run_cfg, layers)
    save_model(model, out / "model")
    outputs = ["model/model.json", "model/params.bin"]
    if history:
        with open(out / "history.json", "w") as fh:
            json.dump(history, fh, indent=2)
            fh.write("\n")
        outputs.append("history.json")
    metrics = harness.evaluate(model, regions, split="test")
    doc = {name: {"f1": m.f1, "tp": m.counts.tp, "fp": m.counts.fp,
                  "fn": m.counts.fn, "tn": m.counts.tn,
                  "accuracy_irrigated": m.accuracy_irrigated,
                  "accuracy_non_irrigated": m.accuracy_non_irrigated,
                  "role": ("holdout_only" if name in holdouts else "trainable")}
           for name, m in metrics.items()}
    with open(out / "metrics.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    outputs.append("metrics.json")
    return outputs


def _parse_sizes(text: str) -> list[int]:
    sizes = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            sizes.extend(range(int(lo), int(hi) + 1))
        else:
            sizes.append(int(part))
    return sorted(set(sizes))


def _verb_sweep(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    table = read_samples(inputs["samples"])
    if options.get("train_fraction"):
        table = harness.resplit_table(table, float(options["train_fraction"]),
                                      seed=seed)
    run_cfg = _run_config(cfg, options, seed, threads)
    regions = harness.build_region_datasets(table, run_cfg.input_mode)
    layers = harness.input_layers(table, run_cfg.input_mode)
    spec = _spec_from_options(cfg, options, seed)
    sizes = _parse_sizes(options["sizes"])
    result = harness.region_sweep(regions, sizes, spec, run_cfg, layers)

    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subset", "withheld", "f1", "accuracy_irrigated",
                         "accuracy_non_irrigated", "tp", "fp", "fn", "tn"])
        for row in result.rows:
            writer.writerow(["|".join(row.subset), row.withheld,
                             f"{row.f1:.9g}",
                             "" if row.accuracy_irrigated is None
                             else f"{row.accuracy_irrigated:.9g}",
                             "" if row.accuracy_non_irrigated is None
                             else f"{row.accuracy_non_irrigated:.9g}",
                             row.counts.tp, row.counts.fp, row.counts.fn,
                             row.counts.tn])
    with open(out / "aggregates.json", "w") as fh:
        json.dump(result.aggregate(), fh, indent=2)
        fh.write("\n")
    return ["sweep.csv", "aggregates.json"]


def _read_sweep_csv(path) -> list[harness.SweepRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            counts = harness.ConfusionCounts(int(rec["tp"]), int(rec["fp"]),
                                             int(rec["fn"]), int(rec["tn"]))
            rows.append(harness.SweepRow(
                tuple(rec["subset"].split("|")), rec["withheld"],
                float(rec["f1"]),
                float(rec["accuracy_irrigated"]) if rec["accuracy_irrigated"] else None,
                float(rec["accuracy_non_irrigated"]) if rec["accuracy_non_irrigated"] else None,
                counts))
    return rows


def _verb_diagnose(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    sub = options["subverb"]
    outputs = []
    if sub == "ks":
        table = read_samples(inputs["samples"])
        evi = table.layer_series("EVI")
        doc = {}
        for cls, name in ((0, "non_irrigated"), (1, "irrigated")):
            sel = (table.classes == cls) & (table.splits == "train")
            by_region = {}
            for region in sorted(set(table.regions[sel].tolist())):
                rows = sel & (table.regions == region)
                if int(rows.sum()) >= 2:
                    by_region[region] = evi[rows]
            if len(by_region) >= 2:
                report = diagnostics.region_similarity_matrix(
                    by_region, dims=cfg["diagnostics"]["ks_dims"])
                doc[name] = report.as_dict()
        with open(out / "ks_report.json", "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        outputs.append("ks_report.json")
    elif sub == "ols":
        rows = _read_sweep_csv(inputs["sweep"])
        if options.get("target_region"):
            rows = [r for r in rows if r.withheld == options["target_region"]]
        names = sorted({name for r in rows for name in r.subset})
        x, y = diagnostics.sweep_design_matrix(rows, names)
        report = diagnostics.ols_fit(x, y, column_names=names)
        with open(out / "ols_report.json", "w") as fh:
            json.dump(report.as_dict(), fh, indent=2)
            fh.write("\n")
        outputs.append("ols_report.json")
    elif sub == "saliency":
        table = read_samples(inputs["samples"])
        model = load_model(inputs["model"])
        feats = table.series[:, [table.layers.index(l) for l in model.layers], :]
        saliency = diagnostics.grad_cam(model, feats)
        grid = ts.TimeGrid(timesteps=table.timesteps)
        emphasis = diagnostics.dry_window_emphasis(saliency, grid)
        with open(out / "saliency.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            t = saliency.importances.shape[1]
            writer.writerow(["region", "class", "dry_emphasis"]
                            + [f"t{i:02d}" for i in range(t)])
            for i in range(len(table)):
                writer.writerow([table.regions[i], int(table.classes[i]),
                                 int(emphasis[i])]
                                + [f"{v:.6g}" for v in saliency.importances[i]])
        summary = {}
        for cls, name in ((0, "non_irrigated"), (1, "irrigated")):
            sel = table.classes == cls
            if sel.any():
                summary[name] = {"dry_emphasis_fraction": float(emphasis[sel].mean()),
                                 "n": int(sel.sum())}
        with open(out / "saliency_summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        outputs += ["saliency.csv", "saliency_summary.json"]
    else:
        raise ValueError(f"unknown diagnose sub-verb {sub!r}")
    return outputs


def _write_prediction(pred: inference.PredictionRaster, out: Path, name: str,
                      pixel_size_m: float, start_date: str) -> list[str]:
    h, w = pred.classes.shape
    header = StackHeader(width=w, height=h, bands=["class", "probability"],
                         timesteps=1, pixel_size_m=pixel_size_m,
                         start_date=start_date)
    values = np.stack([pred.classes.astype(np.float32),
                       pred.probability.astype(np.float32)])[None]
    write_stack(RasterStack(header, values, np.ones_like(values, dtype=bool)),
                out / name)
    return [f"{name}.stack.json", f"{name}.data.bin", f"{name}.mask.bin"]


def _read_prediction(path) -> tuple[inference.PredictionRaster, StackHeader]:
    stack = read_stack(path)
    classes = np.asarray(stack.values[0, stack.band_index("class")], dtype=np.int8)
    proba = np.asarray(stack.values[0, stack.band_index("probability")],
                       dtype=np.float64)
    return inference.PredictionRaster(classes, proba), stack.header


def _verb_infer(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    stack = read_stack(inputs["stack"])
    slope, _ = read_raster(inputs["slope"])
    model = load_model(inputs["model"])
    evi = _stack_evi_layer(stack)
    t, h, w = evi.shape
    header = StackHeader(width=w, height=h, bands=["EVI"], timesteps=t,
                         start_date=stack.header.start_date,
                         step_days=stack.header.step_days,
                         pixel_size_m=stack.header.pixel_size_m)
    evi_stack = RasterStack(header, evi[:, None].astype(np.float32),
                            np.ones((t, 1, h, w), dtype=bool))
    pred = inference.predict_raster(model, evi_stack, slope,
                                    tile_size=int(options.get("tile_size", 256)),
                                    year_tag=options.get("year", ""))
    return _write_prediction(pred, out, "prediction",
                             stack.header.pixel_size_m, stack.header.start_date)


def _verb_sieve(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    pred, header = _read_prediction(inputs["prediction"])
    sieved = inference.sieve_small_components(
        pred.classes, min_area_ha=cfg["thresholds"]["min_area_ha"],
        pixel_size_m=header.pixel_size_m,
        connectivity=cfg["sieve"]["connectivity"])
    out_pred = inference.PredictionRaster(sieved, pred.probability)
    return _write_prediction(out_pred, out, "sieved", header.pixel_size_m,
                             header.start_date)


def _verb_zonestats(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    pred_a, header = _read_prediction(inputs["prediction_a"])
    pred_b, _ = _read_prediction(inputs["prediction_b"])
    zones = read_zone_map(inputs["zones"])
    report = inference.zone_statistics(pred_a.classes, pred_b.classes, zones,
                                       pixel_size_m=header.pixel_size_m)
    with open(out / "zonestats.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["zone", "irrigated_ha_a", "irrigated_ha_b", "total_ha",
                         "percent_change", "change_percent_of_total_area"])
        for row in report.zones + [report.total]:
            writer.writerow([row.zone, f"{row.hectares_a:.9g}",
                             f"{row.hectares_b:.9g}", f"{row.total_hectares:.9g}",
                             "undefined" if row.percent_change is None
                             else f"{row.percent_change:.1f}",
                             f"{row.change_fraction_of_total:.1f}"])
    return ["zonestats.csv"]


def _verb_composite(cfg, inputs, options, out: Path, seed: int, threads: int) -> list[str]:
    pred_a, header = _read_prediction(inputs["prediction_a"])
    pred_b, _ = _read_prediction(inputs["prediction_b"])
    comp = inference.bitemporal_composite(pred_a.classes, pred_b.classes)
    write_raster(comp.astype(np.float32), out / "composite", band="change_category",
                 pixel_size_m=header.pixel_size_m, start_date=header.start_date)
    return ["composite.stack.json", "composite.data.bin", "composite.mask.bin"]


_VERBS = {
    "synth": _verb_synth,
    "mosaic": _verb_mosaic,
    "unmix": _verb_unmix,
    "curate": _verb_curate,
    "filter": _verb_filter,
    "train": _verb_train,
    "sweep": _verb_sweep,
    "diagnose": _verb_diagnose,
    "infer": _verb_infer,
    "sieve": _verb_sieve,
    "zonestats": _verb_zonestats,
    "composite": _verb_composite,
}


def _execute(verb: str, cfg: dict, inputs: dict, options: dict, out: Path,
             seed: int, threads: int) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = _VERBS[verb](cfg, inputs, options, out, seed, threads)
    _write_manifest(out, verb, inputs, options, cfg, seed, threads, outputs)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON config overrides")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irrimap",
        description="Irrigation detection pipeline over vegetation-index timeseries")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world or region samples")
    p.add_argument("--mode", choices=["world", "regions"], default="world")
    p.add_argument("--scenes", action="store_true",
                   help="also emit per-window acquisition scenes")
    _add_common(p)

    p = sub.add_parser("mosaic", help="composite scenes into a smoothed stack")
    p.add_argument("--scenes", required=True, help="directory of scene files")
    _add_common(p)

    p = sub.add_parser("unmix", help="temporal endmember unmixing of an index stack")
    p.add_argument("--stack", required=True)
    p.add_argument("--endmembers", default="auto",
                   help='"auto" or manual pixel list "r,c;r,c;..."')
    _add_common(p)

    p = sub.add_parser("curate", help="confirm, clean and split labeled polygons")
    p.add_argument("--stack", required=True)
    p.add_argument("--polygons", required=True)
    _add_common(p)

    p = sub.add_parser("filter", help="admissibility mask from stack + slope")
    p.add_argument("--stack", required=True)
    p.add_argument("--slope", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train one classifier on labeled samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--model", required=True,
                   choices=["reference", "random_forest", "gbdt", "transformer"])
    p.add_argument("--input", default="EVI",
                   choices=["ALL_BANDS", "EVI", "EVI_SHIFTED",
                            "all-bands", "evi", "evi-shifted"])
    p.add_argument("--holdout-regions", default="",
                   help="comma-separated regions excluded from fitting")
    p.add_argument("--saliency", action="store_true",
                   help="train the no-penultimate variant for saliency maps")
    _add_common(p)

    p = sub.add_parser("sweep", help="withheld-region robustness sweep")
    p.add_argument("--samples", required=True)
    p.add_argument("--model", required=True,
                   choices=["reference", "random_forest", "gbdt", "transformer"])
    p.add_argument("--input", default="EVI",
                   choices=["ALL_BANDS", "EVI", "EVI_SHIFTED",
                            "all-bands", "evi", "evi-shifted"])
    p.add_argument("--sizes", required=True, help='e.g. "1-6" or "2,4"')
    p.add_argument("--train-fraction", default=None,
                   help="re-split polygons to this training fraction first")
    _add_common(p)

    p = sub.add_parser("diagnose", help="transferability diagnostics")
    dsub = p.add_subparsers(dest="subverb", required=True)
    d = dsub.add_parser("ks", help="pairwise pseudo-1D KS between regions")
    d.add_argument("--samples", required=True)
    _add_common(d)
    d = dsub.add_parser("ols", help="region-importance regression on sweep rows")
    d.add_argument("--sweep", required=True)
    d.add_argument("--target-region", default=None)
    _add_common(d)
    d = dsub.add_parser("saliency", help="per-timestep prediction importances")
    d.add_argument("--samples", required=True)
    d.add_argument("--model", required=True, help="saliency model directory")
    _add_common(d)

    p = sub.add_parser("infer", help="raster prediction with admissibility filter")
    p.add_argument("--stack", required=True)
    p.add_argument("--slope", required=True)
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--year", default="")
    _add_common(p)

    p = sub.add_parser("sieve", help="remove small predicted components")
    p.add_argument("--prediction", required=True)
    _add_common(p)

    p = sub.add_parser("zonestats", help="zone change accounting for two years")
    p.add_argument("--prediction-a", required=True)
    p.add_argument("--prediction-b", required=True)
    p.add_argument("--zones", required=True)
    _add_common(p)

    p = sub.add_parser("composite", help="bitemporal change composite")
    p.add_argument("--prediction-a", required=True)
    p.add_argument("--prediction-b", required=True)
    _add_common(p)

    p = sub.add_parser("rerun", help="replay a verb from its run manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    return parser


def _canon_mode(mode: str) -> str:
    return {"all-bands": "ALL_BANDS", "evi": "EVI",
            "evi-shifted": "EVI_SHIFTED"}.get(mode, mode)


def _dispatch(args: argparse.Namespace) -> None:
    if args.verb == "rerun":
        with open(args.manifest) as fh:
            manifest = json.load(fh)
        threads = args.threads if args.threads is not None else manifest["threads"]
        _execute(manifest["verb"], manifest["config"], manifest["inputs"],
                 manifest["options"], Path(args.out), manifest["seed"], threads)
        return

    cfg = load_config(args.config)
    inputs: dict[str, str] = {}
    options: dict = {}
    if args.verb == "synth":
        options = {"mode": args.mode, "scenes": bool(args.scenes)}
    elif args.verb == "mosaic":
        inputs = {"scenes": args.scenes}
    elif args.verb == "unmix":
        inputs = {"stack": args.stack}
        options = {"endmembers": args.endmembers}
    elif args.verb == "curate":
        inputs = {"stack": args.stack, "polygons": args.polygons}
    elif args.verb == "filter":
        inputs = {"stack": args.stack, "slope": args.slope}
    elif args.verb == "train":
        inputs = {"samples": args.samples}
        options = {"model": args.model, "input": _canon_mode(args.input),
                   "holdout_regions": [r for r in args.holdout_regions.split(",") if r],
                   "saliency": bool(args.saliency)}
    elif args.verb == "sweep":
        inputs = {"samples": args.samples}
        options = {"model": args.model, "input": _canon_mode(args.input),
                   "sizes": args.sizes, "train_fraction": args.train_fraction}
    elif args.verb == "diagnose":
        options = {"subverb": args.subverb}
        if args.subverb == "ks":
            inputs = {"samples": args.samples}
        elif args.subverb == "ols":
            inputs = {"sweep": args.sweep}
            options["target_region"] = args.target_region
        else:
            inputs = {"samples": args.samples, "model": args.model}
    elif args.verb == "infer":
        inputs = {"stack": args.stack, "slope": args.slope, "model": args.model}
        options = {"tile_size": args.tile_size, "year": args.year}
    elif args.verb == "sieve":
        inputs = {"prediction": args.prediction}
    elif args.verb == "zonestats":
        inputs = {"prediction_a": args.prediction_a,
                  "prediction_b": args.prediction_b, "zones": args.zones}
    elif args.verb == "composite":
        inputs = {"prediction_a": args.prediction_a,
                  "prediction_b": args.prediction_b}
    _execute(args.verb, cfg, inputs, options, Path(args.out), args.seed,
             args.threads)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _dispatch(args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"irrimap {getattr(args, 'verb', '?')}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())

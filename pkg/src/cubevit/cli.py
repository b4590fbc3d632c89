"""Configuration-driven command line: every run is fully determined by
(config, seed), echoes its effective config into the run directory, and
writes a sorted-keys ``metrics.json``.

Subcommands: synth, pretrain, align, finetune, retrieve, saliency, essi,
simulate-trial. Exit codes: 0 success, 2 usage error, 3 data/format
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import align as align_mod
from . import data as data_mod
from . import finetune as ft
from . import mae as mae_mod
from . import metrics as metrics_mod
from . import saliency as saliency_mod
from . import trial as trial_mod
from . import vit3d
from .checkpoint import (
    arrays_to_params,
    load_checkpoint,
    params_to_arrays,
    save_checkpoint,
)
from .errors import CubevitError, UsageError
from .optim import AdamWConfig, ScheduleConfig
from .towers import TowerConfig, adopt_mae_encoder


# -- config plumbing -----------------------------------------------------------


def load_config(path, overrides):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise UsageError(f"config is not valid JSON: {err}")
    for key, raw in overrides:
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key} crosses non-object key {part}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[parts[-1]] = value
    return config


def parse_overrides(extras):
    """Interpret leftover args as repeated ``--dotted.key value`` pairs."""
    overrides = []
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--") or i + 1 >= len(extras):
            raise UsageError(f"expected --key value override pairs, got {extras[i:]}")
        overrides.append((token[2:], extras[i + 1]))
        i += 2
    return overrides


def validate_keys(config, schema, path=""):
    if not isinstance(config, dict):
        return
    for key, value in config.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise UsageError(f"unknown config key: {where}")
        child = schema[key]
        if isinstance(child, dict):
            validate_keys(value, child, where)


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def start_run(out_dir, config):
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "config.json"), config)


def finish_run(out_dir, metrics):
    write_json(os.path.join(out_dir, "metrics.json"), metrics)
    return metrics


COMMON_KEYS = {"threads": None, "seed": None}


def check_threads(config):
    threads = config.get("threads", 1)
    if not isinstance(threads, int) or threads < 1:
        raise UsageError(f"threads must be a positive integer, got {threads!r}")
    # Execution is serial; the key is accepted for config compatibility.


# -- cohort helpers ----------------------------------------------------------------


def write_cohort(out_dir, cohort):
    os.makedirs(out_dir, exist_ok=True)
    items = []
    for i, item in enumerate(cohort):
        names = {
            "volume": f"vol_{i:04d}.vol",
            "ir": f"ir_{i:04d}.enf",
            "faf": f"faf_{i:04d}.enf",
        }
        data_mod.write_volume(os.path.join(out_dir, names["volume"]), item.volume)
        data_mod.write_enface(os.path.join(out_dir, names["ir"]), item.ir)
        data_mod.write_enface(os.path.join(out_dir, names["faf"]), item.faf)
        items.append(
            {
                "files": names,
                "growth_rate": item.growth_rate,
                "label": item.label,
                "laterality": item.volume.laterality,
                "lesion_area": item.lesion_area,
                "patient_id": item.volume.patient_id,
            }
        )
    write_json(os.path.join(out_dir, "manifest.json"), {"items": items})
    return items


def load_cohort(cohort_dir):
    manifest_path = os.path.join(cohort_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise UsageError(f"no manifest.json under {cohort_dir}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    items = []
    for entry in manifest["items"]:
        items.append(
            data_mod.CohortItem(
                volume=data_mod.read_volume(os.path.join(cohort_dir, entry["files"]["volume"])),
                ir=data_mod.read_enface(os.path.join(cohort_dir, entry["files"]["ir"])),
                faf=data_mod.read_enface(os.path.join(cohort_dir, entry["files"]["faf"])),
                label=int(entry["label"]),
                growth_rate=float(entry["growth_rate"]),
                lesion_area=float(entry["lesion_area"]),
            )
        )
    return items


def directory_digest(root):
    """SHA-256 over all file contents in sorted path order."""
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            digest.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


def _tower_from_config(node, volume_extents):
    spec = vit3d.CubeSpec(volume=tuple(volume_extents), cube=tuple(node["cube"]))
    cfg = vit3d.ViTConfig(
        depth=int(node.get("depth", 2)),
        heads=int(node.get("heads", 4)),
        dim=int(node.get("dim", 32)),
        tile=int(node.get("tile", 64)),
    )
    return TowerConfig(spec=spec, vit=cfg)


TOWER_SCHEMA = {"cube": None, "depth": None, "heads": None, "dim": None, "tile": None}


# -- subcommands -----------------------------------------------------------------------


SYNTH_SCHEMA = {
    **COMMON_KEYS,
    "count": None,
    "volume_extents": None,
    "enface_extents": None,
    "layer_thickness": None,
    "lesion_radius": None,
    "lesion_amplitude": None,
    "mirror_os": None,
    "positive_fraction": None,
    "noise": None,
    "target_noise": None,
}


def cmd_synth(config, out_dir):
    validate_keys(config, SYNTH_SCHEMA)
    check_threads(config)
    kwargs = {k: v for k, v in config.items() if k not in ("threads",)}
    for key in ("volume_extents", "enface_extents"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    spec = data_mod.SyntheticCohortSpec(**kwargs)
    cohort = data_mod.synth_cohort(spec)
    cohort_dir = os.path.join(out_dir, "cohort")
    write_cohort(cohort_dir, cohort)
    hand = [
        data_mod.recover_label_by_hand(item.volume.voxels) == item.label
        for item in cohort
    ]
    return {
        "cohort_digest": directory_digest(cohort_dir),
        "count": len(cohort),
        "hand_rule_accuracy": float(np.mean(hand)),
        "mean_lesion_area": float(np.mean([item.lesion_area for item in cohort])),
        "positives": int(sum(item.label for item in cohort)),
    }


PRETRAIN_SCHEMA = {
    **COMMON_KEYS,
    "cohort": None,
    "cube": None,
    "encoder": TOWER_SCHEMA,
    "decoder": TOWER_SCHEMA,
    "mask_ratio": None,
    "schedule": {"peak_lr": None, "warmup_epochs": None, "total_epochs": None, "floor_lr": None},
    "optimizer": {"betas": None, "weight_decay": None, "eps": None},
    "batch_size": None,
    "accumulation_steps": None,
    "flip_w": None,
    "flip_z": None,
}


def _mae_config_from(config, volume_extents):
    spec = vit3d.CubeSpec(volume=tuple(volume_extents), cube=tuple(config["cube"]))
    enc = config.get("encoder", {})
    dec = config.get("decoder", {})
    encoder = vit3d.ViTConfig(
        depth=int(enc.get("depth", 2)),
        heads=int(enc.get("heads", 4)),
        dim=int(enc.get("dim", 32)),
        tile=int(enc.get("tile", 64)),
    )
    decoder = vit3d.ViTConfig(
        depth=int(dec.get("depth", 1)),
        heads=int(dec.get("heads", 4)),
        dim=int(dec.get("dim", 16)),
        role="decoder",
        tile=int(dec.get("tile", 64)),
    )
    return mae_mod.MAEConfig(
        spec=spec,
        encoder=encoder,
        decoder=decoder,
        mask_ratio=float(config.get("mask_ratio", 0.9)),
    )


def cmd_pretrain(config, out_dir):
    validate_keys(config, PRETRAIN_SCHEMA)
    check_threads(config)
    items = load_cohort(config["cohort"])
    volumes = [item.volume.voxels for item in items]
    cfg = _mae_config_from(config, volumes[0].shape)
    sched = config.get("schedule", {})
    opt = config.get("optimizer", {})
    run = mae_mod.PretrainConfig(
        schedule=ScheduleConfig(
            peak_lr=float(sched.get("peak_lr", 1.6e-3)),
            warmup_epochs=int(sched.get("warmup_epochs", 1)),
            total_epochs=int(sched.get("total_epochs", 5)),
            floor_lr=float(sched.get("floor_lr", 0.0)),
        ),
        optimizer=AdamWConfig(
            betas=tuple(opt.get("betas", (0.9, 0.95))),
            weight_decay=float(opt.get("weight_decay", 0.05)),
            eps=float(opt.get("eps", 1e-8)),
        ),
        batch_size=int(config.get("batch_size", 4)),
        accumulation_steps=int(config.get("accumulation_steps", 1)),
        flip_w=bool(config.get("flip_w", True)),
        flip_z=bool(config.get("flip_z", False)),
    )
    seed = int(config.get("seed", 0))
    params, log = mae_mod.pretrain(volumes, cfg, run, seed=seed)
    with open(os.path.join(out_dir, "loss.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(log) + "\n")
    final_eval = mae_mod.eval_masked_loss(volumes, cfg, params, seed=seed)
    save_checkpoint(os.path.join(out_dir, "checkpoint.octk"), params_to_arrays(params))
    first = float(log[0].rsplit(" ", 1)[1])
    last_step = [line for line in log if " step " in line][-1]
    return {
        "epochs": run.schedule.total_epochs,
        "final_eval_loss": final_eval,
        "final_step_loss": float(last_step.rsplit(" ", 1)[1]),
        "first_step_loss": first,
        "n_volumes": len(volumes),
    }


ALIGN_SCHEMA = {
    **COMMON_KEYS,
    "cohort": None,
    "mode": None,
    "volume_tower": TOWER_SCHEMA,
    "enface_tower": TOWER_SCHEMA,
    "steps": None,
    "batch_size": None,
    "lr": None,
    "warmup_steps": None,
    "tau_init": None,
    "freeze_layers": None,
    "layer_decay": None,
    "eval_every": None,
    "init": None,
}


def _align_config_from(config, volume_extents, enface_extents):
    mode = config.get("mode", "bi")
    if mode not in ("bi", "tri"):
        raise UsageError(f"align mode must be bi or tri, got {mode!r}")
    return align_mod.AlignConfig(
        volume_tower=_tower_from_config(config["volume_tower"], volume_extents),
        enface_tower=_tower_from_config(
            config["enface_tower"], (1,) + tuple(enface_extents)
        ),
        trimodal=(mode == "tri"),
        steps=int(config.get("steps", 200)),
        batch_size=int(config.get("batch_size", 16)),
        lr=float(config.get("lr", 1e-4)),
        warmup_steps=int(config.get("warmup_steps", 200)),
        tau_init=float(config.get("tau_init", 0.07)),
        freeze_layers=int(config.get("freeze_layers", 0)),
        layer_decay=float(config.get("layer_decay", 0.65)),
        eval_every=int(config.get("eval_every", 50)),
    )


def cmd_align(config, out_dir):
    validate_keys(config, ALIGN_SCHEMA)
    check_threads(config)
    items = load_cohort(config["cohort"])
    volumes = [item.volume.voxels.astype(np.float64) for item in items]
    irs = [item.ir.pixels.astype(np.float64) for item in items]
    fafs = [item.faf.pixels.astype(np.float64) for item in items]
    cfg = _align_config_from(config, volumes[0].shape, irs[0].shape)
    seed = int(config.get("seed", 0))
    params = None
    if config.get("init"):
        rng = np.random.default_rng(seed)
        params = align_mod.init_align_params(cfg, rng)
        pretrained = arrays_to_params(load_checkpoint(config["init"]), dtype=np.float64)
        for name, tensor in adopt_mae_encoder(pretrained, "vol/").items():
            if name in params:
                if tensor.data.shape != params[name].data.shape:
                    raise UsageError(
                        f"init checkpoint tensor {name} has shape "
                        f"{tensor.data.shape}, expected {params[name].data.shape}"
                    )
                params[name] = tensor
    params, log = align_mod.align_train(
        volumes,
        irs,
        cfg,
        seed=seed,
        faf=fafs if cfg.trimodal else None,
        params=params,
    )
    with open(os.path.join(out_dir, "train.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(log) + "\n")
    save_checkpoint(os.path.join(out_dir, "checkpoint.octk"), params_to_arrays(params))
    final_loss = float(log[-1].split(" ")[3])
    return {
        "final_loss": final_loss,
        "mode": "tri" if cfg.trimodal else "bi",
        "recall_at_1_train": align_mod.train_recall_at_1(volumes, irs, cfg, params),
        "steps": cfg.steps,
        "tau_final": float(np.exp(params["log_tau"].data)),
    }


FINETUNE_SCHEMA = {
    **COMMON_KEYS,
    "cohort": None,
    "task": None,
    "folds": None,
    "tower": TOWER_SCHEMA,
    "recipe": {
        "epochs": None,
        "lr": None,
        "batch_size": None,
        "layer_decay": None,
        "freeze_layers": None,
        "warmup_epochs": None,
        "label_smoothing": None,
        "dropout": None,
        "weight_decay": None,
        "val_fraction": None,
    },
    "init": None,
}


def cmd_finetune(config, out_dir):
    validate_keys(config, FINETUNE_SCHEMA)
    check_threads(config)
    items = load_cohort(config["cohort"])
    volumes = [item.volume.voxels.astype(np.float64) for item in items]
    task = config.get("task", "classification")
    if task == "classification":
        targets = np.array([item.label for item in items], dtype=np.int64)
    elif task == "regression":
        targets = (
            np.array([item.growth_rate for item in items]),
            np.array([item.lesion_area for item in items]),
        )
    else:
        raise UsageError(f"unknown task {task!r}")
    tower = _tower_from_config(config.get("tower", {"cube": [3, 8, 8]}), volumes[0].shape)
    recipe = ft.FinetuneRecipe(**config.get("recipe", {}))
    seed = int(config.get("seed", 0))

    init_params = None
    if config.get("init"):
        pretrained = arrays_to_params(load_checkpoint(config["init"]), dtype=np.float64)
        init_params = adopt_mae_encoder(pretrained, "vol/")

    folds = int(config.get("folds", 0))
    metrics = {"task": task}
    if folds:
        models = ft.kfold_finetune(
            volumes, targets, tower, recipe, seed=seed, folds=folds,
            task=task, init_params=init_params,
        )
        log = [line for m in models for line in m.log]
        metrics["folds"] = folds
        metrics["fold_best_metrics"] = [m.best_metric for m in models]
        if task == "classification":
            probs = ft.ensemble_predict(models, volumes)[:, 1]
            metrics["ensemble_train_auroc"] = metrics_mod.auroc(probs, targets)
            metrics["ensemble_train_auprc"] = metrics_mod.auprc(probs, targets)
        else:
            pred = ft.ensemble_predict(models, volumes)
            metrics["ensemble_train_r2"] = metrics_mod.pearson_r2(pred, targets[0])
        save_checkpoint(
            os.path.join(out_dir, "checkpoint.octk"), params_to_arrays(models[0].params)
        )
    else:
        model = ft.finetune(
            volumes, targets, tower, recipe, seed=seed, task=task, init_params=init_params
        )
        log = model.log
        metrics["best_epoch"] = model.best_epoch
        metrics["best_val_metric"] = model.best_metric
        if task == "classification":
            probs = model.predict_proba(volumes)[:, 1]
            metrics["train_auroc"] = metrics_mod.auroc(probs, targets)
            metrics["train_auprc"] = metrics_mod.auprc(probs, targets)
        else:
            pred = model.predict(volumes)
            metrics["train_r2"] = metrics_mod.pearson_r2(pred, targets[0])
        save_checkpoint(
            os.path.join(out_dir, "checkpoint.octk"), params_to_arrays(model.params)
        )
    with open(os.path.join(out_dir, "train.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(log) + "\n")
    return metrics


RETRIEVE_SCHEMA = {
    **COMMON_KEYS,
    "cohort": None,
    "checkpoint": None,
    "mode": None,
    "volume_tower": TOWER_SCHEMA,
    "enface_tower": TOWER_SCHEMA,
    "ks": None,
}


def cmd_retrieve(config, out_dir):
    validate_keys(config, RETRIEVE_SCHEMA)
    check_threads(config)
    items = load_cohort(config["cohort"])
    volumes = [item.volume.voxels.astype(np.float64) for item in items]
    irs = [item.ir.pixels.astype(np.float64) for item in items]
    lateralities = [item.volume.laterality for item in items]
    cfg = _align_config_from(config, volumes[0].shape, irs[0].shape)
    params = arrays_to_params(load_checkpoint(config["checkpoint"]), dtype=np.float64)
    o = align_mod.batch_embeddings(volumes, cfg, params, "oct").data
    i = align_mod.batch_embeddings(irs, cfg, params, "ir").data
    o = o / np.linalg.norm(o, axis=1, keepdims=True)
    i = i / np.linalg.norm(i, axis=1, keepdims=True)
    sim = metrics_mod.SimilarityMatrix(values=o @ i.T, lateralities=lateralities)
    ks = [int(k) for k in config.get("ks", [1, 5, 10]) if int(k) <= sim.size]
    result = metrics_mod.retrieval_metrics(sim, ks=ks)
    lat_k = min(5, sim.size - 1)
    return {
        "volume_to_enface": result["row"],
        "enface_to_volume": result["col"],
        "laterality_acc_at_1": metrics_mod.laterality_accuracy(sim, lateralities, 1),
        f"laterality_acc_at_{lat_k}": metrics_mod.laterality_accuracy(sim, lateralities, lat_k),
        "items": sim.size,
    }


SALIENCY_SCHEMA = {
    **COMMON_KEYS,
    "cohort": None,
    "checkpoint": None,
    "tower": TOWER_SCHEMA,
    "item_index": None,
    "target_index": None,
    "block_index": None,
}


def cmd_saliency(config, out_dir):
    validate_keys(config, SALIENCY_SCHEMA)
    check_threads(config)
    items = load_cohort(config["cohort"])
    index = int(config.get("item_index", 0))
    if not 0 <= index < len(items):
        raise UsageError(f"item_index {index} outside the {len(items)}-item cohort")
    item = items[index]
    tower = _tower_from_config(
        config.get("tower", {"cube": [3, 8, 8]}), item.volume.extents
    )
    params = arrays_to_params(load_checkpoint(config["checkpoint"]), dtype=np.float64)
    smap = saliency_mod.gradcam_saliency(
        item.volume,
        tower,
        params,
        target_index=int(config.get("target_index", 1)),
        block_index=int(config.get("block_index", -1)),
    )
    saliency_mod.export_saliency(
        os.path.join(out_dir, "saliency"),
        smap,
        meta={"patient_id": item.volume.patient_id, "laterality": item.volume.laterality},
    )
    peak = np.unravel_index(int(np.argmax(smap.grid)), smap.grid.shape)
    return {
        "block_index": smap.block_index,
        "grid_shape": list(smap.grid.shape),
        "is_zero": smap.is_zero,
        "peak_position": [int(p) for p in peak],
        "target_index": smap.target_index,
    }


ESSI_SCHEMA = {
    **COMMON_KEYS,
    "n": None,
    "input_kind": None,
    "models": None,
}


def cmd_essi(config, out_dir):
    validate_keys(config, ESSI_SCHEMA)
    check_threads(config)
    n = int(config.get("n", 440))
    kind = config.get("input_kind", "r2")
    if kind not in ("r", "r2"):
        raise UsageError(f"input_kind must be r or r2, got {kind!r}")
    models = config.get("models")
    if not models:
        raise UsageError("essi needs a models mapping of per-arm correlations")
    arms = {}
    for name, node in models.items():
        control, treatment = float(node["control"]), float(node["treatment"])
        if kind == "r2":
            arms[name] = trial_mod.ArmCorrelations.from_r_squared(control, treatment)
        else:
            arms[name] = trial_mod.ArmCorrelations(control, treatment)
    table = trial_mod.recruitment_table(n, arms)
    for row in table["models"]:
        print(
            f"model {row['model']} essi {row['essi_percent']} "
            f"effective_n {row['effective_n']} gain {row['gain_vs_unadjusted']}"
        )
    for pair in table["pairwise"]:
        print(
            f"diff {pair['better']} vs {pair['worse']} "
            f"extra_patients {pair['extra_patients']}"
        )
    return table


SIMULATE_SCHEMA = {
    **COMMON_KEYS,
    "n_per_arm": None,
    "correlation": None,
    "true_effect": None,
    "repetitions": None,
    "method": None,
}


def cmd_simulate_trial(config, out_dir):
    validate_keys(config, SIMULATE_SCHEMA)
    check_threads(config)
    cfg = trial_mod.SimulationConfig(
        n_per_arm=int(config.get("n_per_arm", 400)),
        correlation=float(config.get("correlation", 0.7)),
        true_effect=float(config.get("true_effect", 0.5)),
        repetitions=int(config.get("repetitions", 1000)),
        seed=int(config.get("seed", 0)),
    )
    summary = trial_mod.simulate_trials(cfg, method=config.get("method", "ancova"))
    print(
        f"ci_width_ratio {summary['ci_width_ratio']:.4f} "
        f"realized_essi {summary['realized_essi_percent']:.2f} "
        f"formula_essi {summary['formula_essi_percent']:.2f}"
    )
    return summary


HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "align": cmd_align,
    "finetune": cmd_finetune,
    "retrieve": cmd_retrieve,
    "saliency": cmd_saliency,
    "essi": cmd_essi,
    "simulate-trial": cmd_simulate_trial,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cubevit",
        description="Volumetric cube-token transformer runs and trial statistics",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to the JSON run config")
        p.add_argument("--out", required=True, help="run output directory")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
    except SystemExit as err:
        return 2 if err.code else 0
    try:
        overrides = parse_overrides(extras)
        config = load_config(args.config, overrides)
        start_run(args.out, config)
        metrics = HANDLERS[args.subcommand](config, args.out)
        finish_run(args.out, metrics)
    except CubevitError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

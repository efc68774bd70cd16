"""Config-driven workflows behind the CLI verbs.

These are also the reference recipes the acceptance experiments call
directly: dataset construction, the offline stages, the streaming adapters,
and the evaluation studies, each reading/writing run-directory artifacts.
"""

import dataclasses
import json
import os

import numpy as np
import torch

from . import pipeline
from .data.storage import read_sample_dir, write_sample_dir
from .data.streaming import stream_batches
from .data.synthetic import apply_domain_shift, generate_scene
from .errors import ConfigurationError, LifecycleError
from .evaluate import centroid_analysis, sensitivity_study
from .model import init_model, insert_adaptation_layer, load_checkpoint, save_checkpoint
from .proxy import ProxyHeads
from .runner import RunDir, metrics_row


def derive_seed(*parts):
    """Stable child seed from integer parts (domain-separated streams)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0] % (2**31 - 1))


_DOMAIN_CODES = {"source": 0, "source_eval": 1, "target": 2, "target_shift": 3}


def build_source_samples(cfg, count=None, split="source"):
    scene = cfg.scene_config()
    n = count if count is not None else getattr(cfg.data, f"n_{split}")
    code = _DOMAIN_CODES[split]
    return [generate_scene(derive_seed(cfg.data.seed, code, i), scene) for i in range(n)]


def build_target_samples(cfg, count=None):
    scene = cfg.scene_config()
    shift = cfg.shift_config()
    n = count if count is not None else cfg.data.n_target
    out = []
    for i in range(n):
        base = generate_scene(derive_seed(cfg.data.seed, _DOMAIN_CODES["target"], i), scene)
        out.append(
            apply_domain_shift(base, shift, derive_seed(cfg.data.seed, _DOMAIN_CODES["target_shift"], i))
        )
    return out


def gen_data(cfg):
    """Write the source / source-eval / target dataset directories."""
    generator = {
        "scene": dataclasses.asdict(cfg.scene_config()),
        "shift": dataclasses.asdict(cfg.shift_config()),
    }
    written = {}
    for split, build in (
        ("source", lambda: build_source_samples(cfg, split="source")),
        ("source_eval", lambda: build_source_samples(cfg, split="source_eval")),
        ("target", lambda: build_target_samples(cfg)),
    ):
        path = getattr(cfg.data, f"{split}_dir")
        write_sample_dir(build(), path, generator_config=generator, seed=cfg.data.seed)
        written[split] = path
    return written


def _load_split(cfg, split):
    path = getattr(cfg.data, f"{split}_dir")
    if not os.path.isdir(path):
        raise ConfigurationError(
            f"dataset directory {path!r} does not exist; run gen-data first"
        )
    return read_sample_dir(path)


def prepare_reference_model(cfg, seed=None):
    """In-memory recipe: pretrain -> insert + initialize -> prepare.

    Returns (model, frozen heads, splits dict). This is the bundle the
    acceptance experiments and the documentation examples build per seed.
    """
    import copy as _copy

    cfg = _copy.deepcopy(cfg)
    if seed is not None:
        cfg.data.seed = seed
    seed = cfg.data.seed
    splits = {
        "source": build_source_samples(cfg, split="source"),
        "source_eval": build_source_samples(cfg, split="source_eval"),
        "target": build_target_samples(cfg),
    }
    model, _ = pipeline.pretrain_backbone(
        splits["source"], cfg.model_config(), cfg.stage_config("pretrain", seed)
    )
    insert_adaptation_layer(model, seed=seed + 1)
    pipeline.stage_initialize(model, splits["source"], cfg.stage_config("init", seed))
    torch.manual_seed(seed)
    heads = ProxyHeads(
        pool_dim=model.config.fusion_width,
        embed_dim=cfg.proxy.embed_dim,
        hidden_dim=cfg.proxy.hidden_dim,
        tau=cfg.proxy.tau,
    )
    pipeline.stage_prepare(model, heads, splits["source"], cfg.stage_config("prepare", seed))
    return model, heads, splits


def run_pretrain(cfg, run: RunDir, seed=None):
    samples = _load_split(cfg, "source")
    stage = cfg.stage_config("pretrain", seed)
    model, rows = pipeline.pretrain_backbone(samples, cfg.model_config(), stage)
    run.write_losses(rows)
    save_checkpoint(run.checkpoint_path, model, extra={"stage": "pretrain"})
    return model


def run_init(cfg, checkpoint, run: RunDir, seed=None):
    model, heads, _ = load_checkpoint(checkpoint)
    samples = _load_split(cfg, "source")
    stage = cfg.stage_config("init", seed)
    insert_adaptation_layer(model, seed=stage.seed)
    rows = pipeline.stage_initialize(model, samples, stage)
    run.write_losses(rows)
    save_checkpoint(run.checkpoint_path, model, heads=heads, extra={"stage": "init"})
    return model


def run_prepare(cfg, checkpoint, run: RunDir, seed=None):
    model, _, _ = load_checkpoint(checkpoint)
    if not model.has_adaptation_layer:
        raise LifecycleError("checkpoint has no adaptation layer; run init-adapt-layer first")
    samples = _load_split(cfg, "source")
    stage = cfg.stage_config("prepare", seed)
    torch.manual_seed(stage.seed)
    heads = ProxyHeads(
        pool_dim=model.config.fusion_width,
        embed_dim=cfg.proxy.embed_dim,
        hidden_dim=cfg.proxy.hidden_dim,
        tau=cfg.proxy.tau,
    )
    rows = pipeline.stage_prepare(model, heads, samples, stage)
    run.write_losses(rows)
    save_checkpoint(run.checkpoint_path, model, heads=heads, extra={"stage": "prepare"})
    return model, heads


def _adapt_common(cfg, checkpoint, need_heads):
    model, heads, _ = load_checkpoint(checkpoint)
    if need_heads and (heads is None or not heads.prepared):
        raise LifecycleError(
            "checkpoint lacks prepared proxy heads; run the prepare stage before adapt"
        )
    target = _load_split(cfg, "target")
    return model, heads, target


def run_adapt(cfg, checkpoint, run: RunDir, method="proxytta", seed=0):
    model, heads, target = _adapt_common(cfg, checkpoint, need_heads=True)
    stage = cfg.stage_config("adapt", seed)
    stream = stream_batches(target, stage.batch_size)
    model, result = pipeline.stage_adapt(
        model, heads, stream, stage, method=method,
        depth_range=cfg.eval_range(), dataset_tag="target",
    )
    _write_adapt_artifacts(run, cfg, result, seed)
    save_checkpoint(run.checkpoint_path, model, heads=heads, extra={"stage": f"adapt:{method}"})
    return result


def run_baseline(cfg, checkpoint, run: RunDir, variant="no_adapt", seed=0):
    need_heads = False
    model, heads, target = _adapt_common(cfg, checkpoint, need_heads)
    stage = cfg.stage_config("adapt", seed)
    stream = stream_batches(target, stage.batch_size)
    kwargs = {"depth_range": cfg.eval_range(), "dataset_tag": "target"}
    if variant == "no_adapt":
        model, result = pipeline.baseline_no_adapt(model, stream, **kwargs)
    elif variant in ("bn_stats", "bn_affine"):
        mapped = "stats_only" if variant == "bn_stats" else "affine_with_losses"
        model, result = pipeline.baseline_bn_adapt(model, stream, mapped, stage, **kwargs)
    elif variant == "cotta":
        model, result = pipeline.baseline_cotta(model, stream, stage, **kwargs)
    else:
        raise ConfigurationError(f"unknown baseline variant {variant!r}")
    _write_adapt_artifacts(run, cfg, result, seed)
    save_checkpoint(run.checkpoint_path, model, heads=heads, extra={"stage": f"baseline:{variant}"})
    return result


def _write_adapt_artifacts(run, cfg, result, seed):
    run.write_losses(result.loss_rows)
    run.write_metrics([metrics_row(result.record, seed, "both", cfg.data.density)])
    run.write_events(result.events)


def run_sensitivity(cfg, checkpoint, run: RunDir, seed=0, jobs=1, split="target"):
    model, _, _ = load_checkpoint(checkpoint)
    samples = _load_split(cfg, split)
    rows = sensitivity_study(
        model,
        samples,
        cfg.eval.densities,
        cfg.eval_range(),
        seed=seed,
        batch_size=cfg.eval.batch_size,
        jobs=jobs,
    )
    run.write_metrics(
        [
            {
                "dataset": split,
                "method": "sensitivity",
                "seed": seed,
                "mode": r.input_mode,
                "density": r.density,
                "mae_mm": r.mae_mm,
                "rmse_mm": r.rmse_mm,
                "n_pixels": r.n_pixels,
            }
            for r in rows
        ]
    )
    return rows


def run_centroid(cfg, checkpoint, run: RunDir):
    model, heads, _ = load_checkpoint(checkpoint)
    if heads is None or not heads.prepared:
        raise LifecycleError("centroid analysis needs a checkpoint with prepared proxy heads")
    source = _load_split(cfg, "source_eval")
    target = _load_split(cfg, "target")
    report = centroid_analysis(model, heads, source, target, batch_size=cfg.eval.batch_size)
    with open(run.file("centroid.json"), "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report

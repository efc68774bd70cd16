"""Training stages and streaming adapters.

Offline (source domain): pretrain_backbone, stage_initialize (adaptation
layer), stage_prepare (proxy mapping). Online (target domain, single pass):
stage_adapt for the method variants, plus the BN-statistics, TENT-style
BN-affine, and mean-teacher consistency baselines and a no-adapt scorer.

Every adapter follows the same per-batch protocol: score with the current
parameters first (metrics never see a batch the parameters already trained
on), then take the update steps. Events carry parameter digests so the
ordering is auditable.
"""

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data.types import Sample
from .errors import (
    ConfigurationError,
    EmptySupportError,
    LifecycleError,
    TrainingError,
)
from .evaluate import ErrorAccumulator
from .losses import (
    LossWeights,
    adapt_loss,
    local_smoothness,
    sparse_consistency,
    supervised_loss,
)
from .model import (
    collate,
    depth_value_tensors,
    forward_batch,
    init_model,
    state_bytes,
    trainable_parameters,
)
from .proxy import ProxyHeads, cosine_loss, ema_update, make_source_pair, make_target_pair


@dataclass
class StageConfig:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 16
    inner_iter: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    selector: str = "adaptation_only"
    seed: int = 0
    update_bn_stats: bool = True
    # Mean-teacher baseline knobs.
    teacher_tau: float = 0.999
    consistency_weight: float = 1.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.inner_iter < 1:
            raise ConfigurationError("epochs, batch_size, and inner_iter must be >= 1")
        if not 0.0 <= self.teacher_tau <= 1.0:
            raise ConfigurationError("teacher_tau must lie in [0, 1]")


@dataclass
class LossRow:
    step: int
    l_z: float
    l_sm: float
    l_proxy: float
    total: float
    valid_points: int


@dataclass
class AdaptResult:
    record: object  # aggregate MetricsRecord over the whole stream
    batch_records: list
    loss_rows: list
    events: list
    sample_ids: list
    method_tag: str
    n_param_sets: int
    counters: dict


def _digest(model):
    h = hashlib.sha1()
    for key, raw in sorted(state_bytes(model).items()):
        h.update(key.encode())
        h.update(raw)
    return h.hexdigest()


def _check_finite(value, step, what):
    if torch.is_tensor(value):
        value = float(value.detach())
    if not math.isfinite(value):
        raise TrainingError(f"{what} became non-finite at step {step}")


def _epoch_order(n, rng):
    return rng.permutation(n)


# ---------------------------------------------------------------------------
# Offline stages (source domain)


def pretrain_backbone(samples, model_config, cfg):
    """Supervised pretraining of the full backbone on source data."""
    if not samples:
        raise ConfigurationError("pretraining needs a non-empty source dataset")
    model = init_model(model_config, cfg.seed)
    return model, continue_pretraining(model, samples, cfg)


def continue_pretraining(model, samples, cfg):
    """Run cfg.epochs of supervised training on an existing model."""
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    use_bn = model.config.use_batch_norm
    rows = []
    step = 0
    for _ in range(cfg.epochs):
        order = _epoch_order(len(samples), rng)
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
            if use_bn and len(chunk) < 2:
                continue  # batch statistics are undefined for singleton batches
            image, depth_in = collate(chunk, dtype=dtype)
            gt_values, gt_mask = depth_value_tensors([s.gt for s in chunk], dtype)
            pred, _ = forward_batch(model, image, depth_in, mode="train" if use_bn else "eval")
            loss = supervised_loss(pred, (gt_values, gt_mask))
            _check_finite(loss, step, "supervised loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            rows.append(
                LossRow(step, 0.0, 0.0, 0.0, float(loss.detach()), int(gt_mask.sum()))
            )
            step += 1
    return rows


def _source_mae(model, samples, batch_size):
    dtype = next(model.parameters()).dtype
    acc = ErrorAccumulator((0.0, float("inf")))
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        image, depth_in = collate(chunk, dtype=dtype)
        with torch.no_grad():
            pred, _ = forward_batch(model, image, depth_in, mode="eval")
        gt_values, gt_mask = depth_value_tensors([s.gt for s in chunk], dtype)
        acc.add(pred, gt_values, gt_mask)
    return acc.record().mae_mm


def stage_initialize(model, samples, cfg):
    """Fine-tune only the freshly inserted adaptation layer on source data.

    Forwards run in eval mode so batch-norm state is untouched; everything
    outside the adaptation layer stays byte-identical. The epoch snapshot
    with the best source MAE wins (the zero-initialized start is candidate
    zero, so the stage can never end worse than the pretrained model).
    """
    if cfg.selector != "adaptation_only":
        raise ConfigurationError("stage_initialize requires selector='adaptation_only'")
    if not model.has_adaptation_layer:
        raise ConfigurationError("insert the adaptation layer before stage_initialize")
    dtype = next(model.parameters()).dtype
    params = trainable_parameters(model, "adaptation_only")
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    def adapt_state():
        return copy.deepcopy(model.adaptation_layer.state_dict())

    best_mae = _source_mae(model, samples, cfg.batch_size)
    best_state = adapt_state()
    rows = []
    step = 0
    for _ in range(cfg.epochs):
        order = _epoch_order(len(samples), rng)
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
            image, depth_in = collate(chunk, dtype=dtype)
            gt_values, gt_mask = depth_value_tensors([s.gt for s in chunk], dtype)
            pred, _ = forward_batch(model, image, depth_in, mode="eval")
            loss = supervised_loss(pred, (gt_values, gt_mask))
            _check_finite(loss, step, "initialization loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            rows.append(LossRow(step, 0.0, 0.0, 0.0, float(loss.detach()), int(gt_mask.sum())))
            step += 1
        mae = _source_mae(model, samples, cfg.batch_size)
        if mae < best_mae:
            best_mae = mae
            best_state = adapt_state()
    model.adaptation_layer.load_state_dict(best_state)
    return rows


def stage_prepare(model, heads, samples, cfg):
    """Learn the proxy mapping on source data; the encoder stays frozen.

    Per step: embed (I_0, z_s) and (I_s, z_s), build the preparation pair,
    update online projector + predictor on the cosine objective, then EMA the
    target projector. Returns the frozen heads.
    """
    if heads.prepared:
        raise LifecycleError("proxy heads are already prepared")
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(heads.trainable_parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    step = 0
    for _ in range(cfg.epochs):
        order = _epoch_order(len(samples), rng)
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
            image, depth_in = collate(chunk, dtype=dtype)
            with torch.no_grad():
                _, taps_both = forward_batch(model, image, depth_in, mode="eval")
                _, taps_depth = forward_batch(
                    model, torch.zeros_like(image), depth_in, mode="eval"
                )
            pair = make_source_pair(heads, taps_depth.fused_feat, taps_both.fused_feat)
            loss = cosine_loss(pair.p, pair.q)
            _check_finite(loss, step, "preparation loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema_update(heads)
            n_sparse = sum(s.sparse.n_valid for s in chunk)
            rows.append(LossRow(step, 0.0, 0.0, float(loss.detach()), float(loss.detach()), n_sparse))
            step += 1
    heads.freeze()
    return rows


def prepare_loss_on(model, heads, samples, batch_size=48):
    """Mean preparation loss on a held-out batch set (no updates)."""
    dtype = next(model.parameters()).dtype
    losses = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            image, depth_in = collate(chunk, dtype=dtype)
            _, taps_both = forward_batch(model, image, depth_in, mode="eval")
            _, taps_depth = forward_batch(model, torch.zeros_like(image), depth_in, mode="eval")
            pair = make_source_pair(heads, taps_depth.fused_feat, taps_both.fused_feat)
            losses.append(float(cosine_loss(pair.p, pair.q)))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# Online adapters (target domain, single pass)


class _StreamRunner:
    """Shared score-then-adapt loop; subclass hooks implement the update."""

    def __init__(self, model, depth_range, dataset_tag, method_tag, n_param_sets=1):
        self.model = model
        self.dtype = next(model.parameters()).dtype
        self.acc = ErrorAccumulator(depth_range)
        self.depth_range = depth_range
        self.dataset_tag = dataset_tag
        self.method_tag = method_tag
        self.n_param_sets = n_param_sets
        self.batch_records = []
        self.loss_rows = []
        self.events = []
        self.sample_ids = []
        self.step = 0

    def run(self, stream):
        it = iter(stream)
        k = 0
        while True:
            try:
                batch = next(it)
            except StopIteration:
                break
            self._score(batch, k)
            self.update(batch, k)
            self.events.append({"event": "post_update", "batch": k, "digest": _digest(self.model)})
            del batch  # drop before requesting the next batch: peak retention <= batch_size
            k += 1
        record = self.acc.record(dataset_tag=self.dataset_tag, method_tag=self.method_tag)
        return AdaptResult(
            record=record,
            batch_records=self.batch_records,
            loss_rows=self.loss_rows,
            events=self.events,
            sample_ids=self.sample_ids,
            method_tag=self.method_tag,
            n_param_sets=self.n_param_sets,
            counters={
                "batches": k,
                "updates": sum(1 for e in self.events if e["event"] == "update"),
                "skipped": sum(1 for e in self.events if e["event"] == "skip"),
            },
        )

    def _score(self, batch, k):
        self.sample_ids.extend(batch.sample_ids)
        self.events.append({"event": "score", "batch": k, "digest": _digest(self.model)})
        image, depth_in = collate(batch.samples, dtype=self.dtype)
        with torch.no_grad():
            pred, _ = forward_batch(self.model, image, depth_in, mode="eval")
        gt_values, gt_mask = depth_value_tensors([s.gt for s in batch.samples], self.dtype)
        batch_acc = ErrorAccumulator(self.depth_range)
        n = batch_acc.add(pred, gt_values, gt_mask)
        if n:
            self.batch_records.append(
                batch_acc.record(dataset_tag=self.dataset_tag, method_tag=self.method_tag)
            )
            self.acc.sum_abs += batch_acc.sum_abs
            self.acc.sum_sq += batch_acc.sum_sq
            self.acc.count += batch_acc.count
        else:
            self.events.append({"event": "skip", "batch": k, "reason": "no_eval_pixels"})

    def update(self, batch, k):  # pragma: no cover - overridden
        raise NotImplementedError


class _NoAdaptRunner(_StreamRunner):
    def update(self, batch, k):
        pass


class _ProxyAdaptRunner(_StreamRunner):
    def __init__(self, model, heads, cfg, method, depth_range, dataset_tag):
        if method not in ("proxytta", "proxytta_fast"):
            raise ConfigurationError(f"unknown adaptation method {method!r}")
        if not isinstance(heads, ProxyHeads) or not heads.prepared:
            raise LifecycleError("stage_adapt requires prepared (frozen) proxy heads")
        super().__init__(model, depth_range, dataset_tag, method_tag=method)
        self.heads = heads
        self.cfg = cfg
        selector = "adaptation_plus_bn" if method == "proxytta" else "adaptation_only"
        self.opt = torch.optim.Adam(trainable_parameters(model, selector), lr=cfg.learning_rate)
        # Train-mode main forwards (batch statistics + running-stat updates)
        # only for the full method, and only when the flag allows it.
        self.train_forward = (
            method == "proxytta" and cfg.update_bn_stats and model.config.use_batch_norm
        )

    def update(self, batch, k):
        samples = batch.samples
        if sum(s.sparse.n_valid for s in samples) == 0 and self.cfg.weights.w_z > 0:
            self.events.append({"event": "skip", "batch": k, "reason": "empty_support"})
            return
        image, depth_in = collate(samples, dtype=self.dtype)
        sparse_values, sparse_mask = depth_value_tensors([s.sparse for s in samples], self.dtype)
        mode = "train" if (self.train_forward and len(samples) >= 2) else "eval"
        for i in range(self.cfg.inner_iter):
            with torch.no_grad():
                # Null-image proxy forward always runs in eval mode so batch
                # statistics are never polluted by all-zero images.
                _, taps_null = forward_batch(
                    self.model, torch.zeros_like(image), depth_in, mode="eval"
                )
            pred, taps = forward_batch(self.model, image, depth_in, mode=mode)
            pair = make_target_pair(self.heads, taps_null.fused_feat, taps.fused_feat)
            report = adapt_loss(pred, (sparse_values, sparse_mask), image, pair, self.cfg.weights)
            _check_finite(report.total, self.step, "adaptation loss")
            self.opt.zero_grad()
            report.total.backward()
            self.opt.step()
            self.loss_rows.append(
                LossRow(
                    self.step,
                    report.components["l_z"],
                    report.components["l_sm"],
                    report.components["l_proxy"],
                    float(report.total.detach()),
                    report.valid_point_count,
                )
            )
            self.events.append({"event": "update", "batch": k, "inner": i})
            self.step += 1


class _BNAdaptRunner(_StreamRunner):
    def __init__(self, model, variant, cfg, depth_range, dataset_tag):
        if variant not in ("stats_only", "affine_with_losses"):
            raise ConfigurationError(f"unknown BN adapt variant {variant!r}")
        if not model.config.use_batch_norm:
            raise ConfigurationError("BN adaptation requires a batch-norm model")
        tag = "bn_stats" if variant == "stats_only" else "bn_affine_losses"
        super().__init__(model, depth_range, dataset_tag, method_tag=tag)
        self.variant = variant
        self.cfg = cfg
        if variant == "affine_with_losses":
            self.weights = LossWeights(cfg.weights.w_z, cfg.weights.w_sm, 0.0)
            self.opt = torch.optim.Adam(
                trainable_parameters(model, "bn_affine_only"), lr=cfg.learning_rate
            )

    def update(self, batch, k):
        samples = batch.samples
        if len(samples) < 2:
            self.events.append({"event": "skip", "batch": k, "reason": "bn_needs_batch_of_2"})
            return
        image, depth_in = collate(samples, dtype=self.dtype)
        if self.variant == "stats_only":
            with torch.no_grad():
                forward_batch(self.model, image, depth_in, mode="train")
            self.events.append({"event": "update", "batch": k, "inner": 0})
            self.step += 1
            return
        sparse_values, sparse_mask = depth_value_tensors([s.sparse for s in samples], self.dtype)
        if int(sparse_mask.sum()) == 0:
            self.events.append({"event": "skip", "batch": k, "reason": "empty_support"})
            return
        for i in range(self.cfg.inner_iter):
            pred, _ = forward_batch(self.model, image, depth_in, mode="train")
            report = adapt_loss(pred, (sparse_values, sparse_mask), image, None, self.weights)
            _check_finite(report.total, self.step, "BN adaptation loss")
            self.opt.zero_grad()
            report.total.backward()
            self.opt.step()
            self.loss_rows.append(
                LossRow(
                    self.step,
                    report.components["l_z"],
                    report.components["l_sm"],
                    0.0,
                    float(report.total.detach()),
                    report.valid_point_count,
                )
            )
            self.events.append({"event": "update", "batch": k, "inner": i})
            self.step += 1


class _CoTTARunner(_StreamRunner):
    """Mean-teacher consistency baseline: the student updates all parameters
    on sparse/smoothness losses plus an L1 pull toward the frozen-then-EMA
    teacher prediction. Retains two full parameter sets (student + teacher);
    the third loss-row column holds the consistency term.
    """

    def __init__(self, model, cfg, depth_range, dataset_tag):
        super().__init__(model, depth_range, dataset_tag, method_tag="cotta", n_param_sets=2)
        self.cfg = cfg
        self.teacher = copy.deepcopy(model)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.teacher.eval()
        self.opt = torch.optim.Adam(
            trainable_parameters(model, "all"), lr=cfg.learning_rate
        )

    def update(self, batch, k):
        samples = batch.samples
        if sum(s.sparse.n_valid for s in samples) == 0 and self.cfg.weights.w_z > 0:
            self.events.append({"event": "skip", "batch": k, "reason": "empty_support"})
            return
        image, depth_in = collate(samples, dtype=self.dtype)
        sparse_values, sparse_mask = depth_value_tensors([s.sparse for s in samples], self.dtype)
        use_train = self.model.config.use_batch_norm and len(samples) >= 2
        for i in range(self.cfg.inner_iter):
            with torch.no_grad():
                teacher_pred, _ = forward_batch(self.teacher, image, depth_in, mode="eval")
            pred, _ = forward_batch(
                self.model, image, depth_in, mode="train" if use_train else "eval"
            )
            l_z = sparse_consistency(pred, (sparse_values, sparse_mask))
            l_sm = local_smoothness(pred, image)
            consistency = (pred - teacher_pred).abs().mean()
            total = (
                self.cfg.weights.w_z * l_z
                + self.cfg.weights.w_sm * l_sm
                + self.cfg.consistency_weight * consistency
            )
            _check_finite(total, self.step, "consistency-baseline loss")
            self.opt.zero_grad()
            total.backward()
            self.opt.step()
            self._ema_teacher()
            self.loss_rows.append(
                LossRow(
                    self.step,
                    float(l_z.detach()),
                    float(l_sm.detach()),
                    float(consistency.detach()),
                    float(total.detach()),
                    int(sparse_mask.sum()),
                )
            )
            self.events.append({"event": "update", "batch": k, "inner": i})
            self.step += 1

    def _ema_teacher(self):
        tau = self.cfg.teacher_tau
        with torch.no_grad():
            for t, s in zip(self.teacher.parameters(), self.model.parameters()):
                t.mul_(tau).add_(s, alpha=1.0 - tau)


def stage_adapt(model, heads, stream, cfg, method="proxytta", depth_range=(0.0, 80.0), dataset_tag=""):
    """Single-pass streaming adaptation; returns (model, AdaptResult)."""
    runner = _ProxyAdaptRunner(model, heads, cfg, method, depth_range, dataset_tag)
    result = runner.run(stream)
    return model, result


def baseline_no_adapt(model, stream, depth_range=(0.0, 80.0), dataset_tag=""):
    """Score the frozen model over the stream without any updates."""
    runner = _NoAdaptRunner(model, depth_range, dataset_tag, method_tag="no_adapt")
    return model, runner.run(stream)


def baseline_bn_adapt(model, stream, variant="stats_only", cfg=None, depth_range=(0.0, 80.0), dataset_tag=""):
    cfg = cfg or StageConfig()
    runner = _BNAdaptRunner(model, variant, cfg, depth_range, dataset_tag)
    return model, runner.run(stream)


def baseline_cotta(model, stream, cfg=None, depth_range=(0.0, 80.0), dataset_tag=""):
    cfg = cfg or StageConfig()
    runner = _CoTTARunner(model, cfg, depth_range, dataset_tag)
    result = runner.run(stream)
    return model, result

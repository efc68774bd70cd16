"""Metrics, the input-modality sensitivity study, and the centroid analysis.

Depths are meters everywhere internally; every externally reported error is
millimeters, converted in exactly one place (meters_to_millimeters).
"""

import concurrent.futures
import multiprocessing
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .data.synthetic import sample_sparse_depth
from .data.types import DepthMap
from .errors import ContractError, DegenerateEmbeddingError, EmptySupportError
from .model import collate, depth_value_tensors, forward_batch
from .proxy import pool_features

_MM_PER_M = 1000.0

INPUT_MODES = ("both", "depth_only", "image_only")


def meters_to_millimeters(value):
    """The single meters -> millimeters conversion site."""
    return value * _MM_PER_M


@dataclass
class MetricsRecord:
    mae_mm: float
    rmse_mm: float
    n_pixels: int
    depth_range: tuple
    dataset_tag: str = ""
    method_tag: str = ""

    def __post_init__(self):
        self.depth_range = (float(self.depth_range[0]), float(self.depth_range[1]))
        if self.n_pixels <= 0:
            raise EmptySupportError("metrics record needs at least one evaluated pixel")


@dataclass
class SensitivityRow:
    input_mode: str  # both -> (I, z); depth_only -> (I_0, z); image_only -> (I, z_0)
    density: float
    mae_mm: float
    rmse_mm: float
    n_pixels: int


class ErrorAccumulator:
    """Streams per-pixel errors into MAE/RMSE; shared by every metrics path."""

    def __init__(self, depth_range):
        lo, hi = depth_range
        if lo > hi:
            raise ContractError("depth_range must satisfy min <= max")
        self.depth_range = (float(lo), float(hi))
        self.sum_abs = 0.0
        self.sum_sq = 0.0
        self.count = 0

    def add(self, pred, gt_values, gt_mask):
        """pred/gt_values: (..., H, W) tensors or arrays in meters."""
        pred = _to_numpy(pred)
        gt_values = _to_numpy(gt_values)
        gt_mask = _to_numpy(gt_mask).astype(bool)
        lo, hi = self.depth_range
        mask = gt_mask & (gt_values >= lo) & (gt_values <= hi)
        if not mask.any():
            return 0
        err = (pred[mask] - gt_values[mask]).astype(np.float64)
        self.sum_abs += float(np.abs(err).sum())
        self.sum_sq += float((err**2).sum())
        n = int(mask.sum())
        self.count += n
        return n

    def record(self, dataset_tag="", method_tag=""):
        if self.count == 0:
            raise EmptySupportError(
                f"no ground-truth pixels inside depth range {self.depth_range}"
            )
        mae_m = self.sum_abs / self.count
        rmse_m = (self.sum_sq / self.count) ** 0.5
        return MetricsRecord(
            mae_mm=meters_to_millimeters(mae_m),
            rmse_mm=meters_to_millimeters(rmse_m),
            n_pixels=self.count,
            depth_range=self.depth_range,
            dataset_tag=dataset_tag,
            method_tag=method_tag,
        )


def _to_numpy(x):
    if isinstance(x, DepthMap):
        return x.data
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def compute_metrics(pred, gt, depth_range, dataset_tag="", method_tag=""):
    """MAE/RMSE in millimeters over pixels with valid, in-range ground truth."""
    if isinstance(gt, DepthMap):
        gt_values, gt_mask = gt.data, gt.valid_mask
    else:
        gt_values, gt_mask = gt
    acc = ErrorAccumulator(depth_range)
    acc.add(pred, gt_values, gt_mask)
    return acc.record(dataset_tag=dataset_tag, method_tag=method_tag)


def _mode_inputs(samples, mode, dtype):
    if mode not in INPUT_MODES:
        raise ContractError(f"unknown input mode {mode!r}; expected one of {INPUT_MODES}")
    return collate(
        samples,
        dtype=dtype,
        null_image=(mode == "depth_only"),
        null_depth=(mode == "image_only"),
    )


def evaluate_samples(
    model,
    samples,
    depth_range,
    input_mode="both",
    batch_size=16,
    dataset_tag="",
    method_tag="",
):
    """Eval-mode metrics for a dataset under one input-modality condition."""
    dtype = next(model.parameters()).dtype
    acc = ErrorAccumulator(depth_range)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        image, depth_in = _mode_inputs(chunk, input_mode, dtype)
        with torch.no_grad():
            pred, _ = forward_batch(model, image, depth_in, mode="eval")
        gt_values, gt_mask = depth_value_tensors([s.gt for s in chunk], dtype)
        acc.add(pred, gt_values, gt_mask)
    return acc.record(dataset_tag=dataset_tag, method_tag=method_tag)


def _resample_density(samples, density, seed):
    out = []
    for idx, sample in enumerate(samples):
        sparse = sample_sparse_depth(sample.gt, density, "uniform", seed * 1_000_003 + idx)
        out.append(
            type(sample)(
                image=sample.image,
                sparse=sparse,
                gt=sample.gt,
                domain_tag=sample.domain_tag,
                seed=sample.seed,
            )
        )
    return out


def _sensitivity_rows_for_density(model, samples, density, depth_range, seed, batch_size):
    resampled = _resample_density(samples, density, seed)
    rows = []
    for mode in ("both", "depth_only"):
        rec = evaluate_samples(model, resampled, depth_range, mode, batch_size)
        rows.append(
            SensitivityRow(
                input_mode=mode,
                density=density,
                mae_mm=rec.mae_mm,
                rmse_mm=rec.rmse_mm,
                n_pixels=rec.n_pixels,
            )
        )
    return rows


def _density_worker(args):
    model, samples, density, depth_range, seed, batch_size = args
    return _sensitivity_rows_for_density(model, samples, density, depth_range, seed, batch_size)


def sensitivity_study(model, samples, densities, depth_range, seed=0, batch_size=16, jobs=1):
    """Per-density metrics for (I, z) and (I_0, z), plus one (I, z_0) row.

    The image-only condition does not depend on sparse density, so it is
    reported once with density 0. Rows for mode="both" go through the same
    evaluate/compute path as every other metric in the package.
    """
    model.eval()
    densities = list(densities)
    rows = []
    if jobs > 1 and len(densities) > 1:
        args = [(model, samples, d, depth_range, seed, batch_size) for d in densities]
        # Spawned workers: forking a multi-threaded torch process can deadlock.
        ctx = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            for chunk in pool.map(_density_worker, args):
                rows.extend(chunk)
    else:
        for density in densities:
            rows.extend(
                _sensitivity_rows_for_density(model, samples, density, depth_range, seed, batch_size)
            )
    image_only = evaluate_samples(model, samples, depth_range, "image_only", batch_size)
    rows.append(
        SensitivityRow(
            input_mode="image_only",
            density=0.0,
            mae_mm=image_only.mae_mm,
            rmse_mm=image_only.rmse_mm,
            n_pixels=image_only.n_pixels,
        )
    )
    return rows


# ---------------------------------------------------------------------------
# Centroid analysis of proxy vs both-input embedding clouds.

CLOUD_LABELS = ("source_both", "source_proxy", "target_both", "target_proxy")


@dataclass
class CentroidReport:
    labels: tuple
    distances: list  # 4x4 cosine distances between cloud centroids
    proxy_closer: bool
    cloud_sizes: dict

    def distance(self, a, b):
        return self.distances[self.labels.index(a)][self.labels.index(b)]

    def as_dict(self):
        return asdict(self)


def embedding_clouds(model, heads, samples, batch_size=16):
    """Per-sample q (both-input) and p (depth-only proxy) embeddings."""
    dtype = next(model.parameters()).dtype
    qs, ps = [], []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            image, depth_in = collate(chunk, dtype=dtype)
            _, taps_both = forward_batch(model, image, depth_in, mode="eval")
            _, taps_depth = forward_batch(model, torch.zeros_like(image), depth_in, mode="eval")
            qs.append(heads.target_projector(pool_features(taps_both.fused_feat)))
            ps.append(heads.predictor(heads.online_projector(pool_features(taps_depth.fused_feat))))
    return torch.cat(qs).cpu().numpy(), torch.cat(ps).cpu().numpy()


def _centroid_cosine_distance(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        raise DegenerateEmbeddingError("embedding centroid has (near-)zero norm")
    return float(1.0 - np.dot(a, b) / (na * nb))


def centroid_analysis(model, heads, source_samples, target_samples, batch_size=16):
    """Pairwise cosine distances between the four embedding-cloud centroids.

    Flags whether the target proxy centroid sits closer to the source
    both-input centroid than the target both-input centroid does.
    """
    source_q, source_p = embedding_clouds(model, heads, source_samples, batch_size)
    target_q, target_p = embedding_clouds(model, heads, target_samples, batch_size)
    clouds = {
        "source_both": source_q,
        "source_proxy": source_p,
        "target_both": target_q,
        "target_proxy": target_p,
    }
    centroids = {k: v.mean(axis=0) for k, v in clouds.items()}
    n = len(CLOUD_LABELS)
    dist = [[0.0] * n for _ in range(n)]
    for i, a in enumerate(CLOUD_LABELS):
        for j, b in enumerate(CLOUD_LABELS):
            dist[i][j] = 0.0 if i == j else _centroid_cosine_distance(centroids[a], centroids[b])
    proxy_closer = (
        dist[CLOUD_LABELS.index("target_proxy")][CLOUD_LABELS.index("source_both")]
        < dist[CLOUD_LABELS.index("target_both")][CLOUD_LABELS.index("source_both")]
    )
    return CentroidReport(
        labels=CLOUD_LABELS,
        distances=dist,
        proxy_closer=bool(proxy_closer),
        cloud_sizes={k: int(v.shape[0]) for k, v in clouds.items()},
    )

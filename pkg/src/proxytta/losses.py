"""Adaptation objective and its components.

All losses are pure functions of torch tensors (domain objects are coerced),
differentiable w.r.t. the prediction, and averaged so that:

  sparse_consistency: mean L1 over the valid sparse-point set
  local_smoothness:   edge-weighted L1 of forward-difference depth gradients,
                      summed over both axes and divided by H*W
  proxy_consistency:  1 - cosine(p, q) on an adaptation embedding pair
  supervised_loss:    mean L1 over valid ground-truth pixels

Empty masks raise EmptySupportError instead of returning a fake zero.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .data.types import DepthMap, Image
from .errors import ConfigurationError, ContractError, EmptySupportError
from .proxy import EmbeddingPair, cosine_loss


@dataclass(frozen=True)
class LossWeights:
    w_z: float = 1.0
    w_sm: float = 1.0
    w_proxy: float = 1.0

    def __post_init__(self):
        if min(self.w_z, self.w_sm, self.w_proxy) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if max(self.w_z, self.w_sm, self.w_proxy) == 0:
            raise ConfigurationError("at least one loss weight must be positive")

    def scaled(self, factor):
        return LossWeights(self.w_z * factor, self.w_sm * factor, self.w_proxy * factor)


@dataclass
class LossReport:
    total: torch.Tensor  # scalar, still attached to the graph
    components: dict  # {"l_z", "l_sm", "l_proxy"} -> float
    valid_point_count: int

    def component(self, name):
        return self.components[name]


def _as_pred(pred):
    if isinstance(pred, DepthMap):
        return torch.from_numpy(pred.data)
    if isinstance(pred, np.ndarray):
        return torch.from_numpy(pred)
    return pred


def _as_depth_pair(z):
    if isinstance(z, DepthMap):
        return torch.from_numpy(z.data), torch.from_numpy(z.valid_mask)
    values, mask = z
    if not torch.is_tensor(values):
        values = torch.from_numpy(np.asarray(values))
    if not torch.is_tensor(mask):
        mask = torch.from_numpy(np.asarray(mask))
    return values, mask.bool()


def _as_image(image):
    """Coerce to (..., 3, H, W)."""
    if isinstance(image, Image):
        return torch.from_numpy(image.data).permute(2, 0, 1)
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image)
    if image.dim() >= 3 and image.shape[-1] == 3 and image.shape[-3] != 3:
        image = image.movedim(-1, -3)
    return image


def sparse_consistency(pred, z):
    """Mean L1 between prediction and sparse depth over its valid set."""
    pred = _as_pred(pred)
    values, mask = _as_depth_pair(z)
    values = values.to(pred.dtype)
    if pred.shape != values.shape or pred.shape != mask.shape:
        raise ContractError(
            f"sparse_consistency shape mismatch: pred {tuple(pred.shape)} vs z {tuple(values.shape)}"
        )
    n = int(mask.sum())
    if n == 0:
        raise EmptySupportError("sparse depth has no valid points")
    diff = (pred - values).abs()
    return diff[mask].sum() / n


def local_smoothness(pred, image):
    """Edge-aware smoothness: exp(-|dI|)-weighted L1 of depth gradients.

    Forward differences along x and y; the last column/row is excluded from
    the respective term; the sum is normalized by the full pixel count H*W
    (per batch element). Image gradients use the channel-mean intensity.
    """
    pred = _as_pred(pred)
    image = _as_image(image).to(pred.dtype)
    if pred.dim() == 2:
        pred_b = pred.unsqueeze(0)
        image_b = image.unsqueeze(0) if image.dim() == 3 else image
    elif pred.dim() == 3:
        pred_b = pred
        image_b = image
    else:
        raise ContractError("local_smoothness expects (H, W) or (B, H, W) predictions")
    if image_b.shape[-2:] != pred_b.shape[-2:] or image_b.shape[-3] != 3:
        raise ContractError(
            f"local_smoothness shape mismatch: pred {tuple(pred.shape)} vs image {tuple(image.shape)}"
        )

    intensity = image_b.mean(dim=-3)
    dx_pred = (pred_b[..., :, 1:] - pred_b[..., :, :-1]).abs()
    dy_pred = (pred_b[..., 1:, :] - pred_b[..., :-1, :]).abs()
    weight_x = torch.exp(-(intensity[..., :, 1:] - intensity[..., :, :-1]).abs())
    weight_y = torch.exp(-(intensity[..., 1:, :] - intensity[..., :-1, :]).abs())

    b, h, w = pred_b.shape
    total = (weight_x * dx_pred).sum() + (weight_y * dy_pred).sum()
    return total / (b * h * w)


def proxy_consistency(pair):
    """Cosine objective on a target-adaptation embedding pair."""
    if not isinstance(pair, EmbeddingPair):
        raise ContractError("proxy_consistency expects an EmbeddingPair")
    return cosine_loss(pair.p, pair.q)


def supervised_loss(pred, gt):
    """Mean L1 over valid ground-truth pixels (pretraining objective)."""
    pred = _as_pred(pred)
    values, mask = _as_depth_pair(gt)
    values = values.to(pred.dtype)
    if pred.shape != values.shape:
        raise ContractError(
            f"supervised_loss shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(values.shape)}"
        )
    n = int(mask.sum())
    if n == 0:
        raise EmptySupportError("ground truth has no valid pixels")
    return (pred - values).abs()[mask].sum() / n


def adapt_loss(pred, z, image, pair, weights):
    """Weighted sum of the three adaptation terms.

    Zero-weighted components are still evaluated (detached) so ablation runs
    log every column, but they contribute nothing to the gradient graph. The
    proxy term may pass pair=None only when w_proxy == 0.
    """
    pred = _as_pred(pred)
    _, mask = _as_depth_pair(z)
    valid_points = int(mask.sum())

    total = pred.new_zeros(())
    components = {}

    if weights.w_z > 0:
        l_z = sparse_consistency(pred, z)
        total = total + weights.w_z * l_z
        components["l_z"] = float(l_z.detach())
    else:
        if valid_points > 0:
            with torch.no_grad():
                components["l_z"] = float(sparse_consistency(pred, z))
        else:
            components["l_z"] = 0.0

    if weights.w_sm > 0:
        l_sm = local_smoothness(pred, image)
        total = total + weights.w_sm * l_sm
        components["l_sm"] = float(l_sm.detach())
    else:
        with torch.no_grad():
            components["l_sm"] = float(local_smoothness(pred, image))

    if weights.w_proxy > 0:
        if pair is None:
            raise ContractError("adapt_loss needs an embedding pair when w_proxy > 0")
        l_proxy = proxy_consistency(pair)
        total = total + weights.w_proxy * l_proxy
        components["l_proxy"] = float(l_proxy.detach())
    else:
        if pair is not None:
            with torch.no_grad():
                components["l_proxy"] = float(proxy_consistency(pair))
        else:
            components["l_proxy"] = 0.0

    return LossReport(total=total, components=components, valid_point_count=valid_points)

"""Proxy-embedding heads and objectives.

An online projector and a predictor learn, on source data, to map pooled
depth-only encoder features onto the (EMA-tracked) target projection of
both-modality features. At test time the frozen heads turn depth-only
features into a proxy for source-domain embeddings; pulling the target
both-modality embedding toward that proxy is the adaptation signal.

Stop-gradient placement is load-bearing and mirrored exactly:
  preparation:  p = predictor(online(stopgrad(feat_depth_only)))
                q = stopgrad(target(feat_both))
  adaptation:   p = stopgrad(predictor(online(feat_depth_only)))
                q = target(feat_both)            # the only trainable path
"""

import copy
from dataclasses import dataclass

import torch
from torch import nn

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateEmbeddingError,
    LifecycleError,
)

NORM_EPS = 1e-12


@dataclass
class EmbeddingPair:
    p: torch.Tensor
    q: torch.Tensor
    role: str  # "source_prep" | "target_adapt"


def _mlp(cin, hidden, cout):
    return nn.Sequential(nn.Linear(cin, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, cout))


class ProxyHeads(nn.Module):
    """Online projector, EMA target projector, and predictor.

    The target projector never receives gradient updates: it starts as a copy
    of the online projector and only moves through ema_update. freeze() marks
    the heads as prepared; frozen heads are immutable at adaptation time.
    """

    def __init__(self, pool_dim, embed_dim=128, hidden_dim=128, tau=0.996):
        super().__init__()
        if not 0.0 <= tau <= 1.0:
            raise ConfigurationError("tau must lie in [0, 1]")
        if pool_dim < 1 or embed_dim < 1 or hidden_dim < 1:
            raise ConfigurationError("head dimensions must be >= 1")
        self.pool_dim = int(pool_dim)
        self.embed_dim = int(embed_dim)
        self.hidden_dim = int(hidden_dim)
        self.tau = float(tau)
        self.online_projector = _mlp(pool_dim, hidden_dim, embed_dim)
        self.target_projector = copy.deepcopy(self.online_projector)
        for p in self.target_projector.parameters():
            p.requires_grad_(False)
        self.predictor = _mlp(embed_dim, hidden_dim, embed_dim)
        self._prepared = False

    @property
    def prepared(self):
        return self._prepared

    def freeze(self):
        """Mark preparation complete; all three heads stop receiving updates."""
        for p in self.parameters():
            p.requires_grad_(False)
        self._prepared = True
        return self

    def trainable_parameters(self):
        """The gradient-trained subset: online projector + predictor."""
        return list(self.online_projector.parameters()) + list(self.predictor.parameters())


def pool_features(feat):
    """Global average pool (C, h, w) or (B, C, h, w) over the spatial dims."""
    if feat.dim() == 3:
        return feat.mean(dim=(-2, -1))
    if feat.dim() == 4:
        return feat.mean(dim=(-2, -1))
    raise ContractError(f"pool_features expects (C, h, w) or (B, C, h, w), got {tuple(feat.shape)}")


def _check_pool_dim(heads, pooled):
    if pooled.shape[-1] != heads.pool_dim:
        raise ContractError(
            f"pooled feature dim {pooled.shape[-1]} does not match heads.pool_dim {heads.pool_dim}"
        )


def make_source_pair(heads, feat_depth_only, feat_both):
    """Preparation-stage pair: trainable p-branch, fully stopped q-branch."""
    p_in = pool_features(feat_depth_only).detach()
    _check_pool_dim(heads, p_in)
    p = heads.predictor(heads.online_projector(p_in))
    with torch.no_grad():
        q_in = pool_features(feat_both)
        _check_pool_dim(heads, q_in)
        q = heads.target_projector(q_in)
    return EmbeddingPair(p=p, q=q, role="source_prep")


def make_target_pair(heads, feat_depth_only, feat_both):
    """Adaptation-stage pair: p fully stopped, q flowing back into the encoder."""
    if not heads.prepared:
        raise LifecycleError("proxy heads must be prepared (frozen) before building target pairs")
    with torch.no_grad():
        p_in = pool_features(feat_depth_only)
        _check_pool_dim(heads, p_in)
        p = heads.predictor(heads.online_projector(p_in))
    q_in = pool_features(feat_both)
    _check_pool_dim(heads, q_in)
    q = heads.target_projector(q_in)
    return EmbeddingPair(p=p.detach(), q=q, role="target_adapt")


def cosine_distance(p, q):
    """Per-pair 1 - cos(p, q); accepts vectors or (B, D) batches."""
    if p.shape != q.shape:
        raise ContractError(f"embedding shapes differ: {tuple(p.shape)} vs {tuple(q.shape)}")
    if p.dim() == 1:
        p = p.unsqueeze(0)
        q = q.unsqueeze(0)
        squeeze = True
    elif p.dim() == 2:
        squeeze = False
    else:
        raise ContractError("embeddings must be 1-D vectors or (B, D) batches")
    p_norm = p.norm(dim=-1)
    q_norm = q.norm(dim=-1)
    too_small = (p_norm <= NORM_EPS) | (q_norm <= NORM_EPS)
    if bool(too_small.any()):
        raise DegenerateEmbeddingError(
            f"embedding norm below {NORM_EPS}; representation collapsed"
        )
    cos = (p * q).sum(dim=-1) / (p_norm * q_norm)
    dist = 1.0 - cos
    return dist[0] if squeeze else dist


def cosine_loss(p, q):
    """1 - cosine similarity, averaged over the batch; range [0, 2]."""
    return cosine_distance(p, q).mean()


def ema_update(heads):
    """target <- tau * target + (1 - tau) * online; online/predictor untouched."""
    with torch.no_grad():
        for tgt, onl in zip(heads.target_projector.parameters(), heads.online_projector.parameters()):
            if tgt.shape != onl.shape:
                raise ContractError("online/target projector shapes diverged")
            tgt.mul_(heads.tau).add_(onl, alpha=1.0 - heads.tau)
    return heads

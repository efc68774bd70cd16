"""Reference dual-branch depth-completion network.

Three strided-conv encoder stages per modality (image 3ch, depth 2ch: raw
sparse map + validity mask), concatenation fusion at H/8 x W/8, and a 3-stage
nearest-neighbor upsampling decoder with encoder skips. A residual adaptation
block can be inserted after the last image-encoder stage; it is
zero-initialized so insertion leaves the pretrained function untouched, and
its output is also routed as a skip into the first decoder stage.

Parameters are partitioned into stable named groups (image_encoder,
depth_encoder, fusion, decoder, adaptation_layer, bn_affine, bn_stats) so the
adaptation variants can select exactly which subset trains.
"""

import io
import json
import zipfile
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, ContractError, DataFormatError
from .data.types import DepthMap, Image

PARAM_GROUPS = (
    "image_encoder",
    "depth_encoder",
    "fusion",
    "decoder",
    "adaptation_layer",
    "bn_affine",
    "bn_stats",
)

SELECTORS = ("adaptation_only", "adaptation_plus_bn", "bn_affine_only", "all")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    image_channels: tuple = (16, 32, 64)
    depth_channels: tuple = (16, 32, 64)
    fusion_width: int = 64
    decoder_widths: tuple = (64, 32, 16)
    use_batch_norm: bool = True
    adaptation_channels: int = 8
    output_scale: float = 12.0

    def __post_init__(self):
        object.__setattr__(self, "image_channels", tuple(int(c) for c in self.image_channels))
        object.__setattr__(self, "depth_channels", tuple(int(c) for c in self.depth_channels))
        object.__setattr__(self, "decoder_widths", tuple(int(c) for c in self.decoder_widths))
        if len(self.image_channels) != 3 or len(self.depth_channels) != 3:
            raise ConfigurationError("both encoders need exactly 3 stage widths")
        if len(self.decoder_widths) != 3:
            raise ConfigurationError("decoder needs exactly 3 stage widths")
        widths = self.image_channels + self.depth_channels + self.decoder_widths
        if min(widths) < 1 or self.fusion_width < 1 or self.adaptation_channels < 1:
            raise ConfigurationError("all layer widths must be >= 1")
        if self.height % 8 != 0 or self.width % 8 != 0:
            raise ConfigurationError("height and width must be divisible by 8 (3 halvings)")
        if self.output_scale <= 0:
            raise ConfigurationError("output_scale must be positive")


@dataclass
class FeatureTaps:
    """Named activations exposed by a forward pass."""

    image_feat: torch.Tensor  # final image-encoder activation (post adaptation layer)
    depth_feat: torch.Tensor  # final depth-encoder activation
    fused_feat: torch.Tensor  # post-fusion activation at H/8 x W/8; proxy input
    decoder_skips: list = field(default_factory=list)


class _ConvBlock(nn.Module):
    def __init__(self, cin, cout, use_bn, stride=1, kernel=3):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=not use_bn)
        self.bn = nn.BatchNorm2d(cout) if use_bn else None

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return torch.relu(x)


class _Encoder(nn.Module):
    def __init__(self, cin, widths, use_bn):
        super().__init__()
        stages = []
        prev = cin
        for cout in widths:
            stages.append(_ConvBlock(prev, cout, use_bn, stride=2))
            prev = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return x, feats


class _AdaptationLayer(nn.Module):
    """Residual bottleneck y = x + expand(relu(reduce(x))).

    The expand conv is zero-initialized, so a freshly inserted layer is an
    exact identity and the pretrained function is preserved at step 0.
    """

    def __init__(self, channels, hidden):
        super().__init__()
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.expand = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.expand.weight)
        nn.init.zeros_(self.expand.bias)

    def forward(self, x):
        return x + self.expand(torch.relu(self.reduce(x)))


class _Decoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        use_bn = config.use_batch_norm
        img_c, dep_c = config.image_channels, config.depth_channels
        w0, w1, w2 = config.decoder_widths
        # Stage 0 consumes the fused features plus the (possibly adapted)
        # image-top skip. Later stages take depth-encoder skips only, so every
        # image pathway into the output passes through the adaptation point.
        self.block0 = _ConvBlock(config.fusion_width + img_c[2], w0, use_bn)
        self.block1 = _ConvBlock(w0 + dep_c[1], w1, use_bn)
        self.block2 = _ConvBlock(w1 + dep_c[0], w2, use_bn)
        self.head = nn.Conv2d(w2, 1, 3, padding=1)

    def forward(self, fused, image_top, img_feats, dep_feats):
        skips = []
        x = self.block0(torch.cat([fused, image_top], dim=1))
        skips.append(x)
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        x = self.block1(torch.cat([x, dep_feats[1]], dim=1))
        skips.append(x)
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        x = self.block2(torch.cat([x, dep_feats[0]], dim=1))
        skips.append(x)
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        return self.head(x), skips


class DepthCompletionModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        use_bn = config.use_batch_norm
        self.image_encoder = _Encoder(3, config.image_channels, use_bn)
        self.depth_encoder = _Encoder(2, config.depth_channels, use_bn)
        self.fusion = _ConvBlock(
            config.image_channels[2] + config.depth_channels[2],
            config.fusion_width,
            use_bn,
            kernel=1,
        )
        self.decoder = _Decoder(config)
        self.adaptation_layer = None

    @property
    def has_adaptation_layer(self):
        return self.adaptation_layer is not None

    def forward(self, image, depth):
        """image: (B, 3, H, W), depth: (B, 2, H, W) -> (pred (B, H, W), FeatureTaps)."""
        if image.dim() != 4 or depth.dim() != 4:
            raise ContractError("forward expects batched (B, C, H, W) tensors")
        if image.shape[1] != 3 or depth.shape[1] != 2:
            raise ContractError("image must have 3 channels and depth input 2 (values + mask)")
        if image.shape[2:] != depth.shape[2:]:
            raise ContractError("image and depth input must share H x W")
        if image.shape[2] % 8 != 0 or image.shape[3] % 8 != 0:
            raise ContractError("input H and W must be divisible by 8")
        if self.training and self.config.use_batch_norm and image.shape[0] < 2:
            raise ContractError("train-mode forward with batch norm requires batch size >= 2")

        image_top, img_feats = self.image_encoder(image)
        if self.adaptation_layer is not None:
            image_top = self.adaptation_layer(image_top)
        depth_top, dep_feats = self.depth_encoder(depth)
        fused = self.fusion(torch.cat([image_top, depth_top], dim=1))
        logits, skips = self.decoder(fused, image_top, img_feats, dep_feats)
        pred = self.config.output_scale * torch.sigmoid(logits.squeeze(1))
        taps = FeatureTaps(
            image_feat=image_top, depth_feat=depth_top, fused_feat=fused, decoder_skips=skips
        )
        return pred, taps


def init_model(config, seed):
    """Deterministically initialized model (no adaptation layer yet)."""
    torch.manual_seed(seed)
    return DepthCompletionModel(config)


def insert_adaptation_layer(model, seed=0):
    """Insert the residual adaptation block after the last image-encoder stage.

    All pre-existing parameters are untouched; the zero-initialized expand conv
    makes the inserted block an exact identity.
    """
    if model.has_adaptation_layer:
        raise ContractError("adaptation layer already inserted")
    torch.manual_seed(seed)
    layer = _AdaptationLayer(model.config.image_channels[2], model.config.adaptation_channels)
    layer.to(dtype=next(model.parameters()).dtype)
    model.adaptation_layer = layer
    return model


def group_of(name):
    """Map a state_dict key onto its parameter group."""
    leaf = name.rsplit(".", 1)[-1]
    if ".bn." in name or name.startswith("bn."):
        if leaf in ("running_mean", "running_var", "num_batches_tracked"):
            return "bn_stats"
        return "bn_affine"
    for prefix in ("adaptation_layer", "image_encoder", "depth_encoder", "fusion", "decoder"):
        if name.startswith(prefix + "."):
            return prefix
    raise ContractError(f"parameter {name!r} does not belong to any group")


def partition_params(model, selector):
    """Disjoint, exhaustive split of state_dict names into (trainable, frozen)."""
    if selector not in SELECTORS:
        raise ConfigurationError(f"unknown selector {selector!r}; expected one of {SELECTORS}")
    if selector in ("adaptation_plus_bn", "bn_affine_only") and not model.config.use_batch_norm:
        raise ConfigurationError(f"selector {selector!r} requires a batch-norm model")
    if selector in ("adaptation_only", "adaptation_plus_bn") and not model.has_adaptation_layer:
        raise ConfigurationError(f"selector {selector!r} requires an inserted adaptation layer")

    trainable_groups = {
        "adaptation_only": {"adaptation_layer"},
        "adaptation_plus_bn": {"adaptation_layer", "bn_affine"},
        "bn_affine_only": {"bn_affine"},
        "all": {"image_encoder", "depth_encoder", "fusion", "decoder", "adaptation_layer", "bn_affine"},
    }[selector]
    param_names = {n for n, _ in model.named_parameters()}
    trainable, frozen = [], []
    for name in model.state_dict():
        if name in param_names and group_of(name) in trainable_groups:
            trainable.append(name)
        else:
            frozen.append(name)
    return trainable, frozen


def trainable_parameters(model, selector):
    names, _ = partition_params(model, selector)
    wanted = set(names)
    return [p for n, p in model.named_parameters() if n in wanted]


def parameter_count_by_group(model):
    counts = {g: 0 for g in PARAM_GROUPS}
    for name, param in model.named_parameters():
        counts[group_of(name)] += param.numel()
    return counts


def state_bytes(model, names=None):
    """Raw bytes of (a subset of) the state dict, for byte-equality checks."""
    state = model.state_dict()
    keys = names if names is not None else list(state)
    return {k: state[k].detach().cpu().numpy().tobytes() for k in keys}


# ---------------------------------------------------------------------------
# Sample <-> tensor plumbing


def image_tensor(images, dtype=torch.float32):
    """Stack Images into (B, 3, H, W)."""
    arr = np.stack([im.data for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def depth_input_tensor(depths, dtype=torch.float32):
    """Stack DepthMaps into the 2-channel (values, validity) input (B, 2, H, W)."""
    vals = np.stack([d.data for d in depths])
    mask = np.stack([d.valid_mask.astype(np.float32) for d in depths])
    arr = np.stack([vals, mask], axis=1)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def depth_value_tensors(depths, dtype=torch.float32):
    """Stack DepthMaps into ((B, H, W) values, (B, H, W) bool mask)."""
    vals = torch.from_numpy(np.stack([d.data for d in depths])).to(dtype)
    mask = torch.from_numpy(np.stack([d.valid_mask for d in depths]))
    return vals, mask


def collate(samples, dtype=torch.float32, null_image=False, null_depth=False):
    """Batch tensors for a list of Samples, optionally zeroing a modality."""
    image = image_tensor([s.image for s in samples], dtype)
    depth_in = depth_input_tensor([s.sparse for s in samples], dtype)
    if null_image:
        image = torch.zeros_like(image)
    if null_depth:
        depth_in = torch.zeros_like(depth_in)
    return image, depth_in


def forward_batch(model, image, depth_in, mode="eval"):
    """Mode-aware forward. Gradient recording is controlled by the caller."""
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    try:
        return model(image, depth_in)
    finally:
        model.eval()


def forward_sample(model, image, sparse, mode="eval"):
    """Single-sample convenience wrapper returning a DepthMap prediction."""
    if not isinstance(image, Image) or not isinstance(sparse, DepthMap):
        raise ContractError("forward_sample expects Image and DepthMap inputs")
    if (image.height, image.width) != (sparse.height, sparse.width):
        raise ContractError("image and sparse depth must share H x W")
    img_t = image_tensor([image], next(model.parameters()).dtype)
    dep_t = depth_input_tensor([sparse], next(model.parameters()).dtype)
    with torch.no_grad():
        pred, taps = forward_batch(model, img_t, dep_t, mode)
    data = pred[0].cpu().numpy().astype(np.float32)
    return DepthMap(data=data, valid_mask=data > 0.0), taps


# ---------------------------------------------------------------------------
# Checkpoint archive: zip of header.json + one .npy per tensor.


def save_checkpoint(path, model, heads=None, extra=None):
    from .proxy import ProxyHeads  # local import to avoid a cycle

    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(model.config),
        "adaptation_inserted": model.has_adaptation_layer,
        "proxy": None,
        "extra": extra or {},
    }
    if heads is not None:
        if not isinstance(heads, ProxyHeads):
            raise ContractError("heads must be a ProxyHeads instance")
        header["proxy"] = {
            "pool_dim": heads.pool_dim,
            "embed_dim": heads.embed_dim,
            "hidden_dim": heads.hidden_dim,
            "tau": heads.tau,
            "prepared": heads.prepared,
        }

    def _entry(zf, name, payload):
        info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, payload)

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        _entry(zf, "header.json", json.dumps(header, indent=2, sort_keys=True))
        for key, tensor in model.state_dict().items():
            _entry(zf, f"tensors/model/{key}.npy", _npy_bytes(tensor))
        if heads is not None:
            for key, tensor in heads.state_dict().items():
                _entry(zf, f"tensors/proxy/{key}.npy", _npy_bytes(tensor))
    return path


def load_checkpoint(path):
    """Returns (model, heads-or-None, header)."""
    from .proxy import ProxyHeads

    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as exc:
        raise DataFormatError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError:
            raise DataFormatError(f"checkpoint {path} lacks header.json") from None
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise DataFormatError(
                f"checkpoint {path} has unsupported format version {header.get('format_version')}"
            )
        config = ModelConfig(**header["model_config"])
        model = init_model(config, seed=0)
        if header.get("adaptation_inserted"):
            insert_adaptation_layer(model, seed=0)
        model.load_state_dict(_read_group(zf, "tensors/model/"))

        heads = None
        meta = header.get("proxy")
        if meta is not None:
            heads = ProxyHeads(
                pool_dim=meta["pool_dim"],
                embed_dim=meta["embed_dim"],
                hidden_dim=meta["hidden_dim"],
                tau=meta["tau"],
            )
            heads.load_state_dict(_read_group(zf, "tensors/proxy/"))
            if meta.get("prepared"):
                heads.freeze()
    return model, heads, header


def _npy_bytes(tensor):
    buf = io.BytesIO()
    arr = tensor.detach().cpu().numpy()
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    np.save(buf, arr)
    return buf.getvalue()


def _read_group(zf, prefix):
    state = {}
    for name in zf.namelist():
        if name.startswith(prefix) and name.endswith(".npy"):
            key = name[len(prefix):-len(".npy")]
            arr = np.load(io.BytesIO(zf.read(name)))
            state[key] = torch.from_numpy(arr)
    return state

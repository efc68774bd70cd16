"""On-disk dataset format.

Layout (KITTI-convention storage, so real data can be dropped in later):

    <root>/image/<id>.png    8-bit RGB
    <root>/sparse/<id>.png   16-bit grayscale, depth * 256, 0 = missing
    <root>/gt/<id>.png       same encoding
    <root>/manifest.json     ids in stream order + generator config + seed

Images round-trip bit-exactly (intensities live on the 8-bit grid); depths
round-trip within one quantization step of 1/256 m.
"""

import json
import os

import numpy as np
from PIL import Image as PILImage

from ..errors import DataFormatError
from .types import DepthMap, Image, Sample

MANIFEST_NAME = "manifest.json"
DEPTH_SCALE = 256.0


def write_sample_dir(samples, path, generator_config=None, seed=None):
    """Write samples under `path`; ids are zero-padded stream positions."""
    samples = list(samples)
    for sub in ("image", "sparse", "gt"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)
    ids = [f"{i:06d}" for i in range(len(samples))]
    for sid, sample in zip(ids, samples):
        _write_image(os.path.join(path, "image", sid + ".png"), sample.image)
        _write_depth(os.path.join(path, "sparse", sid + ".png"), sample.sparse)
        _write_depth(os.path.join(path, "gt", sid + ".png"), sample.gt)
    manifest = {
        "format_version": 1,
        "ids": ids,
        "seed": seed,
        "generator_config": generator_config,
        "domain_tags": [s.domain_tag for s in samples],
        "seeds": [s.seed for s in samples],
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ids


def read_sample_dir(path):
    """Read samples back in manifest order."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise DataFormatError(f"missing manifest: {manifest_path}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"malformed manifest {manifest_path}: {exc}") from exc
    ids = manifest.get("ids")
    if not isinstance(ids, list):
        raise DataFormatError(f"malformed manifest {manifest_path}: missing id list")
    tags = manifest.get("domain_tags") or ["source"] * len(ids)
    seeds = manifest.get("seeds") or [0] * len(ids)

    samples = []
    for sid, tag, seed in zip(ids, tags, seeds):
        image = _read_image(os.path.join(path, "image", sid + ".png"))
        sparse = _read_depth(os.path.join(path, "sparse", sid + ".png"))
        gt = _read_depth(os.path.join(path, "gt", sid + ".png"))
        samples.append(Sample(image=image, sparse=sparse, gt=gt, domain_tag=tag, seed=seed))
    return samples


def read_manifest(path):
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise DataFormatError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        return json.load(fh)


def _write_image(path, image):
    raw = np.rint(image.data * 255.0).astype(np.uint8)
    PILImage.fromarray(raw, mode="RGB").save(path)


def _read_image(path):
    if not os.path.isfile(path):
        raise DataFormatError(f"missing image file: {path}")
    try:
        with PILImage.open(path) as img:
            if img.mode != "RGB":
                raise DataFormatError(f"image file {path} is not 8-bit RGB (mode {img.mode})")
            raw = np.asarray(img, dtype=np.uint8)
    except DataFormatError:
        raise
    except Exception as exc:
        raise DataFormatError(f"malformed image file {path}: {exc}") from exc
    return Image((raw.astype(np.float32) / 255.0))


def _write_depth(path, depth):
    stored = np.rint(depth.data.astype(np.float64) * DEPTH_SCALE)
    # A valid pixel must survive quantization as nonzero; clamp into uint16 range.
    stored = np.where(depth.valid_mask, np.clip(stored, 1, 65535), 0)
    PILImage.fromarray(stored.astype(np.uint16)).save(path)


def _read_depth(path):
    if not os.path.isfile(path):
        raise DataFormatError(f"missing depth file: {path}")
    try:
        with PILImage.open(path) as img:
            if img.mode not in ("I", "I;16"):
                raise DataFormatError(f"depth file {path} is not 16-bit grayscale (mode {img.mode})")
            raw = np.asarray(img).astype(np.int64)
    except DataFormatError:
        raise
    except Exception as exc:
        raise DataFormatError(f"malformed depth file {path}: {exc}") from exc
    if raw.ndim != 2:
        raise DataFormatError(f"depth file {path} is not a single-channel raster")
    if (raw < 0).any():
        raise DataFormatError(f"depth file {path} contains negative stored depth")
    if (raw > 65535).any():
        raise DataFormatError(f"depth file {path} exceeds the uint16 range")
    data = (raw.astype(np.float64) / DEPTH_SCALE).astype(np.float32)
    return DepthMap(data=data, valid_mask=raw > 0)

from .types import (
    DEPTH_QUANTUM,
    DepthMap,
    Image,
    Sample,
    SceneConfig,
    ShiftConfig,
    quantize_depth,
    quantize_image,
)
from .synthetic import (
    SHIFT_PRESETS,
    apply_domain_shift,
    generate_scene,
    make_null_inputs,
    sample_sparse_depth,
    shift_preset,
)
from .streaming import Batch, SampleStream, stream_batches
from .storage import read_manifest, read_sample_dir, write_sample_dir

__all__ = [
    "DEPTH_QUANTUM",
    "DepthMap",
    "Image",
    "Sample",
    "SceneConfig",
    "ShiftConfig",
    "quantize_depth",
    "quantize_image",
    "SHIFT_PRESETS",
    "apply_domain_shift",
    "generate_scene",
    "make_null_inputs",
    "sample_sparse_depth",
    "shift_preset",
    "Batch",
    "SampleStream",
    "stream_batches",
    "read_manifest",
    "read_sample_dir",
    "write_sample_dir",
]

import json
import os

import numpy as np
import pytest
from PIL import Image as PILImage

from conftest import tiny_samples
from proxytta.data import read_manifest, read_sample_dir, write_sample_dir
from proxytta.errors import DataFormatError


def test_round_trip_is_exact(tmp_path):
    samples = tiny_samples(5)
    write_sample_dir(samples, str(tmp_path), seed=0)
    back = read_sample_dir(str(tmp_path))
    assert len(back) == 5
    for a, b in zip(samples, back):
        assert np.array_equal(a.image.data, b.image.data)
        assert np.array_equal(a.gt.data, b.gt.data)
        assert np.array_equal(a.sparse.data, b.sparse.data)
        assert np.array_equal(a.sparse.valid_mask, b.sparse.valid_mask)
        assert a.domain_tag == b.domain_tag


def test_depth_encoding_convention(tmp_path):
    sample = tiny_samples(1)[0]
    sample.gt.data[0, 0] = 12.5
    write_sample_dir([sample], str(tmp_path))
    with PILImage.open(tmp_path / "gt" / "000000.png") as img:
        raw = np.asarray(img)
    assert raw[0, 0] == 3200  # 12.5 m * 256

    with PILImage.open(tmp_path / "sparse" / "000000.png") as img:
        raw = np.asarray(img)
    back = read_sample_dir(str(tmp_path))[0]
    assert ((raw == 0) == ~back.sparse.valid_mask).all()  # 0 means missing


def test_round_trip_within_one_quantization_step(tmp_path):
    sample = tiny_samples(1)[0]
    # Knock the depths off the storage grid on purpose.
    sample.gt.data[sample.gt.valid_mask] += 0.0013
    write_sample_dir([sample], str(tmp_path))
    back = read_sample_dir(str(tmp_path))[0]
    assert np.abs(back.gt.data - sample.gt.data).max() <= 1 / 256.0


def test_manifest_preserves_order_and_config(tmp_path):
    samples = tiny_samples(4)
    write_sample_dir(samples, str(tmp_path), generator_config={"kind": "tiny"}, seed=7)
    manifest = read_manifest(str(tmp_path))
    assert manifest["ids"] == [f"{i:06d}" for i in range(4)]
    assert manifest["seed"] == 7
    assert manifest["generator_config"] == {"kind": "tiny"}


def test_missing_file_names_the_file(tmp_path):
    samples = tiny_samples(2)
    write_sample_dir(samples, str(tmp_path))
    victim = tmp_path / "sparse" / "000001.png"
    os.remove(victim)
    with pytest.raises(DataFormatError) as err:
        read_sample_dir(str(tmp_path))
    assert "000001" in str(err.value)


def test_malformed_manifest_rejected(tmp_path):
    samples = tiny_samples(1)
    write_sample_dir(samples, str(tmp_path))
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataFormatError):
        read_sample_dir(str(tmp_path))


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(DataFormatError):
        read_sample_dir(str(tmp_path))


def test_wrong_image_mode_rejected(tmp_path):
    samples = tiny_samples(1)
    write_sample_dir(samples, str(tmp_path))
    gray = PILImage.new("L", (32, 32))
    gray.save(tmp_path / "image" / "000000.png")
    with pytest.raises(DataFormatError) as err:
        read_sample_dir(str(tmp_path))
    assert "000000" in str(err.value)


def test_wrong_depth_mode_rejected(tmp_path):
    samples = tiny_samples(1)
    write_sample_dir(samples, str(tmp_path))
    rgb = PILImage.new("RGB", (32, 32))
    rgb.save(tmp_path / "gt" / "000000.png")
    with pytest.raises(DataFormatError):
        read_sample_dir(str(tmp_path))

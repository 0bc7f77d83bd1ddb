import json

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from nfalayer.data import (
    ManifestEntry,
    SyntheticConfig,
    gaussian_blob,
    generate,
    generate_samples,
    load_dataset,
    load_manifest,
    load_pair,
    quantize16,
    split_assignment,
    synthesize,
)
from nfalayer.errors import DataLoadError, ParameterError


def test_zero_amplitude_gives_empty_mask():
    blob, mask = gaussian_blob((9, 9), (4, 4), 1.0, 0.0)
    assert not mask.any() and not blob.any()
    cfg = SyntheticConfig(amplitude=(0.0, 0.0), count=3)
    assert all(synthesize(cfg, i)[1].sum() == 0 for i in range(3))


def test_blob_mask_threshold():
    _, mask = gaussian_blob((11, 11), (5, 5), 1.0, 1.0)
    # exp(-r^2/2) > 0.3  <=>  r^2 < 2 ln(1/0.3) = 2.408: the centre plus its 8 neighbours (r^2 <= 2)
    assert mask.sum() == 9


def test_same_seed_is_byte_identical(tmp_path):
    cfg = SyntheticConfig(count=6, size=(32, 32), seed=3)
    a, b = generate(cfg, tmp_path / "a"), generate(cfg, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    for sub in ("images", "masks"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    c = generate_samples(SyntheticConfig(count=6, size=(32, 32), seed=4))
    assert any(not np.array_equal(x.image, s.image) for x, s in zip(c.samples, generate_samples(cfg).samples))


def test_target_areas_and_class_imbalance():
    ds = generate_samples(SyntheticConfig(count=60, seed=1))
    areas = []
    for s in ds.samples:
        labels, n = ndimage.label(s.mask, structure=np.ones((3, 3)))
        areas.extend(np.bincount(labels.ravel())[1:].tolist())
    assert areas and min(areas) >= 1 and max(areas) <= 25
    fg = np.mean([s.mask.mean() for s in ds.samples])
    assert fg < 0.005


def test_cracks_are_thin_and_dark():
    cfg = SyntheticConfig(kind="cracks", count=4, seed=2)
    for i in range(4):
        img, mask = synthesize(cfg, i)
        assert mask.any()
        assert img[mask > 0].mean() < img[mask == 0].mean()
        # the thickest possible stroke is 3 px wide, so a 4x4 all-crack square cannot occur
        eroded = ndimage.binary_erosion(mask, structure=np.ones((4, 4)))
        assert not eroded.any()


def test_split_ratio_and_determinism():
    s = split_assignment(200, 0)
    assert (s.count("train"), s.count("val"), s.count("test")) == (120, 40, 40)
    assert s == split_assignment(200, 0)
    assert s != split_assignment(200, 1)


def test_config_validation():
    with pytest.raises(ParameterError):
        SyntheticConfig(size=(30, 32))
    with pytest.raises(ParameterError):
        SyntheticConfig(amplitude=(0.4, 0.1))
    with pytest.raises(ParameterError):
        SyntheticConfig(kind="stars")


def test_round_trip_masks_exact(tmp_path):
    cfg = SyntheticConfig(count=5, size=(32, 32), seed=9)
    path = generate(cfg, tmp_path)
    loaded = load_dataset(path)
    ref = generate_samples(cfg)
    for a, b in zip(loaded.samples, ref.samples):
        assert a.split == b.split
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.image, quantize16(b.image) / 65535.0, atol=0)
        assert np.abs(a.image - b.image).max() <= 0.5 / 65535 + 1e-15


def _write_pair(tmp_path, img, mask, img_name="i.png", mask_name="m.png"):
    Image.fromarray(img).save(tmp_path / img_name)
    Image.fromarray(mask).save(tmp_path / mask_name)
    return ManifestEntry(tmp_path / img_name, tmp_path / mask_name, "train")


def test_8bit_normalization(tmp_path):
    img = np.array([[0, 128], [255, 3]], dtype=np.uint8)
    entry = _write_pair(tmp_path, img, np.array([[0, 255], [0, 0]], dtype=np.uint8))
    image, mask = load_pair(entry)
    assert image[1, 0] == 1.0 and image[0, 0] == 0.0
    np.testing.assert_array_equal(mask, [[0, 1], [0, 0]])


def test_16bit_normalization(tmp_path):
    img = np.array([[0, 65535], [1000, 2]], dtype=np.uint16)
    entry = _write_pair(tmp_path, img, np.array([[1, 0], [0, 0]], dtype=np.uint8))
    image, mask = load_pair(entry)
    assert image[0, 1] == pytest.approx(1.0, abs=1e-4)
    assert mask[0, 0] == 1


def test_pgm_support(tmp_path):
    # 8-bit P5 with maxval 200 normalizes by 200; the mask uses 0/1
    (tmp_path / "i.pgm").write_bytes(b"P5\n# comment\n2 2\n200\n" + bytes([0, 100, 200, 50]))
    (tmp_path / "m.pgm").write_bytes(b"P5\n2 2\n1\n" + bytes([0, 1, 1, 0]))
    image, mask = load_pair(ManifestEntry(tmp_path / "i.pgm", tmp_path / "m.pgm", "test"))
    np.testing.assert_allclose(image, [[0.0, 0.5], [1.0, 0.25]])
    np.testing.assert_array_equal(mask, [[0, 1], [1, 0]])
    (tmp_path / "w.pgm").write_bytes(b"P5 2 1 1000\n" + np.array([1000, 250], dtype=">u2").tobytes())
    (tmp_path / "n.pgm").write_bytes(b"P5\n2 1\n255\n" + bytes([255, 0]))
    image, mask = load_pair(ManifestEntry(tmp_path / "w.pgm", tmp_path / "n.pgm", "test"))
    np.testing.assert_allclose(image, [[1.0, 0.25]])
    (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n" + bytes([1]))
    with pytest.raises(DataLoadError, match="truncated"):
        load_pair(ManifestEntry(tmp_path / "t.pgm", tmp_path / "t.pgm", "test"))


def test_non_binary_mask_rejected(tmp_path):
    entry = _write_pair(tmp_path, np.zeros((2, 2), np.uint8), np.array([[0, 3], [0, 0]], dtype=np.uint8))
    with pytest.raises(DataLoadError, match="not binary"):
        load_pair(entry)


def test_missing_file_and_dim_mismatch(tmp_path):
    with pytest.raises(DataLoadError, match="missing file"):
        load_pair(ManifestEntry(tmp_path / "nope.png", tmp_path / "nope_mask.png", "train"))
    entry = _write_pair(tmp_path, np.zeros((2, 3), np.uint8), np.zeros((2, 2), np.uint8))
    with pytest.raises(DataLoadError, match="dimension mismatch"):
        load_pair(entry)


def test_manifest_errors(tmp_path):
    p = tmp_path / "manifest.json"
    p.write_text("{not json")
    with pytest.raises(DataLoadError):
        load_manifest(p)
    p.write_text(json.dumps({"entries": [{"image": "a.png", "mask": "b.png", "split": "holdout"}]}))
    with pytest.raises(DataLoadError, match="unknown split"):
        load_manifest(p)
    p.write_text(json.dumps({"entries": [{"image": "a.png"}]}))
    with pytest.raises(DataLoadError, match="malformed"):
        load_manifest(p)
    p.write_text(json.dumps({"entries": [{"image": "a.png", "mask": "b.png"}]}))
    assert load_manifest(p).entries[0].split == "train"

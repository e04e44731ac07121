import numpy as np
import pytest

from latentstack.errors import FormatError, IngestionError
from latentstack.imaging import load_domain_images, load_image, preprocess, read_labels, \
    read_manifest, save_image, to_uint8, write_manifest, write_synthetic_dataset
from latentstack.synthetic import SYNTH_PAIRING, generate_domain_images


def test_preprocess_black_maps_to_minus_one():
    raw = np.zeros((10, 10, 3), dtype=np.uint8)
    out = preprocess(raw, 8)
    assert out.shape == (3, 8, 8)
    assert np.allclose(out, -1.0)


def test_preprocess_white_maps_to_plus_one():
    raw = np.full((10, 10, 3), 255, dtype=np.uint8)
    assert np.allclose(preprocess(raw, 8), 1.0)


def test_preprocess_celeba_frame_geometry():
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=(218, 178, 3), dtype=np.uint8)
    out = preprocess(raw, 64)
    assert out.shape == (3, 64, 64)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_preprocess_grayscale_broadcasts():
    raw = np.full((6, 6), 128, dtype=np.uint8)
    out = preprocess(raw, 6)
    assert out.shape == (3, 6, 6)
    assert np.allclose(out[0], out[1]) and np.allclose(out[1], out[2])


def test_to_uint8_round_trip_endpoints():
    img = np.stack([np.full((4, 4), -1.0), np.zeros((4, 4)), np.full((4, 4), 1.0)]) \
        .astype(np.float32)
    u8 = to_uint8(img)
    assert u8.shape == (4, 4, 3)
    assert u8[..., 0].max() == 0
    assert u8[..., 2].min() == 255


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = (rng.random((3, 16, 16)).astype(np.float32) * 2 - 1)
    p = tmp_path / "x.png"
    save_image(img, p)
    back = load_image(p, 16)
    # one 8-bit quantization step of error budget
    assert np.abs(back - img).max() <= (2.0 / 255.0) + 1e-6


def test_load_image_missing_file(tmp_path):
    with pytest.raises(IngestionError, match="nope.png"):
        load_image(tmp_path / "nope.png", 8)


def test_load_image_corrupt_file(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"not a png at all")
    with pytest.raises(IngestionError, match="bad.png"):
        load_image(p, 8)


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path, {"kind": "test", "n": 3})
    assert read_manifest(tmp_path) == {"kind": "test", "n": 3}


def test_read_manifest_missing(tmp_path):
    with pytest.raises(FormatError):
        read_manifest(tmp_path)


def test_write_synthetic_dataset_layout(tmp_path):
    domains = generate_domain_images(4, seed=8, image_size=16)
    manifest = write_synthetic_dataset(tmp_path, domains, pairing=SYNTH_PAIRING, seed=8,
                                       image_size=16, excluded=("blue", "striped"))
    assert manifest["domain_names"] == list(domains)
    assert manifest["counts"] == {name: 4 for name in domains}
    for name in domains:
        assert len(sorted((tmp_path / name).glob("*.png"))) == 4
    stored = read_manifest(tmp_path)
    assert stored["image_size"] == 16
    assert stored["pairing"] == [list(p) for p in SYNTH_PAIRING]

    labels = read_labels(tmp_path)
    assert len(labels) == 16
    some_id = next(iter(labels))
    color, texture, seed = labels[some_id]
    assert color in ("red", "blue") and texture in ("plain", "striped")
    assert isinstance(seed, int)

    arrays = load_domain_images(tmp_path)
    assert set(arrays) == set(domains)
    for name, arr in arrays.items():
        assert arr.shape == (4, 3, 16, 16)
        # PNG round trip stays within one quantization step of the source
        src = np.stack([s.image for s in domains[name]])
        assert np.abs(arr - src).max() <= (2.0 / 255.0) + 1e-6

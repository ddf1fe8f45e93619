"""Feature extractor: taps, determinism, frozen weights, VGG16 loading."""

import numpy as np
import pytest

from styleforge import kstm
from styleforge.errors import MissingTensorError, ShapeError
from styleforge.perceptual import (
    TAP_LABELS,
    extract,
    load_tiny,
    load_vgg16,
    save_extractor,
    tiny_extractor,
)
from styleforge.tensor import Tensor, tsum


def vgg_shaped_tensors(rng, scale=0.05):
    """Random tensors with the VGG16 conv topology through conv4_3."""
    widths = [(3, 64), (64, 64), (64, 128), (128, 128),
              (128, 256), (256, 256), (256, 256),
              (256, 512), (512, 512), (512, 512)]
    names = ["conv1_1", "conv1_2", "conv2_1", "conv2_2",
             "conv3_1", "conv3_2", "conv3_3",
             "conv4_1", "conv4_2", "conv4_3"]
    tensors = {}
    for name, (cin, cout) in zip(names, widths):
        tensors[f"{name}.weight"] = (scale * rng.standard_normal((cout, cin, 3, 3))).astype(np.float32)
        tensors[f"{name}.bias"] = np.zeros(cout, dtype=np.float32)
    return tensors


class TestTinyExtractor:
    def test_deterministic(self):
        a, b = tiny_extractor(3), tiny_extractor(3)
        assert a.weight_bytes() == b.weight_bytes()

    def test_seed_changes_weights(self):
        assert tiny_extractor(3).weight_bytes() != tiny_extractor(4).weight_bytes()

    def test_tap_widths(self):
        assert tiny_extractor(0).tap_widths == (8, 16, 32, 64)

    def test_tap_resolutions_64(self, rng):
        ext = tiny_extractor(0)
        taps = extract(ext, Tensor(rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)))
        assert [taps[l].shape for l in TAP_LABELS] == [
            (1, 8, 64, 64), (1, 16, 32, 32), (1, 32, 16, 16), (1, 64, 8, 8)]

    def test_tap_resolutions_256(self, rng):
        ext = tiny_extractor(0)
        taps = extract(ext, Tensor(rng.uniform(0, 1, (1, 3, 256, 256)).astype(np.float32)))
        assert [taps[l].shape[2] for l in TAP_LABELS] == [256, 128, 64, 32]


class TestExtract:
    def test_deterministic_pure(self, rng):
        ext = tiny_extractor(1)
        img = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
        a = extract(ext, img)
        b = extract(ext, img)
        for label in TAP_LABELS:
            assert np.array_equal(a[label].data, b[label].data)

    def test_zero_image_finite(self):
        ext = tiny_extractor(1)
        taps = extract(ext, Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))
        for label in TAP_LABELS:
            assert np.all(np.isfinite(taps[label].data))

    def test_indivisible_dims_rejected(self, rng):
        ext = tiny_extractor(1)
        with pytest.raises(ShapeError):
            extract(ext, Tensor(rng.uniform(0, 1, (1, 3, 20, 16)).astype(np.float32)))

    def test_gradients_flow_to_image_not_weights(self, rng):
        ext = tiny_extractor(1)
        img = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32), requires_grad=True)
        taps = extract(ext, img)
        loss = None
        for label in TAP_LABELS:
            term = tsum(taps[label] * taps[label])
            loss = term if loss is None else loss + term
        loss.backward()
        assert img.grad is not None and np.any(img.grad != 0)
        for stage in ext.stages:
            for spec in stage:
                assert spec.weight.grad is None and spec.bias.grad is None


class TestWeightBanks:
    def test_tiny_round_trip(self, tmp_path):
        ext = tiny_extractor(5)
        path = tmp_path / "tiny.kstm"
        save_extractor(ext, path)
        loaded = load_tiny(path)
        assert loaded.weight_bytes() == ext.weight_bytes()

    def test_vgg16_loads_and_has_tap_widths(self, tmp_path, rng):
        path = tmp_path / "vgg.kstm"
        kstm.write_file(path, 0.0, 0.0, 0, vgg_shaped_tensors(rng))
        ext = load_vgg16(path)
        assert ext.tap_widths == (64, 128, 256, 512)

    def test_vgg16_extract_shapes(self, tmp_path, rng):
        path = tmp_path / "vgg.kstm"
        kstm.write_file(path, 0.0, 0.0, 0, vgg_shaped_tensors(rng))
        ext = load_vgg16(path)
        taps = extract(ext, Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32)))
        assert [taps[l].shape[1] for l in TAP_LABELS] == [64, 128, 256, 512]

    def test_missing_tensor_error_names_it(self, tmp_path, rng):
        tensors = vgg_shaped_tensors(rng)
        del tensors["conv3_1.weight"]
        path = tmp_path / "vgg.kstm"
        kstm.write_file(path, 0.0, 0.0, 0, tensors)
        with pytest.raises(MissingTensorError) as err:
            load_vgg16(path)
        assert "conv3_1.weight" in str(err.value)

    def test_wrong_widths_rejected(self, tmp_path, rng):
        tensors = vgg_shaped_tensors(rng)
        tensors["conv4_3.weight"] = tensors["conv4_3.weight"][:256]
        tensors["conv4_3.bias"] = tensors["conv4_3.bias"][:256]
        path = tmp_path / "vgg.kstm"
        kstm.write_file(path, 0.0, 0.0, 0, tensors)
        with pytest.raises(ShapeError):
            load_vgg16(path)

    def test_vgg16_round_trip(self, tmp_path, rng):
        path = tmp_path / "vgg.kstm"
        kstm.write_file(path, 0.0, 0.0, 0, vgg_shaped_tensors(rng))
        ext = load_vgg16(path)
        path2 = tmp_path / "vgg2.kstm"
        save_extractor(ext, path2)
        assert load_vgg16(path2).weight_bytes() == ext.weight_bytes()

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retinexnet import numerics as nx
from retinexnet.model import (
    MAGIC, DecomNetConfig, EnhanceNetConfig, WeightsFormatError, WeightStore, decom_forward,
    enhance_forward, init_weights, load_weights, save_weights, weights_from_bytes, weights_to_bytes,
)


@pytest.fixture(scope="module")
def small():
    return init_weights(DecomNetConfig(width=8), EnhanceNetConfig(width=8), seed=0)


def _images(shape, seed=0):
    return np.random.default_rng(seed).uniform(size=shape)


class TestDecom:
    def test_shapes_and_range(self, small):
        out = decom_forward(small, _images((2, 3, 16, 12)))
        assert out.R.shape == (2, 3, 16, 12)
        assert out.I.shape == (2, 1, 16, 12)
        for t in (out.R, out.I):
            assert np.all((t.data >= 0) & (t.data <= 1))

    def test_zero_head_gives_half(self, small):
        w = WeightStore(small)
        w["decom.conv4.w"] = nx.Tensor(np.zeros_like(small["decom.conv4.w"].data))
        out = decom_forward(w, _images((1, 3, 8, 8)))
        np.testing.assert_array_equal(out.R.data, 0.5)
        np.testing.assert_array_equal(out.I.data, 0.5)

    def test_rejects_bad_input(self, small):
        with pytest.raises(nx.ShapeError):
            decom_forward(small, np.zeros((1, 4, 8, 8)))
        with pytest.raises(nx.ShapeError):
            decom_forward(small, np.zeros((1, 3, 7, 8)))
        with pytest.raises(ValueError):
            decom_forward(small, np.full((1, 3, 8, 8), 1.5))

    def test_depth_validation(self):
        with pytest.raises(ValueError):
            DecomNetConfig(depth=2)

    def test_translation_equivariance_interior(self, small):
        img = _images((1, 3, 24, 24), seed=3)
        shifted = np.roll(img, 2, axis=3)
        a = decom_forward(small, img).R.data
        b = decom_forward(small, shifted).R.data
        # receptive field radius is depth = 5 pixels; compare away from both borders and the wrap seam
        np.testing.assert_allclose(b[..., 8:16, 9:16], a[..., 8:16, 7:14], atol=1e-6)

    def test_gradients_reach_every_parameter(self, small):
        small.zero_grad()
        out = decom_forward(small, _images((1, 3, 8, 8)))
        nx.backprop(nx.add(nx.mean(out.R), nx.mean(out.I)))
        for name, t in small.subset("decom.").items():
            assert t.grad is not None and np.any(t.grad != 0), name
        small.zero_grad()


class TestEnhance:
    def test_output_shape_and_range(self, small):
        R, I = _images((2, 3, 16, 16)), _images((2, 1, 16, 16), 1)
        out = enhance_forward(small, R, I)
        assert out.shape == (2, 1, 16, 16)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_feature_pyramid(self):
        w = init_weights(None, EnhanceNetConfig(width=4), seed=1)
        _, feats = enhance_forward(w, _images((1, 3, 96, 96)), _images((1, 1, 96, 96)), return_features=True)
        assert [f.shape[2] for f in feats["encoder"]] == [48, 24, 12]
        assert [f.shape[2] for f in feats["decoder"]] == [24, 48, 96]

    def test_divisibility(self, small):
        with pytest.raises(nx.ShapeError, match="divisible"):
            enhance_forward(small, _images((1, 3, 12, 16)), _images((1, 1, 12, 16)))

    def test_mismatched_illumination(self, small):
        with pytest.raises(nx.ShapeError):
            enhance_forward(small, _images((1, 3, 16, 16)), _images((1, 3, 16, 16)))

    def test_gradients_reach_every_parameter(self, small):
        small.zero_grad()
        out = enhance_forward(small, _images((1, 3, 16, 16)), _images((1, 1, 16, 16)))
        nx.backprop(nx.mean(out))
        for name, t in small.subset("enhance.").items():
            assert t.grad is not None and np.any(t.grad != 0), name
        small.zero_grad()


class TestInit:
    def test_he_std(self):
        w = init_weights(DecomNetConfig(), None, seed=0)
        k = w["decom.conv2.w"].data
        expected = np.sqrt(2.0 / (64 * 9))
        assert abs(k.std() - expected) <= 0.2 * expected
        assert not np.any(w["decom.conv2.b"].data)

    def test_seeded(self):
        a = init_weights(DecomNetConfig(width=4), EnhanceNetConfig(width=4), seed=7)
        b = init_weights(DecomNetConfig(width=4), EnhanceNetConfig(width=4), seed=7)
        assert weights_to_bytes(a) == weights_to_bytes(b)

    def test_configs_inferred(self, small):
        assert small.decom_config == DecomNetConfig(width=8)
        assert small.enhance_config == EnhanceNetConfig(width=8)


class TestWeightsFile:
    def test_round_trip_bit_exact(self, small, tmp_path):
        path = tmp_path / "w.rtxw"
        save_weights(small, path)
        loaded = load_weights(path)
        assert list(loaded) == list(small)
        for k in small:
            assert loaded[k].data.dtype == np.float32
            assert loaded[k].data.tobytes() == small[k].data.tobytes()

    def test_file_size(self, small, tmp_path):
        path = tmp_path / "w.rtxw"
        save_weights(small, path)
        expected = 12 + sum(2 + len(k.encode()) + 1 + 4 * t.data.ndim + 4 * t.data.size for k, t in small.items())
        assert path.stat().st_size == expected

    def test_bad_magic(self, small):
        buf = bytearray(weights_to_bytes(small))
        buf[:4] = b"XXXX"
        with pytest.raises(WeightsFormatError, match="magic"):
            weights_from_bytes(bytes(buf))

    def test_bad_version(self, small):
        buf = bytearray(weights_to_bytes(small))
        buf[4] = 9
        with pytest.raises(WeightsFormatError, match="version"):
            weights_from_bytes(bytes(buf))

    def test_truncated_and_trailing(self, small):
        buf = weights_to_bytes(small)
        with pytest.raises(WeightsFormatError, match="truncated"):
            weights_from_bytes(buf[:-3])
        with pytest.raises(WeightsFormatError, match="trailing"):
            weights_from_bytes(buf + b"\0")

    def test_non_finite_refused(self):
        w = WeightStore({"decom.conv0.b": nx.Tensor(np.array([np.nan], dtype=np.float32))})
        with pytest.raises(ValueError):
            weights_to_bytes(w)

    def test_magic_prefix(self, small):
        assert weights_to_bytes(small)[:4] == MAGIC

    @settings(max_examples=30, deadline=None)
    @given(st.dictionaries(st.text(min_size=1, max_size=12),
                           st.lists(st.integers(0, 4), min_size=0, max_size=3), max_size=5),
           st.integers(0, 1000))
    def test_round_trip_property(self, shapes, seed):
        rng = np.random.default_rng(seed)
        w = WeightStore({k: nx.Tensor(rng.normal(size=tuple(s)).astype(np.float32)) for k, s in shapes.items()})
        back = weights_from_bytes(weights_to_bytes(w))
        assert list(back) == list(w)
        for k in w:
            assert back[k].shape == w[k].shape
            assert back[k].data.tobytes() == w[k].data.tobytes()

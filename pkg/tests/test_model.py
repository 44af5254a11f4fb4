import numpy as np
import pytest

from mffaseg import tensor as T
from mffaseg.gradcheck import check_many
from mffaseg.mffa import MFFAConfig
from mffaseg.model import (EncoderConfig, ModelConfig, SegModel, conv_macs, count_flops, model_flops,
                           predict_mask)
from mffaseg.tensor import Tensor


def small_cfg(aggregation="tab+sab", variant="trimmed"):
    return ModelConfig(EncoderConfig(variant, 4, 4, 8), MFFAConfig(8), aggregation, 6)


def frames(rng, n, side=16):
    return rng.uniform(-1, 1, (n, side, side, 3))


class TestEncoder:
    def test_feature_extents(self):
        m = SegModel(ModelConfig())
        assert m.encode(np.zeros((64, 64, 3), np.float32)).shape == (16, 16, 64)

    def test_full_has_more_blocks(self):
        assert EncoderConfig("trimmed").num_blocks < EncoderConfig("full").num_blocks
        assert SegModel(ModelConfig(EncoderConfig("full"))).encode(np.zeros((64, 64, 3), np.float32)).shape == (16, 16, 64)

    def test_trimmed_cheaper(self):
        assert count_flops(EncoderConfig("trimmed"), (64, 64)) < count_flops(EncoderConfig("full"), (64, 64))

    def test_zero_frame_deterministic(self):
        a = SegModel(small_cfg(), seed=5).encode(np.zeros((16, 16, 3), np.float32)).data
        b = SegModel(small_cfg(), seed=5).encode(np.zeros((16, 16, 3), np.float32)).data
        np.testing.assert_array_equal(a, b)

    def test_indivisible_extents(self):
        with pytest.raises(ValueError):
            SegModel(small_cfg()).encode(np.zeros((18, 16, 3), np.float32))


class TestDecoder:
    def test_distribution_and_extents(self):
        m = SegModel(small_cfg())
        s = m.decode(Tensor(np.random.default_rng(0).random((4, 4, 8)).astype(np.float32)), (16, 16))
        assert s.shape == (16, 16, 2)
        assert np.abs(s.data.sum(-1) - 1).max() < 1e-6

    def test_head_before_upsampling_is_exact(self):
        # 1x1 head then bilinear equals bilinear then 1x1 head
        rng = np.random.default_rng(1)
        m = SegModel(small_cfg(), dtype=np.float64)
        x = T.relu(T.conv2d(Tensor(rng.random((4, 4, 8))), m.params["decoder.conv.kernel"], m.params["decoder.conv.bias"]))
        k, b = m.params["decoder.head.kernel"], m.params["decoder.head.bias"]
        a = T.resample(T.conv2d(x, k, b), (16, 16)).data
        c = T.conv2d(T.resample(x, (16, 16)), k, b).data
        np.testing.assert_allclose(a, c, atol=1e-12)

    def test_gradient_8x8(self):
        rng = np.random.default_rng(2)
        m = SegModel(small_cfg(), seed=2, dtype=np.float64)
        for name, prm in m.params.items():
            if name.startswith("decoder") and name.endswith("bias"):
                prm.data[...] = rng.normal(0, 0.1, prm.shape)
        h = Tensor(rng.random((8, 8, 8)), requires_grad=True)
        lab = rng.integers(0, 2, (32, 32))
        onehot = np.stack([lab, 1 - lab], -1).astype(float)
        dec = {k: v for k, v in m.params.items() if k.startswith("decoder")}
        errs = check_many(lambda: T.cross_entropy(onehot, m.decode(h, (32, 32))), {"h": h, **dec})
        assert max(errs.values()) < 1e-4


class TestPredictMask:
    def test_instrument_channel_zero(self):
        s = np.broadcast_to([0.6, 0.4], (3, 3, 2))
        assert predict_mask(s).all()

    def test_ties_go_to_background(self):
        assert not predict_mask(np.full((3, 3, 2), 0.5)).any()

    def test_monotone_rescaling_invariance(self):
        logits = np.random.default_rng(3).standard_normal((5, 5, 2))
        base = predict_mask(T.softmax_channel(Tensor(logits)))
        np.testing.assert_array_equal(base, predict_mask(T.softmax_channel(Tensor(3 * logits + 1))))


class TestRunSequence:
    def test_length_one_directions_agree(self):
        m = SegModel(small_cfg())
        x = frames(np.random.default_rng(4), 1).astype(np.float32)
        fw, bw = m.run_sequence(x, "forward"), m.run_sequence(x, "backward")
        np.testing.assert_array_equal(fw.probs[0].data, bw.probs[0].data)

    def test_second_frame_uses_state(self):
        m = SegModel(small_cfg(), seed=1)
        m.params["mffa.tab.gate.bias"].data[...] = 3.0
        x = frames(np.random.default_rng(5), 2).astype(np.float32)
        out = m.run_sequence(x, "forward")
        alone, _ = m.step(Tensor(x[1]), None)
        assert np.abs(out.probs[1].data - alone.data).max() > 1e-7

    def test_provenance_tags(self):
        m = SegModel(small_cfg())
        x = np.repeat(frames(np.random.default_rng(6), 1), 4, axis=0).astype(np.float32)
        assert m.run_sequence(x, "forward").provenance == [0, 1, 2, 3]
        # stored in frame order; read in traversal order they are 5, 4, 3, 2
        assert m.run_sequence(x, "backward").provenance[::-1] == [5, 4, 3, 2]

    def test_traversal_symmetry(self):
        m = SegModel(small_cfg(), seed=2)
        x = frames(np.random.default_rng(7), 4).astype(np.float32)
        fw = m.run_sequence(x, "forward")
        rev = m.run_sequence(x[::-1].copy(), "backward")
        for i in range(4):
            np.testing.assert_array_equal(fw.probs[i].data, rev.probs[3 - i].data)

    def test_no_mffa_is_frame_independent(self):
        m = SegModel(small_cfg("none"))
        x = frames(np.random.default_rng(8), 3).astype(np.float32)
        out = m.run_sequence(x, "forward")
        for i in range(3):
            alone = m.decode(m.encode(Tensor(x[i])), (16, 16))
            np.testing.assert_array_equal(out.probs[i].data, alone.data)

    def test_state_shapes_constant(self):
        m = SegModel(small_cfg())
        out = m.run_sequence(frames(np.random.default_rng(9), 4).astype(np.float32))
        assert len({h.shape for h in out.features}) == 1

    def test_deterministic(self):
        x = frames(np.random.default_rng(10), 3).astype(np.float32)
        a = SegModel(small_cfg(), seed=3).run_sequence(x)
        b = SegModel(small_cfg(), seed=3).run_sequence(x)
        for p, q in zip(a.probs, b.probs):
            np.testing.assert_array_equal(p.data, q.data)

    def test_batched_matches_single(self):
        m = SegModel(small_cfg(), seed=4)
        rng = np.random.default_rng(11)
        x = np.stack([frames(rng, 3), frames(rng, 3)]).astype(np.float32)
        both = m.run_sequence(x)
        one = m.run_sequence(x[1])
        for i in range(3):
            np.testing.assert_allclose(both.probs[i].data[1], one.probs[i].data, atol=1e-6)

    def test_empty_sequence(self):
        with pytest.raises(ValueError):
            SegModel(small_cfg()).run_sequence(np.zeros((0, 16, 16, 3), np.float32))


class TestFlops:
    def test_pointwise_closed_form(self):
        assert conv_macs(7, 5, 1, 3, 4) == 7 * 5 * 3 * 4

    def test_ratio_at_defaults(self):
        assert count_flops(EncoderConfig("trimmed"), (64, 64)) / count_flops(EncoderConfig("full"), (64, 64)) < 0.65

    @pytest.mark.parametrize("variant", ["trimmed", "full"])
    def test_quadratic_scaling(self, variant):
        cfg = EncoderConfig(variant)
        assert count_flops(cfg, (128, 128)) == 4 * count_flops(cfg, (64, 64))

    def test_model_split(self):
        f = model_flops(ModelConfig(), (64, 64))
        assert f["encoder"] == count_flops(EncoderConfig(), (64, 64)) and f["mffa"] > 0
        assert model_flops(ModelConfig(aggregation="none"), (64, 64))["mffa"] == 0


def test_config_round_trip():
    cfg = small_cfg("sab", "full")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
